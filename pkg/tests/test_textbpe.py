import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchtts import textbpe as bpe
from patchtts.toycodec import ALPHABET

texts = st.text(alphabet=ALPHABET, min_size=0, max_size=30)


def test_single_candidate_merge():
    vocab = bpe.train_bpe(["aaaa"], vocab_size=len(bpe.SPECIALS) + len(ALPHABET) + 1)
    assert vocab.merges == (("a", "a"),)


def test_two_merges_by_frequency():
    # "abab abab": (a,b) occurs 4 times, then (ab,ab) twice
    vocab = bpe.train_bpe(["abab abab"], vocab_size=len(bpe.SPECIALS) + len(ALPHABET) + 2)
    assert vocab.merges == (("a", "b"), ("ab", "ab"))


def test_tie_broken_lexicographically():
    vocab = bpe.train_bpe(["ba", "ab"], vocab_size=len(bpe.SPECIALS) + len(ALPHABET) + 1)
    assert vocab.merges == ()  # no pair repeats: each occurs once
    # ("a","b") and ("b","a") both occur 3 times; lexicographic order wins
    vocab = bpe.train_bpe(["abab", "baba"], vocab_size=len(bpe.SPECIALS) + len(ALPHABET) + 1)
    assert vocab.merges[0] == ("a", "b")


def test_merge_stops_when_no_pair_repeats():
    vocab = bpe.train_bpe(["abcdefg"], vocab_size=512)
    assert vocab.merges == ()


def test_vocab_size_too_small_rejected():
    with pytest.raises(ValueError):
        bpe.train_bpe(["abc"], vocab_size=10)
    with pytest.raises(ValueError):
        bpe.train_bpe([], vocab_size=512)


def test_specials_lowest_ids():
    vocab = bpe.train_bpe(["abc abc"], vocab_size=512)
    for i, s in enumerate(bpe.SPECIALS):
        assert vocab.id_of[s] == i
    assert vocab.size <= 512


def test_quality_prefix_is_first_id():
    vocab = bpe.train_bpe(["mister story time"], vocab_size=512)
    ids = vocab.encode_text("mister", bpe.TAG_16K)
    assert ids[0] == vocab.id_of[bpe.TAG_16K]
    ids48 = vocab.encode_text("mister", bpe.TAG_48K)
    assert ids48[0] == vocab.id_of[bpe.TAG_48K]
    assert ids[1:] == ids48[1:]


def test_empty_text_is_just_fidelity_token():
    vocab = bpe.train_bpe(["word"], vocab_size=512)
    assert vocab.encode_text("", bpe.TAG_48K) == [vocab.id_of[bpe.TAG_48K]]


def test_unknown_fidelity_tag_rejected():
    vocab = bpe.train_bpe(["word"], vocab_size=512)
    with pytest.raises(ValueError):
        vocab.encode_text("word", "[8000]")


@settings(max_examples=60, deadline=None)
@given(st.lists(texts, min_size=1, max_size=6), texts)
def test_roundtrip_via_decode(corpus, sample):
    vocab = bpe.train_bpe(corpus, vocab_size=200)
    ids = vocab.encode_text(sample, bpe.TAG_48K)
    assert vocab.decode(ids) == sample
    assert vocab.decode(vocab.encode(sample)) == sample


def test_encode_deterministic_and_order_independent():
    vocab = bpe.train_bpe(["the cat sat", "the dog sat"], vocab_size=512)
    a = vocab.encode("the cat")
    _ = vocab.encode("unrelated words here")
    b = vocab.encode("the cat")
    assert a == b


def test_unknown_character_falls_back_to_pad():
    vocab = bpe.train_bpe(["plain text"], vocab_size=512)
    ids = vocab.encode("text!")
    assert ids[-1] == vocab.id_of[bpe.PAD]
    assert vocab.decode(ids) == "text"  # specials stripped


def test_merges_apply_in_training_order():
    vocab = bpe.train_bpe(["aaab aaab aaab"], vocab_size=512)
    ids = vocab.encode("aaab")
    assert vocab.decode(ids) == "aaab"
    # encoding compresses: fewer tokens than characters
    assert len(ids) < 4


def test_serialization_roundtrip(tmp_path):
    vocab = bpe.train_bpe(["the cat sat on the mat", "a cat ate"], vocab_size=512)
    path = tmp_path / "bpe.vocab"
    vocab.save(path)
    loaded = bpe.BpeVocab.load(path)
    assert loaded.merges == vocab.merges
    assert loaded.base_symbols == vocab.base_symbols
    assert loaded.encode_text("the cat", bpe.TAG_48K) == vocab.encode_text("the cat", bpe.TAG_48K)


def test_vocab_512_cap():
    # large repetitive corpus: training must stop at exactly 512 symbols
    corpus = [f"{w} {v}" for w in ("alpha", "beta", "gamma", "delta") * 20
              for v in ("one", "two", "three")]
    vocab = bpe.train_bpe(corpus, vocab_size=512)
    assert vocab.size <= 512
