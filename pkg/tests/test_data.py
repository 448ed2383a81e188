from collections import Counter

import numpy as np

from patchtts import toycodec as tc
from patchtts.data import (DataConfig, gen_corpus, load_manifest, make_batch,
                           make_lexicon, prepare, speaker_tables, write_manifest)
from patchtts.textbpe import train_bpe


def test_style_histogram_balanced():
    utts = gen_corpus(DataConfig(seed=0, n_utts=103, n_speakers=2))
    counts = Counter(u.style for u in utts)
    assert set(counts) == set(tc.STYLES)
    assert max(counts.values()) - min(counts.values()) <= 1


def test_fidelity_balanced():
    utts = gen_corpus(DataConfig(seed=0, n_utts=100, n_speakers=2))
    counts = Counter(u.fidelity for u in utts)
    assert counts["low"] == counts["high"] == 50


def test_corpus_deterministic():
    a = gen_corpus(DataConfig(seed=5, n_utts=40, n_speakers=2))
    b = gen_corpus(DataConfig(seed=5, n_utts=40, n_speakers=2))
    assert [u.to_json() for u in a] == [u.to_json() for u in b]
    c = gen_corpus(DataConfig(seed=6, n_utts=40, n_speakers=2))
    assert [u.text for u in a] != [u.text for u in c]


def test_streams_match_codec():
    utts = gen_corpus(DataConfig(seed=3, n_utts=20, n_speakers=2))
    tables = speaker_tables(utts)
    for u in utts:
        s = tc.encode(u.text, tables[u.speaker_id], u.style, u.fidelity)
        assert s.l0 == u.l0 and s.l1 == u.l1 and s.l2 == u.l2
        assert tc.transcribe(u.stream, tables[u.speaker_id]) == u.text


def test_split_fractions_and_styles():
    utts = gen_corpus(DataConfig(seed=1, n_utts=500, n_speakers=2))
    held = [u for u in utts if u.split == "heldout"]
    assert len(held) == 50
    assert set(u.style for u in held) == set(tc.STYLES)


def test_lexicon_bounds():
    cfg = DataConfig(seed=9, lexicon_size=10, word_len_min=2, word_len_max=4)
    words = make_lexicon(cfg)
    assert len(words) == 10 and len(set(words)) == 10
    assert all(2 <= len(w) <= 4 and " " not in w for w in words)


def test_manifest_roundtrip(tmp_path):
    utts = gen_corpus(DataConfig(seed=2, n_utts=12, n_speakers=2))
    path = tmp_path / "dataset.jsonl"
    write_manifest(path, utts)
    loaded = load_manifest(path)
    assert [u.to_json() for u in loaded] == [u.to_json() for u in utts]
    first_line = path.read_text().splitlines()[0]
    for key in ("seed", "speaker_id", "style", "fidelity", "text", "transcript",
                "l0", "l1", "l2", "split"):
        assert f'"{key}"' in first_line


def test_prepare_and_batch_shapes():
    utts = gen_corpus(DataConfig(seed=4, n_utts=10, n_speakers=2))
    vocab = train_bpe([u.text for u in utts], 256)
    items = prepare(utts, vocab)
    assert all(it.text_ids[0] in (3, 4) for it in items)  # fidelity tag first
    batch = make_batch(items, [0, 3, 5])
    assert batch.size == 3
    assert batch.patches.shape[2] == 7
    assert batch.text_mask.max() == 1.0
    for r in range(3):
        assert batch.n_frames[r] == len(items[[0, 3, 5][r]].text)


def test_whisper_rows_carry_zero_detail():
    utts = gen_corpus(DataConfig(seed=8, n_utts=50, n_speakers=2))
    whisper = [u for u in utts if u.style == "whisper"]
    assert whisper and all(all(t == 0 for t in u.l2) for u in whisper)
    regular_high = [u for u in utts if u.style != "whisper" and u.fidelity == "high"]
    assert any(any(t != 0 for t in u.l2) for u in regular_high)
