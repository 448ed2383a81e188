import math

import numpy as np
import pytest

from patchtts import numerics as nm
from patchtts import preference as pref
from patchtts import toycodec as tc
from patchtts.data import DataConfig, gen_corpus, make_batch, prepare, speaker_tables
from patchtts.model import ModelConfig, SpeechLM
from patchtts.textbpe import train_bpe
from patchtts.training import TrainConfig, train

TINY = dict(d_model=32, n_heads=2, n_layers_enc=1, n_layers_global=1,
            n_layers_local=1, d_ff=64, max_frames=16)


def _pair(rng, model, t_chosen=3, t_rejected=2):
    c = model.config
    return pref.PreferencePair(
        utt_id="p0",
        sv=rng.standard_normal(c.d_sv),
        clap=rng.standard_normal(c.d_clap),
        text_ids=list(rng.integers(0, c.text_vocab, 5)),
        chosen=[list(r) for r in rng.integers(0, 30, (t_chosen, 7))],
        rejected=[list(r) for r in rng.integers(0, 30, (t_rejected, 7))],
        cer_rejected=0.8,
        quality_rejected=0.4,
    )


def test_pair_requires_nonempty_sides():
    with pytest.raises(ValueError):
        pref.PreferencePair(utt_id="x", sv=np.zeros(2), clap=np.zeros(2),
                            text_ids=[1], chosen=[], rejected=[[0] * 7],
                            cer_rejected=0, quality_rejected=0)


# -- odds-ratio algebra -----------------------------------------------------------


def test_log_odds_matches_formula(f64):
    for p in (0.6, 0.3, 0.99, 0.01):
        lp = nm.Tensor(np.asarray(math.log(p)))
        got = pref._log_odds(lp).item()
        assert got == pytest.approx(math.log(p / (1 - p)), rel=1e-9)


def test_or_term_symmetric_case(f64):
    m = SpeechLM(ModelConfig(**TINY), seed=1)
    rng = np.random.default_rng(0)
    p = _pair(rng, m)
    p.rejected = [list(r) for r in p.chosen]
    out = pref.orpo_loss(m, p, lam=1.0, flux_beta=0.0)
    assert out.or_term.item() == pytest.approx(math.log(2), abs=1e-9)
    assert out.margin == pytest.approx(0.0, abs=1e-12)


def test_or_term_limit_and_direct_value():
    # direct evaluation with hand-picked likelihoods, bypassing the model
    def or_term(logp_c, logp_r):
        def odds(lp):
            p = min(max(math.exp(lp), 1e-9), 1 - 1e-9)
            return p / (1 - p)

        z = math.log(odds(logp_c) / odds(logp_r))
        return math.log1p(math.exp(-z))

    assert or_term(math.log(0.6), math.log(0.3)) == pytest.approx(
        -math.log(3.5 / 4.5), rel=1e-9
    )  # odds 1.5 vs 3/7 -> ratio 3.5
    assert or_term(-1e-12, -60.0) == pytest.approx(0.0, abs=1e-6)


def test_or_term_direct_value_through_model_path(f64):
    # the tensor path must reproduce the same closed-form number
    lp_c = nm.Tensor(np.asarray(math.log(0.6)))
    lp_r = nm.Tensor(np.asarray(math.log(0.3)))
    got = nm.softplus(-(pref._log_odds(lp_c) - pref._log_odds(lp_r))).item()
    assert got == pytest.approx(0.2513144282809062, rel=1e-9)


def test_or_term_nonnegative_random(f64):
    m = SpeechLM(ModelConfig(**TINY), seed=2)
    rng = np.random.default_rng(1)
    for _ in range(5):
        out = pref.orpo_loss(m, _pair(rng, m), flux_beta=0.0)
        assert out.or_term.item() >= 0.0


def test_lambda_zero_reduces_to_supervised(f64):
    m = SpeechLM(ModelConfig(**TINY), seed=3)
    rng = np.random.default_rng(2)
    p = _pair(rng, m)
    out = pref.orpo_loss(m, p, lam=0.0, flux_beta=0.0)
    assert out.total.item() == pytest.approx(out.nll_chosen.item(), rel=1e-12)


def test_orpo_includes_flux_on_chosen(f64):
    m = SpeechLM(ModelConfig(**TINY), seed=3)
    rng = np.random.default_rng(2)
    p = _pair(rng, m)
    without = pref.orpo_loss(m, p, lam=0.25, flux_beta=0.0)
    with_flux = pref.orpo_loss(m, p, lam=0.25, flux_beta=0.1)
    assert with_flux.flux.item() > 0.0
    assert with_flux.total.item() == pytest.approx(
        without.total.item() + with_flux.flux.item(), rel=1e-9
    )


def test_orpo_gradcheck(f64):
    m = SpeechLM(ModelConfig(**TINY), seed=1)
    jitter = np.random.default_rng(5)
    for _, t in m.params.items():
        t.data = t.data + jitter.normal(0, 0.08, size=t.shape)
    rng = np.random.default_rng(0)
    p = _pair(rng, m)
    err = nm.grad_check(lambda: pref.orpo_loss(m, p).total, m.params,
                        n_probe=60, eps=1e-5, seed=2)
    assert err < 1e-3


# -- candidate ranking ---------------------------------------------------------------


def test_rank_selects_injected_repetition_corruption():
    table = tc.SpeakerTable(3, 0)
    good = tc.encode("abc def", table, "regular", "high")
    near = tc.encode("abc dxf", table, "regular", "high")
    stuck_tokens = [good.l0[0]] * 7
    corrupted = tc.CodebookStream(stuck_tokens, [0] * 14, [0] * 28)
    idx, cer_val, quality = pref.rank_candidates([good, near, corrupted], "abc def", table)
    assert idx == 2
    assert cer_val > 0.5 and quality < 0.2


def test_rank_degenerate_all_perfect():
    table = tc.SpeakerTable(3, 1)
    s = tc.encode("xy", table, "regular", "high")
    streams = [tc.encode("xy", table, "regular", "high") for _ in range(3)]
    idx, cer_val, quality = pref.rank_candidates(streams, "xy", table)
    assert cer_val == 0.0 and idx in (0, 1, 2)


def test_rank_empty_stream_scores_cer_one():
    table = tc.SpeakerTable(3, 1)
    empty = tc.CodebookStream([], [], [])
    fine = tc.encode("xy", table, "regular", "high")
    idx, cer_val, _ = pref.rank_candidates([fine, empty], "xy", table)
    assert idx == 1 and cer_val == 1.0


# -- pair building against a trained model ----------------------------------------------


@pytest.fixture(scope="module")
def small_trained():
    utts = gen_corpus(DataConfig(seed=21, n_utts=60, n_speakers=2,
                                 lexicon_size=8, word_len_max=3))
    train_utts = [u for u in utts if u.split == "train"]
    held = [u for u in utts if u.split == "heldout"]
    vocab = train_bpe([u.text for u in train_utts], 256)
    items = prepare(train_utts, vocab)
    model = SpeechLM(ModelConfig(**TINY), seed=6)
    cfg = TrainConfig(steps=250, warmup_steps=20, batch_size=8, seed=6, flux_beta=0.01)
    train(None, cfg, model, make_batch=lambda i: make_batch(items, i), n_items=len(items))
    return model, vocab, train_utts, held


def test_build_pairs_count_and_determinism(small_trained):
    model, vocab, train_utts, held = small_trained
    tables = speaker_tables(train_utts)
    seeds = train_utts[:6]
    arb = [u.text for u in held]
    pairs1 = pref.build_pairs(model, vocab, seeds, tables, arb, n_cycles=2, seed=9)
    pairs2 = pref.build_pairs(model, vocab, seeds, tables, arb, n_cycles=2, seed=9)
    assert len(pairs1) == len(seeds)
    for a, b in zip(pairs1, pairs2):
        assert a.chosen == b.chosen and a.rejected == b.rejected
        assert a.cer_rejected == b.cer_rejected
    for p, u in zip(pairs1, seeds):
        assert p.chosen == u.patches  # chosen is always the ground truth


def test_pairs_roundtrip_file(small_trained, tmp_path):
    model, vocab, train_utts, held = small_trained
    tables = speaker_tables(train_utts)
    pairs = pref.build_pairs(model, vocab, train_utts[:3], tables,
                             [u.text for u in held], n_cycles=2, seed=1)
    path = tmp_path / "pairs.jsonl"
    pref.write_pairs(path, pairs)
    loaded = pref.load_pairs(path)
    assert len(loaded) == 3
    assert loaded[0].chosen == pairs[0].chosen
    assert loaded[0].rejected == pairs[0].rejected
    assert np.allclose(loaded[0].sv, pairs[0].sv)


def test_finetune_margin_increases(small_trained):
    model, vocab, train_utts, held = small_trained
    # fine-tune a fresh copy so the module fixture stays pristine
    import copy

    m2 = SpeechLM(model.config, seed=6)
    for (_, dst), (_, src) in zip(m2.params.items(), model.params.items()):
        dst.data = src.data.copy()
    tables = speaker_tables(train_utts)
    pairs = pref.build_pairs(m2, vocab, train_utts[:6], tables,
                             [u.text for u in held], n_cycles=2, seed=2)
    before = pref.mean_margin(m2, pairs)
    res = pref.finetune(m2, pairs, pref.FinetuneConfig(steps=60, lr=1e-4, seed=3))
    after = pref.mean_margin(m2, pairs)
    assert after > before
    assert len(res.log) == 60
    assert res.log[0]["margin"] is not None


def test_finetune_requires_pairs():
    m = SpeechLM(ModelConfig(**TINY), seed=1)
    with pytest.raises(ValueError):
        pref.finetune(m, [])
