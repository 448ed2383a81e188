"""Preference fine-tuning on cyclic model outputs.

Pairs are built the reverse-inference way: synthesize arbitrary text from
a seed utterance's reference, feed that output back as the reference with
the original transcript, and re-predict the original utterance several
times. The worst re-prediction (ranked by character error rate, then by
the repetition-based quality proxy) becomes the rejected sequence; the
ground-truth token stream is the chosen one. The objective is the usual
odds-ratio formulation: NLL on chosen plus a log-sigmoid penalty on the
log odds ratio, with the flux term on chosen coarse logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from . import toycodec as tc
from .data import FIDELITY_TAG, Utterance
from .hashing import derive_seed
from .inference import SampleConfig, synthesize
from .metrics import edit_error_rate, stuck_rate
from .model import SpeechLM
from .numerics import Tensor
from .textbpe import BpeVocab
from .training import AdamW, clip_gradients, flux_loss


@dataclass
class PreferencePair:
    utt_id: str
    sv: np.ndarray
    clap: np.ndarray
    text_ids: list[int]
    chosen: list[list[int]]
    rejected: list[list[int]]
    cer_rejected: float
    quality_rejected: float

    def __post_init__(self):
        if not self.chosen or not self.rejected:
            raise ValueError("chosen and rejected must be nonempty")


def rank_candidates(streams: list[tc.CodebookStream], ref_text: str,
                    table: tc.SpeakerTable) -> tuple[int, float, float]:
    """Index of the worst candidate plus its (cer, quality proxy).

    Worst = highest CER, ties broken by highest stuck rate (lowest
    quality). Empty candidates transcribe to "" and score CER 1.0.
    """
    if not streams:
        raise ValueError("no candidates to rank")
    keyed = []
    for i, s in enumerate(streams):
        c = edit_error_rate(tc.transcribe(s, table), ref_text, unit="char")
        keyed.append((c, stuck_rate(s), i))
    worst = max(keyed, key=lambda k: (k[0], k[1], -k[2]))
    return worst[2], worst[0], 1.0 - worst[1]


def build_pairs(
    model: SpeechLM,
    vocab: BpeVocab,
    utts: list[Utterance],
    tables: dict[int, tc.SpeakerTable],
    arbitrary_texts: list[str],
    n_cycles: int = 4,
    seed: int = 0,
    sample_cfg: SampleConfig | None = None,
) -> list[PreferencePair]:
    """One pair per seed utterance, deterministic in (model, seed)."""
    if not arbitrary_texts:
        raise ValueError("need arbitrary texts for the first cycle step")
    base = sample_cfg or SampleConfig(max_frames=model.config.max_frames)
    pairs = []
    for i, u in enumerate(utts):
        ref = tc.speaker_embed(u.speaker_id, u.style)
        arb = arbitrary_texts[i % len(arbitrary_texts)]
        first = synthesize(
            model, vocab, arb, ref,
            replace(base, seed=derive_seed(seed, f"cycle1:{u.utt_id}")),
        )
        cyc_ref = tc.embed_stream(first.stream)
        candidates = [
            synthesize(
                model, vocab, u.text, cyc_ref,
                replace(base, seed=derive_seed(seed, f"cycle2:{u.utt_id}:{k}")),
            ).stream
            for k in range(n_cycles)
        ]
        non_empty = [s for s in candidates if s.frames > 0]
        if not non_empty:
            # all cycles collapsed to empty output; 1-frame garbage stands in
            non_empty = [tc.CodebookStream([0], [0, 0], [0, 0, 0, 0])]
        idx, worst_cer, quality = rank_candidates(non_empty, u.text, tables[u.speaker_id])
        pairs.append(
            PreferencePair(
                utt_id=u.utt_id,
                sv=ref.sv_embed,
                clap=ref.clap_embed,
                text_ids=vocab.encode_text(u.text, FIDELITY_TAG[u.fidelity]),
                chosen=u.patches,
                rejected=tc.flatten_lenient(non_empty[idx]),
                cer_rejected=worst_cer,
                quality_rejected=quality,
            )
        )
    return pairs


def write_pairs(path, pairs: list[PreferencePair]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps({
                "utt_id": p.utt_id,
                "text_ids": p.text_ids,
                "sv": [float(x) for x in p.sv],
                "clap": [float(x) for x in p.clap],
                "chosen": p.chosen,
                "rejected": p.rejected,
                "cer_rejected": p.cer_rejected,
                "quality_rejected": p.quality_rejected,
            }, sort_keys=True) + "\n")


def load_pairs(path) -> list[PreferencePair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            pairs.append(PreferencePair(
                utt_id=d["utt_id"], sv=np.asarray(d["sv"]), clap=np.asarray(d["clap"]),
                text_ids=d["text_ids"], chosen=d["chosen"], rejected=d["rejected"],
                cer_rejected=d["cer_rejected"], quality_rejected=d["quality_rejected"],
            ))
    return pairs


def _sequence_logp(model: SpeechLM, memory, mem_mask, patches: list[list[int]]):
    """Length-normalized token log-likelihood of an EOS-terminated sequence.

    Returns (logp tensor, coarse logits (T+1, V0+1), coarse targets).
    """
    c = model.config
    t = len(patches)
    arr = np.asarray(patches, dtype=int).reshape(1, t, 7)
    latents = model.frame_latents(memory, mem_mask, arr).reshape(t + 1, c.d_model)
    teacher = np.zeros((t + 1, 6), dtype=int)
    if t > 0:
        teacher[:t] = arr[0, :, :6]
    logits = model.local_logits(latents, teacher)
    t0 = np.full(t + 1, c.eos_token, dtype=int)
    if t > 0:
        t0[:t] = arr[0, :, 0]
    nll_sum = nm.sum_(nm.cross_entropy_rows(logits[0], t0))
    count = t + 1
    if t > 0:
        for j in range(1, 7):
            rows = nm.cross_entropy_rows(logits[j][:t, :], arr[0, :, j])
            nll_sum = nll_sum + nm.sum_(rows)
            count += t
    logp = nll_sum * (-1.0 / count)
    return logp, logits[0], t0


def _log_odds(logp: Tensor) -> Tensor:
    p = nm.clamp(nm.exp(logp), 1e-9, 1.0 - 1e-9)
    return nm.log(p) - nm.log(1.0 - p)


@dataclass
class OrpoOutput:
    nll_chosen: Tensor
    or_term: Tensor
    flux: Tensor
    total: Tensor
    logp_chosen: float
    logp_rejected: float

    @property
    def margin(self) -> float:
        return self.logp_chosen - self.logp_rejected


def orpo_loss(model: SpeechLM, pair: PreferencePair, lam: float = 0.25,
              flux_beta: float | None = None) -> OrpoOutput:
    """NLL on chosen + lam * odds-ratio term + flux on chosen coarse logits.

    odds(y) = p/(1-p) with p the exp of the length-normalized sequence
    log-likelihood (clamped); the or_term is -log sigmoid(log odds ratio),
    ln 2 exactly when chosen and rejected have equal odds.
    """
    c = model.config
    beta = c.flux_beta_orpo if flux_beta is None else flux_beta
    memory, mem_mask = model.encode_context(
        np.asarray([pair.text_ids]), pair.sv[None, :], pair.clap[None, :]
    )
    logp_c, l0_logits, l0_targets = _sequence_logp(model, memory, mem_mask, pair.chosen)
    logp_r, _, _ = _sequence_logp(model, memory, mem_mask, pair.rejected)
    or_term = nm.softplus(-(_log_odds(logp_c) - _log_odds(logp_r)))
    nll = -logp_c
    flux = flux_loss(l0_logits, l0_targets, beta, c.flux_eps) if beta != 0.0 else Tensor(np.zeros(()))
    total = nll + lam * or_term + flux
    return OrpoOutput(
        nll_chosen=nll, or_term=or_term, flux=flux, total=total,
        logp_chosen=float(logp_c.data), logp_rejected=float(logp_r.data),
    )


@dataclass
class FinetuneConfig:
    # Desk-scale default: the pretrained model is near-converged, so the
    # fine-tune step size must be far below the pretraining floor or the
    # preference objective displaces held-out behavior.
    steps: int = 200
    lr: float = 2e-6
    lam: float = 0.25
    batch_pairs: int = 4
    betas: tuple[float, float] = (0.9, 0.995)
    weight_decay: float = 2e-2
    grad_clip: float = 1.0
    seed: int = 0
    flux_beta: float | None = None  # default: model config's orpo weighting


@dataclass
class FinetuneResult:
    log: list[dict] = field(default_factory=list)


def finetune(model: SpeechLM, pairs: list[PreferencePair],
             cfg: FinetuneConfig | None = None) -> FinetuneResult:
    """Preference optimization at reduced, constant learning rate."""
    if not pairs:
        raise ValueError("pairs must be nonempty")
    cfg = cfg or FinetuneConfig()
    opt = AdamW(model.params, betas=cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(derive_seed(cfg.seed, "finetune"))
    result = FinetuneResult()
    for step in range(1, cfg.steps + 1):
        take = min(cfg.batch_pairs, len(pairs))
        idx = rng.choice(len(pairs), size=take, replace=False)
        model.params.zero_grad()
        total = None
        margins, nlls, ors = [], [], []
        for i in idx:
            out = orpo_loss(model, pairs[int(i)], lam=cfg.lam, flux_beta=cfg.flux_beta)
            total = out.total if total is None else total + out.total
            margins.append(out.margin)
            nlls.append(float(out.nll_chosen.data))
            ors.append(float(out.or_term.data))
        loss = total * (1.0 / take)
        loss.backward()
        clip_gradients(model.params, cfg.grad_clip)
        opt.step(cfg.lr)
        result.log.append({
            "step": step,
            "loss": float(loss.data),
            "nll": float(np.mean(nlls)),
            "or_term": float(np.mean(ors)),
            "margin": float(np.mean(margins)),
        })
    return result


def mean_margin(model: SpeechLM, pairs: list[PreferencePair], lam: float = 0.25) -> float:
    """Chosen-vs-rejected log-likelihood margin averaged over pairs."""
    return float(np.mean([orpo_loss(model, p, lam=lam, flux_beta=0.0).margin for p in pairs]))
