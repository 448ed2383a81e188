"""Autoregressive synthesis: nucleus sampling, repetition-aware sampling
on the coarse position, quality prefixing, top-p backoff, and shallow or
deep cloning from a reference."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .hashing import derive_seed
from .textbpe import BpeVocab, TAG_48K
from .toycodec import CodebookStream, SpeakerRef, unflatten

BACKOFF_LEVELS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class SampleConfig:
    top_p: float = 0.2
    top_p_increment: float = 0.2
    top_p_max: float = 1.0
    ras_window: int = 10  # K
    ras_threshold: float = 0.09  # t_r
    temperature: float = 1.0
    max_frames: int = 64
    min_length_ratio: float = 0.5
    seed: int = 0
    use_ras: bool = True
    greedy: bool = False

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.ras_window < 1 or not 0.0 <= self.ras_threshold:
            raise ValueError("invalid RAS parameters")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def nucleus_sample(logits: np.ndarray, top_p: float, rng: np.random.Generator,
                   temperature: float = 1.0) -> int:
    """Sample from the smallest probability prefix with mass >= top_p."""
    probs = _softmax(np.asarray(logits, dtype=np.float64) / temperature)
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    keep = int(np.searchsorted(csum, top_p, side="left")) + 1
    keep = min(keep, len(order))
    kept = probs[order[:keep]]
    kept = kept / kept.sum()
    u = rng.random()
    pick = int(np.searchsorted(np.cumsum(kept), u, side="right"))
    pick = min(pick, keep - 1)
    return int(order[pick])


def ras_sample(logits: np.ndarray, history_l0: list[int], cfg: SampleConfig,
               rng: np.random.Generator, eos_token: int | None = None) -> int:
    """Repetition-aware sampling for coarse-position logits.

    Take a nucleus sample; if its frequency in the last K emitted tokens
    exceeds t_r, replace it with a draw from the full distribution. A
    nucleus-picked EOS always stands so the sampler can never be forced
    past a legitimate stop.
    """
    v = nucleus_sample(logits, cfg.top_p, rng, cfg.temperature)
    if eos_token is not None and v == eos_token:
        return v
    window = history_l0[-cfg.ras_window:]
    r = window.count(v) / cfg.ras_window
    if r > cfg.ras_threshold:
        v = nucleus_sample(logits, 1.0, rng, cfg.temperature)
    return v


@dataclass
class SynthResult:
    patches: list[list[int]]
    stream: CodebookStream
    frames: int
    truncated: bool
    used_top_p: float
    attempted_top_p: list[float] = field(default_factory=list)


def synthesize(
    model,
    vocab: BpeVocab,
    text: str,
    speaker_ref: SpeakerRef,
    cfg: SampleConfig,
    mode: str = "shallow",
    deep_prefix: tuple[list[int], list[list[int]]] | None = None,
    quality_tag: str | None = TAG_48K,
    _attempt: int = 0,
) -> SynthResult:
    """Generate the token stream for `text` cloned from `speaker_ref`.

    Shallow clone conditions on the speaker embeddings only. Deep clone
    additionally prefixes the encoder with the reference transcript ids
    and the global decoder with the reference patches; the returned
    sequence excludes the prompt.
    """
    if mode not in ("shallow", "deep"):
        raise ValueError(f"unknown clone mode {mode!r}")
    if mode == "deep" and deep_prefix is None:
        raise ValueError("deep clone requires (ref_text_ids, ref_patches)")
    eos = model.config.eos_token

    target_ids = vocab.encode(text)
    if mode == "deep":
        ref_ids, prompt_patches = deep_prefix
        prompt_patches = [list(p) for p in prompt_patches]
        text_ids = list(ref_ids) + target_ids
    else:
        prompt_patches = []
        text_ids = target_ids
    if quality_tag is not None:
        text_ids = [vocab.id_of[quality_tag]] + text_ids
    if not text_ids:
        text_ids = [vocab.id_of[TAG_48K]]

    memory, mem_mask = model.encode_context(
        np.asarray([text_ids]), speaker_ref.sv_embed[None, :], speaker_ref.clap_embed[None, :]
    )
    rng = np.random.default_rng(derive_seed(cfg.seed, f"sampling:attempt{_attempt}"))
    patches = list(prompt_patches)
    history: list[int] = []
    truncated = True
    for _ in range(cfg.max_frames):
        latent = model.next_frame_latent(memory, mem_mask, patches)
        frame: list[int] = []
        stopped = False
        for j in range(7):
            logits = model.local_step(latent, frame)
            if cfg.greedy:
                tok = int(np.argmax(logits))
            elif j == 0 and cfg.use_ras:
                tok = ras_sample(logits, history, cfg, rng, eos_token=eos)
            else:
                tok = nucleus_sample(logits, cfg.top_p, rng, cfg.temperature)
            if j == 0 and tok == eos:
                stopped = True
                break
            frame.append(tok)
        if stopped:
            truncated = False
            break
        patches.append(frame)
        history.append(frame[0])
    generated = patches[len(prompt_patches):]
    return SynthResult(
        patches=generated,
        stream=unflatten(generated),
        frames=len(generated),
        truncated=truncated,
        used_top_p=0.0 if cfg.greedy else cfg.top_p,
    )


def expected_frames(text: str) -> int:
    # The toy codec emits exactly one coarse frame per character.
    return len(text)


def synthesize_with_backoff(model, vocab, text, speaker_ref, cfg: SampleConfig,
                            mode: str = "shallow", deep_prefix=None,
                            quality_tag: str | None = TAG_48K) -> SynthResult:
    """Retry generation at increasing top-p when the output is
    unrealistically short; return the first acceptable attempt, else the
    longest one. The RNG is re-seeded deterministically per attempt."""
    min_frames = cfg.min_length_ratio * expected_frames(text)
    attempted: list[float] = []
    best: SynthResult | None = None
    top_p = cfg.top_p
    attempt = 0
    while True:
        attempt_cfg = replace(cfg, top_p=top_p)
        result = synthesize(model, vocab, text, speaker_ref, attempt_cfg,
                            mode=mode, deep_prefix=deep_prefix,
                            quality_tag=quality_tag, _attempt=attempt)
        attempted.append(top_p)
        result.attempted_top_p = list(attempted)
        if result.frames >= min_frames:
            return result
        if best is None or result.frames > best.frames:
            best = result
        if top_p >= cfg.top_p_max:
            best.attempted_top_p = list(attempted)
            return best
        top_p = min(round(top_p + cfg.top_p_increment, 10), cfg.top_p_max)
        attempt += 1
