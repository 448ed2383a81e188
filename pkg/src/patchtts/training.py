"""Pretraining loop: next-token objective plus flux penalty, AdamW, linear
warmup/decay schedule, CSV metrics log and periodic checkpoints.

The flux term is the anti-repetition penalty on coarse-level logits:

    flux(t) = beta / (eps + CE(logits_t, target_{t-1}))

i.e. confidently re-predicting the previous frame's coarse token is
expensive. It is applied during both pretraining and preference
fine-tuning, with different weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .hashing import derive_seed
from .model import Batch, LossOutput, SpeechLM, save_checkpoint
from .numerics import NonFiniteError, ParamStore, Tensor


@dataclass
class TrainConfig:
    steps: int = 3000
    warmup_steps: int = 100
    lr_start: float = 5e-4
    lr_end: float = 2.5e-5
    betas: tuple[float, float] = (0.9, 0.995)
    weight_decay: float = 2e-2
    batch_size: int = 16
    seed: int = 0
    flux_beta: float = 0.01
    grad_clip: float = 1.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")
        if self.warmup_steps >= self.steps:
            raise ValueError("warmup_steps must be smaller than steps")


# Full-scale schedule from the reference setup, recorded for completeness;
# desk runs scale steps and batch size down but keep betas and decay.
PAPER_TRAIN = TrainConfig(
    steps=2_000_000, warmup_steps=10_000, lr_start=5e-4, lr_end=2.5e-5,
    betas=(0.9, 0.995), weight_decay=2e-2, batch_size=96,
)


def flux_loss(logits_l0: Tensor, targets_l0, beta: float, eps: float) -> Tensor:
    """Mean over t>=1 of beta / (eps + CE(logits[t], targets[t-1])).

    Zero for sequences shorter than 2 (no prior timestep to penalize).
    """
    targets = np.asarray(targets_l0, dtype=int)
    t = targets.shape[0]
    if logits_l0.shape[0] != t:
        raise ValueError("logits and targets must agree in length")
    if t < 2:
        return Tensor(np.zeros(()))
    ce_prev = nm.cross_entropy_rows(logits_l0[1:, :], targets[:-1])
    return nm.mean_(Tensor(np.asarray(beta)) / (ce_prev + eps))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Piecewise-linear schedule: 0 -> lr_start over warmup, then down to
    lr_end at cfg.steps, constant afterwards."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.lr_start
        return cfg.lr_start * step / cfg.warmup_steps
    if step >= cfg.steps:
        return cfg.lr_end
    frac = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.lr_start + frac * (cfg.lr_end - cfg.lr_start)


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied directly to the parameter, scaled by lr, independent
    of the adaptive moment path, and skipped for parameters flagged
    decay=False in the store (biases, norm gains).
    """

    def __init__(self, params: ParamStore, betas=(0.9, 0.995), weight_decay=2e-2, eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * update
            if self.weight_decay and self.params.decay_enabled(name):
                p.data = p.data - lr * self.weight_decay * p.data


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    sq = 0.0
    for _, p in params.items():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    aborted: bool = False
    last_checkpoint: str | None = None


def iterate_batches(n_items: int, batch_size: int, steps: int, seed: int):
    """Deterministic epoch-shuffled index batches, `steps` of them."""
    rng = np.random.default_rng(derive_seed(seed, "batches"))
    produced = 0
    while produced < steps:
        order = rng.permutation(n_items)
        for lo in range(0, n_items, batch_size):
            if produced >= steps:
                return
            idx = order[lo : lo + batch_size]
            if idx.size == 0:
                break
            yield idx
            produced += 1


def train(
    batches: list[Batch] | None,
    cfg: TrainConfig,
    model: SpeechLM,
    make_batch=None,
    n_items: int | None = None,
    checkpoint_path=None,
) -> TrainResult:
    """Run the optimization loop.

    Either pass a fixed list of `batches` (cycled deterministically) or a
    `make_batch(indices) -> Batch` callable with `n_items`. On a non-finite
    loss the loop aborts, keeping the last written checkpoint.
    """
    if batches is None and (make_batch is None or n_items is None):
        raise ValueError("provide batches or (make_batch, n_items)")
    opt = AdamW(model.params, betas=cfg.betas, weight_decay=cfg.weight_decay)
    result = TrainResult()

    if batches is not None:
        n = len(batches)
        index_iter = iterate_batches(n, 1, cfg.steps, cfg.seed)
        get_batch = lambda idx: batches[int(idx[0])]
    else:
        index_iter = iterate_batches(n_items, cfg.batch_size, cfg.steps, cfg.seed)
        get_batch = make_batch

    step = 0
    for idx in index_iter:
        step += 1
        lr = lr_at(step, cfg)
        batch = get_batch(idx)
        model.params.zero_grad()
        try:
            out: LossOutput = model.forward_loss(batch, flux_beta=cfg.flux_beta)
            total = float(out.total.data)
            if not np.isfinite(total):
                raise NonFiniteError("non-finite training loss")
            out.total.backward()
        except NonFiniteError:
            result.aborted = True
            break
        clip_gradients(model.params, cfg.grad_clip)
        opt.step(lr)
        result.log.append(
            {
                "step": step,
                "lr": lr,
                "ce": float(out.ce.data),
                "flux": float(out.flux.data),
                "total": total,
            }
        )
        if checkpoint_path is not None and step % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model)
            result.last_checkpoint = str(checkpoint_path)
    if not result.aborted and checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
        result.last_checkpoint = str(checkpoint_path)
    return result


def write_log_csv(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "lr", "ce", "flux", "total"])
        for row in log:
            writer.writerow([row["step"], repr(row["lr"]), repr(row["ce"]),
                             repr(row["flux"]), repr(row["total"])])
