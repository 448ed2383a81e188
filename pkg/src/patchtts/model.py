"""Three-transformer speech language model over hierarchical codec patches.

A non-causal encoder reads [speaker vec, style vec, quality tag + text
tokens] and produces a memory. A causal global decoder consumes one
patch-embedded vector per coarse frame (with cross-attention into the
memory) and emits one latent per frame position, shifted by one: the
latent at slot t conditions frame t, with a learned begin-of-audio vector
in front. A small causal local decoder expands each frame latent to the
frame's 7 codec tokens (1x coarse, 2x mid, 4x fine), one head per patch
position. End-of-sequence is a reserved extra index in the coarse head.

All blocks are pre-norm with Mish feed-forwards. The encoder and global
decoder use sinusoidal positions; the local decoder runs on a fixed
length of 7 and uses learned positions.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .hashing import derive_seed
from .numerics import ParamStore, Tensor

CKPT_MAGIC = b"PTCK"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_global: int = 2
    n_layers_local: int = 2
    d_ff: int = 256
    v0: int = 64
    v1: int = 32
    v2: int = 32
    text_vocab: int = 512
    patch_size: int = 7
    max_frames: int = 64
    max_text_len: int = 64
    d_sv: int = 32
    d_clap: int = 32
    flux_beta_pretrain: float = 0.01
    flux_beta_orpo: float = 0.1
    flux_eps: float = 1e-3

    def __post_init__(self):
        if self.patch_size != 7:
            raise ValueError("patch_size is fixed at 7 (1 L0 + 2 L1 + 4 L2)")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def eos_token(self) -> int:
        return self.v0

    @property
    def head_widths(self) -> tuple[int, ...]:
        return (self.v0 + 1, self.v1, self.v1, self.v2, self.v2, self.v2, self.v2)

    @property
    def patch_vocabs(self) -> tuple[int, ...]:
        # Input-side tables include the EOS row so lookups never go out of range.
        return (self.v0 + 1, self.v1, self.v1, self.v2, self.v2, self.v2, self.v2)

    @property
    def d_patch_sub(self) -> int:
        return max(1, self.d_model // 8)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Full-scale preset: 8-layer 512-dim stacks, 4-layer local decoder.

        Head count and feed-forward width are not pinned by the reference
        setup; 8 heads and 4x width are the assumed defaults here.
        """
        base = dict(
            d_model=512,
            n_heads=8,
            n_layers_enc=8,
            n_layers_global=8,
            n_layers_local=4,
            d_ff=2048,
            max_frames=1024,
            max_text_len=512,
        )
        base.update(overrides)
        return cls(**base)


PRESETS = {"desk": ModelConfig.desk, "paper": ModelConfig.paper}


@dataclass
class Batch:
    """Padded training batch; masks are implied by lengths."""

    text_ids: np.ndarray  # (B, S) int, PAD-padded
    text_mask: np.ndarray  # (B, S) float, 1 for real tokens
    sv: np.ndarray  # (B, d_sv)
    clap: np.ndarray  # (B, d_clap)
    patches: np.ndarray  # (B, F, 7) int, zero-padded
    n_frames: np.ndarray  # (B,) int

    @property
    def size(self) -> int:
        return self.text_ids.shape[0]


@dataclass
class LossOutput:
    ce: Tensor
    flux: Tensor
    total: Tensor
    n_predictions: int


def _init_normal(rng: np.random.Generator, shape, scale: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, scale, size=shape)


class SpeechLM:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = ParamStore()
        self._build(np.random.default_rng(derive_seed(seed, "init")))

    # -- construction ------------------------------------------------------

    def _add_linear(self, rng, name: str, d_in: int, d_out: int) -> None:
        self.params.add(f"{name}.w", _init_normal(rng, (d_in, d_out)))
        self.params.add(f"{name}.b", np.zeros(d_out), decay=False)

    def _add_norm(self, rng, name: str) -> None:
        d = self.config.d_model
        self.params.add(f"{name}.g", np.ones(d), decay=False)
        self.params.add(f"{name}.b", np.zeros(d), decay=False)

    def _add_attention(self, rng, name: str) -> None:
        d = self.config.d_model
        for part in ("wq", "wk", "wv", "wo"):
            self.params.add(f"{name}.{part}", _init_normal(rng, (d, d)))
        for part in ("bq", "bk", "bv", "bo"):
            self.params.add(f"{name}.{part}", np.zeros(d), decay=False)

    def _add_ff(self, rng, name: str) -> None:
        c = self.config
        self.params.add(f"{name}.w1", _init_normal(rng, (c.d_model, c.d_ff)))
        self.params.add(f"{name}.b1", np.zeros(c.d_ff), decay=False)
        self.params.add(f"{name}.w2", _init_normal(rng, (c.d_ff, c.d_model)))
        self.params.add(f"{name}.b2", np.zeros(c.d_model), decay=False)

    def _build(self, rng: np.random.Generator) -> None:
        c = self.config
        self.params.add("enc.text_emb", _init_normal(rng, (c.text_vocab, c.d_model)))
        self._add_linear(rng, "enc.sv_proj", c.d_sv, c.d_model)
        self._add_linear(rng, "enc.clap_proj", c.d_clap, c.d_model)
        for i in range(c.n_layers_enc):
            self._add_norm(rng, f"enc.l{i}.ln1")
            self._add_attention(rng, f"enc.l{i}.sa")
            self._add_norm(rng, f"enc.l{i}.ln2")
            self._add_ff(rng, f"enc.l{i}.ff")
        self._add_norm(rng, "enc.ln_f")

        self.params.add("glob.boa", _init_normal(rng, (c.d_model,)))
        for j, vocab in enumerate(c.patch_vocabs):
            self.params.add(f"glob.patch_emb.t{j}", _init_normal(rng, (vocab, c.d_patch_sub)))
        self._add_linear(rng, "glob.patch_emb.merge", 7 * c.d_patch_sub, c.d_model)
        for i in range(c.n_layers_global):
            self._add_norm(rng, f"glob.l{i}.ln1")
            self._add_attention(rng, f"glob.l{i}.sa")
            self._add_norm(rng, f"glob.l{i}.ln2")
            self._add_attention(rng, f"glob.l{i}.xa")
            self._add_norm(rng, f"glob.l{i}.ln3")
            self._add_ff(rng, f"glob.l{i}.ff")
        self._add_norm(rng, "glob.ln_f")

        self.params.add("loc.pos", _init_normal(rng, (7, c.d_model)))
        for j, vocab in enumerate(c.patch_vocabs[:6]):
            self.params.add(f"loc.in_emb.t{j}", _init_normal(rng, (vocab, c.d_model)))
        for i in range(c.n_layers_local):
            self._add_norm(rng, f"loc.l{i}.ln1")
            self._add_attention(rng, f"loc.l{i}.sa")
            self._add_norm(rng, f"loc.l{i}.ln2")
            self._add_ff(rng, f"loc.l{i}.ff")
        self._add_norm(rng, "loc.ln_f")
        for j, width in enumerate(c.head_widths):
            self._add_linear(rng, f"loc.head{j}", c.d_model, width)

    # -- blocks -------------------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return nm.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return nm.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attend(self, x: Tensor, name: str, mask: np.ndarray, memory: Tensor | None = None) -> Tensor:
        p = self.params
        h = self.config.n_heads
        kv = memory if memory is not None else x
        q = nm.matmul(x, p[f"{name}.wq"]) + p[f"{name}.bq"]
        k = nm.matmul(kv, p[f"{name}.wk"]) + p[f"{name}.bk"]
        v = nm.matmul(kv, p[f"{name}.wv"]) + p[f"{name}.bv"]
        b, t, d = q.shape
        s = k.shape[1]
        dh = d // h
        qh = q.reshape(b, t, h, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(b, s, h, dh).transpose(0, 2, 3, 1)
        vh = v.reshape(b, s, h, dh).transpose(0, 2, 1, 3)
        scores = nm.matmul(qh, kh) * (1.0 / math.sqrt(dh))
        scores = scores + Tensor(mask)
        ctx = nm.matmul(nm.softmax(scores, axis=-1), vh)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
        return nm.matmul(ctx, p[f"{name}.wo"]) + p[f"{name}.bo"]

    def _ff(self, x: Tensor, name: str) -> Tensor:
        h = nm.mish(nm.matmul(x, self.params[f"{name}.w1"]) + self.params[f"{name}.b1"])
        return nm.matmul(h, self.params[f"{name}.w2"]) + self.params[f"{name}.b2"]

    @staticmethod
    def _causal_mask(t: int) -> np.ndarray:
        m = np.zeros((1, 1, t, t), dtype=nm.get_default_dtype())
        m[:, :, np.triu_indices(t, k=1)[0], np.triu_indices(t, k=1)[1]] = nm.MASK_VALUE
        return m

    @staticmethod
    def _key_mask(valid: np.ndarray) -> np.ndarray:
        # valid: (B, S) floats in {0, 1} -> additive (B, 1, 1, S)
        m = (1.0 - valid.astype(nm.get_default_dtype())) * nm.MASK_VALUE
        return m[:, None, None, :]

    # -- forward pieces -------------------------------------------------------

    def encode_context(self, text_ids: np.ndarray, sv: np.ndarray, clap: np.ndarray,
                       text_mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """Encoder memory over [speaker vec, style vec] ++ text embeddings.

        Returns (memory of length 2 + text length, additive key mask).
        """
        text_ids = np.atleast_2d(np.asarray(text_ids))
        b, s = text_ids.shape
        if s == 0:
            raise ValueError("text_ids must be nonempty")
        if s > self.config.max_text_len:
            raise ValueError(f"text length {s} exceeds max_text_len {self.config.max_text_len}")
        if text_mask is None:
            text_mask = np.ones((b, s))
        emb = nm.gather(self.params["enc.text_emb"], text_ids)
        sv_t = self._linear(Tensor(np.atleast_2d(sv)), "enc.sv_proj").reshape(b, 1, self.config.d_model)
        clap_t = self._linear(Tensor(np.atleast_2d(clap)), "enc.clap_proj").reshape(b, 1, self.config.d_model)
        x = nm.concat([sv_t, clap_t, emb], axis=1)
        x = x + nm.sinusoidal_pe(s + 2, self.config.d_model)
        valid = np.concatenate([np.ones((b, 2)), text_mask], axis=1)
        mask = self._key_mask(valid)
        for i in range(self.config.n_layers_enc):
            x = x + self._attend(self._norm(x, f"enc.l{i}.ln1"), f"enc.l{i}.sa", mask)
            x = x + self._ff(self._norm(x, f"enc.l{i}.ln2"), f"enc.l{i}.ff")
        return self._norm(x, "enc.ln_f"), mask

    def _patch_embed(self, patches: np.ndarray) -> Tensor:
        parts = [
            nm.gather(self.params[f"glob.patch_emb.t{j}"], patches[:, :, j])
            for j in range(7)
        ]
        return self._linear(nm.concat(parts, axis=-1), "glob.patch_emb.merge")

    def frame_latents(self, memory: Tensor, mem_mask: np.ndarray, patches: np.ndarray) -> Tensor:
        """Global decoder: patches for frames 0..F-1 -> latents for slots 0..F.

        The slot-t latent conditions frame t; slot 0 comes from the learned
        begin-of-audio vector, so F input frames yield F+1 latents.
        """
        b = memory.shape[0]
        c = self.config
        patches = np.asarray(patches, dtype=int).reshape(b, -1, 7)
        f = patches.shape[1]
        if f > c.max_frames:
            raise ValueError(f"frame count {f} exceeds max_frames {c.max_frames}")
        boa = self.params["glob.boa"].reshape(1, 1, c.d_model) + Tensor(np.zeros((b, 1, c.d_model)))
        if f > 0:
            x = nm.concat([boa, self._patch_embed(patches)], axis=1)
        else:
            x = boa
        x = x + nm.sinusoidal_pe(f + 1, c.d_model)
        causal = self._causal_mask(f + 1)
        for i in range(c.n_layers_global):
            x = x + self._attend(self._norm(x, f"glob.l{i}.ln1"), f"glob.l{i}.sa", causal)
            x = x + self._attend(self._norm(x, f"glob.l{i}.ln2"), f"glob.l{i}.xa", mem_mask, memory=memory)
            x = x + self._ff(self._norm(x, f"glob.l{i}.ln3"), f"glob.l{i}.ff")
        return self._norm(x, "glob.ln_f")

    def local_logits(self, latents: Tensor, teacher: np.ndarray) -> list[Tensor]:
        """Teacher-forced local decoder over one patch per latent row.

        latents: (N, d_model); teacher: (N, 6) tokens for patch positions
        0..5 (they feed input slots 1..6). Returns 7 logit tensors, one per
        patch position; row j only sees the latent and teacher tokens < j.
        """
        c = self.config
        n = latents.shape[0]
        teacher = np.asarray(teacher, dtype=int).reshape(n, 6)
        parts = [latents.reshape(n, 1, c.d_model)]
        for j in range(6):
            e = nm.gather(self.params[f"loc.in_emb.t{j}"], teacher[:, j])
            parts.append(e.reshape(n, 1, c.d_model))
        x = nm.concat(parts, axis=1) + self.params["loc.pos"]
        causal = self._causal_mask(7)
        for i in range(c.n_layers_local):
            x = x + self._attend(self._norm(x, f"loc.l{i}.ln1"), f"loc.l{i}.sa", causal)
            x = x + self._ff(self._norm(x, f"loc.l{i}.ln2"), f"loc.l{i}.ff")
        x = self._norm(x, "loc.ln_f")
        return [self._linear(x[:, j, :], f"loc.head{j}") for j in range(7)]

    # -- training loss ---------------------------------------------------------

    def forward_loss(self, batch: Batch, flux_beta: float | None = None) -> LossOutput:
        """Next-token CE over all 7*T+1 predictions per utterance plus the
        repetition (flux) penalty on coarse-level logits."""
        if batch.size == 0:
            raise ValueError("batch must be nonempty")
        c = self.config
        beta = c.flux_beta_pretrain if flux_beta is None else flux_beta
        b, f = batch.patches.shape[0], batch.patches.shape[1]
        n_slots = f + 1
        memory, mem_mask = self.encode_context(batch.text_ids, batch.sv, batch.clap, batch.text_mask)
        latents = self.frame_latents(memory, mem_mask, batch.patches)
        lat_flat = latents.reshape(b * n_slots, c.d_model)

        teacher = np.zeros((b, n_slots, 6), dtype=int)
        teacher[:, :f, :] = batch.patches[:, :, :6]
        logits = self.local_logits(lat_flat, teacher.reshape(-1, 6))

        slots = np.arange(n_slots)[None, :]
        lengths = batch.n_frames[:, None]
        targets = np.zeros((7, b, n_slots), dtype=int)
        masks = np.zeros((7, b, n_slots))
        for j in range(7):
            targets[j, :, :f] = batch.patches[:, :, j]
            masks[j] = (slots < lengths).astype(float)
        # EOS is supervised exactly once, on the slot after the last frame.
        targets[0][np.arange(b), batch.n_frames] = c.eos_token
        masks[0] = (slots <= lengths).astype(float)

        ce_sum = None
        denom = 0.0
        for j in range(7):
            rows = nm.cross_entropy_rows(logits[j], targets[j].reshape(-1))
            s = nm.sum_(rows * Tensor(masks[j].reshape(-1)))
            ce_sum = s if ce_sum is None else ce_sum + s
            denom += float(masks[j].sum())
        ce = ce_sum * (1.0 / denom)

        if beta != 0.0:
            prev = np.zeros((b, n_slots), dtype=int)
            prev[:, 1:] = targets[0][:, :-1]
            flux_mask = ((slots >= 1) & (slots <= lengths)).astype(float).reshape(-1)
            ce_prev = nm.cross_entropy_rows(logits[0], prev.reshape(-1))
            flux_rows = Tensor(np.asarray(beta)) / (ce_prev + c.flux_eps)
            flux = nm.masked_mean(flux_rows, flux_mask)
        else:
            flux = Tensor(np.zeros(()))
        return LossOutput(ce=ce, flux=flux, total=ce + flux, n_predictions=int(denom))

    # -- inference-side single steps --------------------------------------------

    def next_frame_latent(self, memory: Tensor, mem_mask: np.ndarray, patches: list[list[int]]) -> np.ndarray:
        arr = np.asarray(patches, dtype=int).reshape(1, len(patches), 7)
        latents = self.frame_latents(memory, mem_mask, arr)
        return latents.data[0, -1]

    def local_step(self, latent: np.ndarray, prefix: list[int]) -> np.ndarray:
        """Logits for patch position len(prefix), given sampled tokens so far."""
        j = len(prefix)
        if not 0 <= j < 7:
            raise ValueError("prefix must hold between 0 and 6 tokens")
        teacher = np.zeros((1, 6), dtype=int)
        teacher[0, :j] = prefix
        logits = self.local_logits(Tensor(latent.reshape(1, -1)), teacher)
        return logits[j].data[0]


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, model: SpeechLM) -> None:
    """Versioned header (magic, version, config JSON) + float32 LE blobs in
    ParamStore order; bitwise reproducible for a fixed seed."""
    manifest = {
        "config": asdict(model.config),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in model.params.items()],
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
    buf.write(header)
    for _, t in model.params.items():
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> SpeechLM:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    model = SpeechLM(ModelConfig(**manifest["config"]), seed=0)
    offset = 16 + header_len
    for entry in manifest["params"]:
        t = model.params[entry["name"]]
        shape = tuple(entry["shape"])
        if t.shape != shape:
            raise ValueError(f"shape mismatch for {entry['name']}")
        count = int(np.prod(shape)) if shape else 1
        blob = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        t.data = blob.reshape(shape).astype(nm.get_default_dtype())
        offset += 4 * count
    return model
