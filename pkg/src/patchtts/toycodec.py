"""Deterministic synthetic stand-in for a hierarchical acoustic codec.

Maps (text, speaker, style, fidelity) to three aligned token streams at
rate ratio 1:2:4 (one coarse L0 token per character, two L1, four L2).
Because the character-to-L0 map is an injective per-speaker permutation,
transcription is exact inversion, which gives the evaluation stack an
oracle transcriber and an oracle speaker verifier instead of pretrained
models.

Derivation scheme (fixed; golden files depend on it):
    l0[i]        = pi0[char_index(text[i])]
    l1[2i + j]   = mix(L1_SALT, l0[i], j, style_offset) mod V1, j in {0, 1}
    l2[4i + j]   = mix(L2_SALT, l0[i], j, style_offset) mod V2, j in {0..3}
with `mix` the splitmix finalizer from `hashing`. Low fidelity zeroes all
L2 tokens; the "whisper" style always forces low fidelity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .hashing import mix

ALPHABET = "abcdefghijklmnopqrstuvwxyz "
GARBAGE_CHAR = "?"
STYLES = ("regular", "loud", "whisper", "fast", "sad")
FIDELITIES = ("low", "high")

V0 = 64
V1 = 32
V2 = 32
PATCH_SIZE = 7
# Per-position vocab bounds of a flattened patch [L0, L1a, L1b, L2a..L2d].
PATCH_VOCABS = (V0, V1, V1, V2, V2, V2, V2)

SV_DIM = 32
CLAP_DIM = 32

_TABLE_SALT = 0x517EAB
_STYLE_SALT = 0x57E1E
_L1_SALT = 0x11AA
_L2_SALT = 0x22BB
_SV_SALT = 0x5BED
_CLAP_SALT = 0xC1A9
_STREAM_SALT = 0x57AE


@dataclass
class CodebookStream:
    """Three aligned token streams; len(l1) == 2*len(l0), len(l2) == 4*len(l0)."""

    l0: list[int]
    l1: list[int]
    l2: list[int]

    def __post_init__(self):
        if len(self.l1) != 2 * len(self.l0) or len(self.l2) != 4 * len(self.l0):
            raise ValueError("stream lengths must follow the 1:2:4 rate ratio")

    @property
    def frames(self) -> int:
        return len(self.l0)


@dataclass(frozen=True)
class SpeakerRef:
    """Unit-norm speaker and style embeddings consumed by the encoder."""

    sv_embed: np.ndarray
    clap_embed: np.ndarray


class SpeakerTable:
    """Per-speaker codeword scheme: injective char->L0 map plus style offsets."""

    def __init__(self, seed: int, speaker_id: int):
        self.seed = seed
        self.speaker_id = speaker_id
        rng = np.random.default_rng(mix(_TABLE_SALT, seed, speaker_id))
        self.pi0 = rng.permutation(V0)[: len(ALPHABET)].astype(int)
        self._inverse = {int(tok): ch for tok, ch in zip(self.pi0, ALPHABET)}
        self.style_offsets = {
            style: mix(_STYLE_SALT, seed, speaker_id, k) % (1 << 20)
            for k, style in enumerate(STYLES)
        }
        self._codewords: frozenset[tuple[int, ...]] | None = None

    def char_token(self, ch: str) -> int:
        idx = ALPHABET.find(ch)
        if idx < 0:
            raise ValueError(f"character {ch!r} not in the codec alphabet")
        return int(self.pi0[idx])

    def token_char(self, tok: int) -> str:
        return self._inverse.get(int(tok), GARBAGE_CHAR)

    def codewords(self) -> frozenset[tuple[int, ...]]:
        """All 7-token patches this speaker can emit, any style/fidelity."""
        if self._codewords is None:
            words = set()
            for ch in ALPHABET:
                for style in STYLES:
                    for fidelity in FIDELITIES:
                        s = encode(ch, self, style, fidelity)
                        words.add(tuple(flatten(s)[0]))
            self._codewords = frozenset(words)
        return self._codewords


def _derive(salt: int, l0_token: int, j: int, offset: int, vocab: int) -> int:
    return mix(salt, l0_token, j, offset) % vocab


def encode(text: str, speaker: SpeakerTable, style: str, fidelity: str) -> CodebookStream:
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    if fidelity not in FIDELITIES:
        raise ValueError(f"unknown fidelity {fidelity!r}")
    if style == "whisper":
        fidelity = "low"
    off = speaker.style_offsets[style]
    l0, l1, l2 = [], [], []
    for ch in text:
        tok = speaker.char_token(ch)
        l0.append(tok)
        for j in range(2):
            l1.append(_derive(_L1_SALT, tok, j, off, V1))
        for j in range(4):
            l2.append(0 if fidelity == "low" else _derive(_L2_SALT, tok, j, off, V2))
    return CodebookStream(l0, l1, l2)


def flatten(stream: CodebookStream) -> list[list[int]]:
    """One 7-token patch per frame, ordered [L0, L1a, L1b, L2a, L2b, L2c, L2d]."""
    _validate_stream(stream)
    patches = []
    for i in range(stream.frames):
        patches.append(
            [stream.l0[i]]
            + stream.l1[2 * i : 2 * i + 2]
            + stream.l2[4 * i : 4 * i + 4]
        )
    return patches


def unflatten(patches: list[list[int]]) -> CodebookStream:
    l0, l1, l2 = [], [], []
    for p in patches:
        if len(p) != PATCH_SIZE:
            raise ValueError(f"patch must have exactly {PATCH_SIZE} tokens")
        for tok, vocab in zip(p, PATCH_VOCABS):
            if not 0 <= tok < vocab:
                raise ValueError(f"token {tok} out of range for vocab {vocab}")
        l0.append(p[0])
        l1.extend(p[1:3])
        l2.extend(p[3:7])
    return CodebookStream(l0, l1, l2)


def _validate_stream(stream: CodebookStream) -> None:
    for seq, vocab in ((stream.l0, V0), (stream.l1, V1), (stream.l2, V2)):
        for tok in seq:
            if not 0 <= tok < vocab:
                raise ValueError(f"token {tok} out of range for vocab {vocab}")


def transcribe(stream: CodebookStream, speaker: SpeakerTable) -> str:
    """Exact inverse of encode on L0; unknown tokens decode to '?'."""
    return "".join(speaker.token_char(tok) for tok in stream.l0)


def speaker_score(stream: CodebookStream, speaker: SpeakerTable) -> float:
    """Fraction of frames whose patch is a codeword of this speaker."""
    patches = flatten_lenient(stream)
    if not patches:
        return 0.0
    words = speaker.codewords()
    hits = sum(1 for p in patches if tuple(p) in words)
    return hits / len(patches)


def flatten_lenient(stream: CodebookStream) -> list[list[int]]:
    # Scoring must accept arbitrary generated tokens, not just valid ones.
    return [
        [stream.l0[i]]
        + stream.l1[2 * i : 2 * i + 2]
        + stream.l2[4 * i : 4 * i + 4]
        for i in range(stream.frames)
    ]


def _unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@lru_cache(maxsize=4096)
def _embed_cached(speaker_id: int, style: str) -> SpeakerRef:
    sv = _unit_vector(np.random.default_rng(mix(_SV_SALT, speaker_id)), SV_DIM)
    clap_seed = mix(_CLAP_SALT, speaker_id, STYLES.index(style))
    clap = _unit_vector(np.random.default_rng(clap_seed), CLAP_DIM)
    return SpeakerRef(sv, clap)


def speaker_embed(speaker_id: int, style: str) -> SpeakerRef:
    """Deterministic unit vectors: sv depends on speaker only, clap on style too."""
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    return _embed_cached(int(speaker_id), style)


def embed_stream(stream: CodebookStream) -> SpeakerRef:
    """Content-derived embeddings for a raw token stream.

    Used when a generated stream serves as the cloning reference (the
    cyclic fine-tuning setup): each patch hashes to a unit vector and the
    embeddings are the normalized means. Deterministic in the tokens.
    """
    patches = flatten_lenient(stream)
    if not patches:
        rng = np.random.default_rng(mix(_STREAM_SALT, 0))
        return SpeakerRef(_unit_vector(rng, SV_DIM), _unit_vector(rng, CLAP_DIM))
    sv_acc = np.zeros(SV_DIM)
    clap_acc = np.zeros(CLAP_DIM)
    for p in patches:
        h = mix(_STREAM_SALT, *p)
        rng = np.random.default_rng(h)
        sv_acc += _unit_vector(rng, SV_DIM)
        clap_acc += _unit_vector(rng, CLAP_DIM)
    sv_norm = np.linalg.norm(sv_acc)
    clap_norm = np.linalg.norm(clap_acc)
    if sv_norm < 1e-12 or clap_norm < 1e-12:
        rng = np.random.default_rng(mix(_STREAM_SALT, 1))
        return SpeakerRef(_unit_vector(rng, SV_DIM), _unit_vector(rng, CLAP_DIM))
    return SpeakerRef(sv_acc / sv_norm, clap_acc / clap_norm)
