"""Toy corpus generation and dataset plumbing.

Utterances are short word sequences over a seeded lexicon, spoken by a
handful of synthetic speakers in five styles and two fidelities. Styles
and fidelities are balanced round-robin; every block of 10 utterances
donates one to the held-out split, at an offset that rotates per block so
the held-out set covers all styles and both fidelities.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import toycodec as tc
from .hashing import derive_seed
from .model import Batch
from .textbpe import BpeVocab, TAG_16K, TAG_48K

FIDELITY_TAG = {"low": TAG_16K, "high": TAG_48K}


@dataclass
class DataConfig:
    seed: int = 0
    n_speakers: int = 2
    n_utts: int = 500
    lexicon_size: int = 12
    word_len_min: int = 2
    word_len_max: int = 4
    words_min: int = 1
    words_max: int = 2


@dataclass
class Utterance:
    utt_id: str
    seed: int  # speaker-table seed; eval rebuilds tables from it
    speaker_id: int
    style: str
    fidelity: str
    text: str
    l0: list[int]
    l1: list[int]
    l2: list[int]
    split: str

    @property
    def stream(self) -> tc.CodebookStream:
        return tc.CodebookStream(self.l0, self.l1, self.l2)

    @property
    def patches(self) -> list[list[int]]:
        return tc.flatten(self.stream)

    def to_json(self) -> str:
        d = asdict(self)
        d["transcript"] = self.text
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Utterance":
        d = json.loads(line)
        d.pop("transcript", None)
        return cls(**d)


def make_lexicon(cfg: DataConfig) -> list[str]:
    """Distinct random words without adjacent double letters.

    Immediate repeats are reserved for the repetition penalty: banning
    them from the lexicon keeps the flux term orthogonal to legitimate
    content on this corpus.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, "lexicon"))
    letters = tc.ALPHABET.strip()
    words: list[str] = []
    seen = set()
    while len(words) < cfg.lexicon_size:
        n = int(rng.integers(cfg.word_len_min, cfg.word_len_max + 1))
        w = "".join(letters[i] for i in rng.integers(0, len(letters), n))
        if w in seen or any(a == b for a, b in zip(w, w[1:])):
            continue
        seen.add(w)
        words.append(w)
    return words


def gen_corpus(cfg: DataConfig) -> list[Utterance]:
    lexicon = make_lexicon(cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, "data"))
    tables = {sid: tc.SpeakerTable(cfg.seed, sid) for sid in range(cfg.n_speakers)}
    utts = []
    for i in range(cfg.n_utts):
        style = tc.STYLES[i % len(tc.STYLES)]
        fidelity = tc.FIDELITIES[i % 2]
        speaker = int(rng.integers(cfg.n_speakers))
        n_words = int(rng.integers(cfg.words_min, cfg.words_max + 1))
        text = " ".join(lexicon[int(rng.integers(len(lexicon)))] for _ in range(n_words))
        stream = tc.encode(text, tables[speaker], style, fidelity)
        split = "heldout" if i % 10 == (i // 10) % 10 else "train"
        utts.append(
            Utterance(
                utt_id=f"utt{i:05d}",
                seed=cfg.seed,
                speaker_id=speaker,
                style=style,
                fidelity=fidelity,
                text=text,
                l0=stream.l0,
                l1=stream.l1,
                l2=stream.l2,
                split=split,
            )
        )
    return utts


def write_manifest(path, utts: list[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in utts:
            f.write(u.to_json() + "\n")


def load_manifest(path) -> list[Utterance]:
    utts = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                utts.append(Utterance.from_json(line))
    if not utts:
        raise ValueError(f"empty dataset manifest: {path}")
    return utts


def speaker_tables(utts: list[Utterance]) -> dict[int, tc.SpeakerTable]:
    return {
        u.speaker_id: tc.SpeakerTable(u.seed, u.speaker_id)
        for u in {u.speaker_id: u for u in utts}.values()
    }


@dataclass
class PreparedUtterance:
    utt_id: str
    text_ids: list[int]
    sv: np.ndarray
    clap: np.ndarray
    patches: np.ndarray  # (T, 7) int
    style: str
    text: str


def prepare(utts: list[Utterance], vocab: BpeVocab) -> list[PreparedUtterance]:
    """Tokenize and embed once; training batches are assembled from these."""
    out = []
    for u in utts:
        ref = tc.speaker_embed(u.speaker_id, u.style)
        out.append(
            PreparedUtterance(
                utt_id=u.utt_id,
                text_ids=vocab.encode_text(u.text, FIDELITY_TAG[u.fidelity]),
                sv=ref.sv_embed,
                clap=ref.clap_embed,
                patches=np.asarray(u.patches, dtype=int).reshape(-1, 7),
                style=u.style,
                text=u.text,
            )
        )
    return out


def make_batch(items: list[PreparedUtterance], indices=None) -> Batch:
    chosen = items if indices is None else [items[int(i)] for i in indices]
    b = len(chosen)
    s = max(len(it.text_ids) for it in chosen)
    f = max(it.patches.shape[0] for it in chosen)
    text_ids = np.zeros((b, s), dtype=int)
    text_mask = np.zeros((b, s))
    patches = np.zeros((b, f, 7), dtype=int)
    n_frames = np.zeros(b, dtype=int)
    sv = np.stack([it.sv for it in chosen])
    clap = np.stack([it.clap for it in chosen])
    for r, it in enumerate(chosen):
        ids = it.text_ids
        text_ids[r, : len(ids)] = ids
        text_mask[r, : len(ids)] = 1.0
        t = it.patches.shape[0]
        patches[r, :t] = it.patches
        n_frames[r] = t
    return Batch(text_ids=text_ids, text_mask=text_mask, sv=sv, clap=clap,
                 patches=patches, n_frames=n_frames)
