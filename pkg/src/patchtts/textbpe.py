"""Byte-pair-encoding text tokenizer with quality-prefix specials.

Greedy pair merging to a target vocabulary (512 in the standard setup).
Special tokens occupy the lowest ids in a fixed order; the two quality
tags [16000]/[48000] let the encoder condition on target fidelity and
are prepended as a single special token, never spelled out as text.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .toycodec import ALPHABET

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
TAG_16K = "[16000]"
TAG_48K = "[48000]"
SPECIALS = (PAD, BOS, EOS, TAG_16K, TAG_48K)
QUALITY_TAGS = (TAG_16K, TAG_48K)


@dataclass(frozen=True)
class BpeVocab:
    base_symbols: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    id_of: dict[str, int] = field(default_factory=dict, compare=False)
    symbol_of: dict[int, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        symbols = list(SPECIALS) + list(self.base_symbols) + [a + b for a, b in self.merges]
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.id_of.update({s: i for i, s in enumerate(symbols)})
        self.symbol_of.update({i: s for i, s in enumerate(symbols)})

    @property
    def size(self) -> int:
        return len(self.id_of)

    def encode(self, text: str) -> list[int]:
        """BPE-encode raw text (no specials).

        Characters outside the base table fall back to PAD; round-trips
        are exact for any text over the base symbols.
        """
        pieces = list(text)
        for a, b in self.merges:
            pieces = _apply_merge(pieces, a, b)
        pad_id = self.id_of[PAD]
        return [self.id_of.get(p, pad_id) for p in pieces]

    def encode_text(self, text: str, fidelity_tag: str | None) -> list[int]:
        """Quality tag (single special token) followed by the BPE tokens."""
        if fidelity_tag is None:
            return self.encode(text)
        if fidelity_tag not in QUALITY_TAGS:
            raise ValueError(f"unknown fidelity tag {fidelity_tag!r}")
        return [self.id_of[fidelity_tag]] + self.encode(text)

    def decode(self, ids: list[int]) -> str:
        specials = {self.id_of[s] for s in SPECIALS}
        return "".join(self.symbol_of[i] for i in ids if i not in specials)

    def save(self, path) -> None:
        """Plain-text vocab: specials, base symbols, then one merge per line.

        Fields are tab-separated since symbols may contain spaces.
        """
        lines = ["#specials\t" + "\t".join(SPECIALS), "#base"]
        lines += [repr(s) for s in self.base_symbols]
        lines.append("#merges")
        lines += [f"{a}\t{b}" for a, b in self.merges]
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "BpeVocab":
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or not lines[0].startswith("#specials"):
            raise ValueError("malformed vocab file")
        stored = tuple(lines[0].split("\t")[1:])
        if stored != SPECIALS:
            raise ValueError("vocab file specials do not match this build")
        base: list[str] = []
        merges: list[tuple[str, str]] = []
        section = None
        for line in lines[1:]:
            if line == "#base":
                section = "base"
            elif line == "#merges":
                section = "merges"
            elif section == "base":
                base.append(_unrepr(line))
            elif section == "merges":
                a, b = line.split("\t")
                merges.append((a, b))
        return cls(tuple(base), tuple(merges))


def _unrepr(line: str) -> str:
    import ast

    return ast.literal_eval(line)


def _apply_merge(pieces: list[str], a: str, b: str) -> list[str]:
    out = []
    i = 0
    n = len(pieces)
    while i < n:
        if i + 1 < n and pieces[i] == a and pieces[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return out


def train_bpe(corpus: list[str], vocab_size: int = 512) -> BpeVocab:
    """Greedy highest-frequency pair merging, ties broken lexicographically.

    Stops when the vocabulary reaches `vocab_size` or no adjacent pair
    occurs at least twice. The base table always covers the full codec
    alphabet so any in-domain text stays representable.
    """
    if not corpus:
        raise ValueError("corpus must be nonempty")
    base = tuple(sorted(set(ALPHABET) | {ch for text in corpus for ch in text}))
    if vocab_size < len(SPECIALS) + len(base):
        raise ValueError(
            f"vocab_size {vocab_size} smaller than specials + base alphabet "
            f"({len(SPECIALS) + len(base)})"
        )
    sequences = [list(text) for text in corpus if text]
    merges: list[tuple[str, str]] = []
    size = len(SPECIALS) + len(base)
    while size < vocab_size:
        counts: dict[tuple[str, str], int] = {}
        for seq in sequences:
            for x, y in zip(seq, seq[1:]):
                counts[(x, y)] = counts.get((x, y), 0) + 1
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        best = min(pair for pair, c in counts.items() if c == best_count)
        merges.append(best)
        sequences = [_apply_merge(seq, *best) for seq in sequences]
        size += 1
    return BpeVocab(base, tuple(merges))
