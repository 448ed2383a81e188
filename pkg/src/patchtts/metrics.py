"""Objective evaluation: edit-distance error rates, equal error rate,
repetition (stuck) rate, and style-grouped aggregate reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields


def levenshtein(a, b) -> int:
    """Unit-cost insert/delete/substitute distance between two sequences."""
    m, n = len(a), len(b)
    dp = list(range(n + 1))
    for i in range(1, m + 1):
        prev = dp[0]
        dp[0] = i
        for j in range(1, n + 1):
            tmp = dp[j]
            if a[i - 1] == b[j - 1]:
                dp[j] = prev
            else:
                dp[j] = 1 + min(prev, dp[j], dp[j - 1])
            prev = tmp
    return dp[n]


def edit_error_rate(hyp, ref, unit: str = "char") -> float:
    """Levenshtein(hyp, ref) / len(ref); empty ref is 1.0 unless hyp is too."""
    if unit == "word":
        hyp, ref = hyp.split(), ref.split()
    elif unit != "char":
        raise ValueError("unit must be 'char' or 'word'")
    if len(ref) == 0:
        return 1.0 if len(hyp) > 0 else 0.0
    return levenshtein(hyp, ref) / len(ref)


def cer(hyp: str, ref: str) -> float:
    return edit_error_rate(hyp, ref, unit="char")


def wer(hyp: str, ref: str) -> float:
    return edit_error_rate(hyp, ref, unit="word")


def eer(scores: list[tuple[float, int]]) -> float:
    """Equal error rate from (similarity, label) pairs.

    Label 0 marks (reference, generated) pairs, label 1 marks
    (reference, other ground truth) pairs. Sweeping thresholds over the
    distinct scores, false-accept is the fraction of label-0 scores at or
    above the threshold and false-reject the fraction of label-1 scores
    below it; the EER is the common rate at the crossing, linearly
    interpolated between the bracketing thresholds when the curves jump
    past each other. Identical score distributions give exactly 0.5,
    perfect separation exactly 0.
    """
    neg = sorted(s for s, lab in scores if lab == 0)
    pos = sorted(s for s, lab in scores if lab == 1)
    if not neg or not pos:
        raise ValueError("eer needs at least one score of each label")
    import bisect

    thresholds = sorted({s for s, _ in scores})
    far = []  # fraction of label-0 >= threshold (falsely accepted)
    frr = []  # fraction of label-1 < threshold (falsely rejected)
    for t in thresholds:
        far.append((len(neg) - bisect.bisect_left(neg, t)) / len(neg))
        frr.append(bisect.bisect_left(pos, t) / len(pos))
    diff = [fa - fr for fa, fr in zip(far, frr)]
    for k, d in enumerate(diff):
        if d == 0.0:
            return far[k]
        if d < 0.0:
            # crossing happened between k-1 and k
            if k == 0:
                return (far[0] + frr[0]) / 2.0
            span = diff[k - 1] - diff[k]
            frac = diff[k - 1] / span
            return far[k - 1] + frac * (far[k] - far[k - 1])
    # FAR stayed above FRR through the sweep: everything rejected is the
    # closest operating point beyond the last threshold.
    return (far[-1] + frr[-1]) / 2.0


def stuck_rate(stream_or_tokens) -> float:
    """Longest identical-consecutive run of coarse tokens, normalized:
    (run - 1) / max(1, len - 1). 0 for streams of length < 2."""
    tokens = getattr(stream_or_tokens, "l0", stream_or_tokens)
    n = len(tokens)
    if n < 2:
        return 0.0
    longest = run = 1
    for prev, cur in zip(tokens, tokens[1:]):
        run = run + 1 if cur == prev else 1
        longest = max(longest, run)
    return (longest - 1) / (n - 1)


@dataclass
class EvalRecord:
    utt_id: str
    style: str
    mode: str
    cer: float
    wer: float
    speaker_score: float
    stuck_rate: float
    frames: int
    used_top_p: float

    def __post_init__(self):
        if self.cer < 0 or not 0.0 <= self.stuck_rate <= 1.0:
            raise ValueError("invalid evaluation record")


def grouped_report(records: list[EvalRecord]) -> list[dict]:
    """Per-style means, rows sorted by style; empty styles simply absent."""
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(r.style, []).append(r)
    rows = []
    for style in sorted(groups):
        rs = groups[style]
        n = len(rs)
        rows.append(
            {
                "style": style,
                "n": n,
                "wer_mean": sum(r.wer for r in rs) / n,
                "cer_mean": sum(r.cer for r in rs) / n,
                "spk_mean": sum(r.speaker_score for r in rs) / n,
                "stuck_mean": sum(r.stuck_rate for r in rs) / n,
            }
        )
    return rows


def write_records_csv(path, records: list[EvalRecord]) -> None:
    cols = [f.name for f in fields(EvalRecord)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for r in records:
            writer.writerow([getattr(r, c) for c in cols])


def write_report_csv(path, rows: list[dict]) -> None:
    cols = ["style", "n", "wer_mean", "cer_mean", "spk_mean", "stuck_mean"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] for c in cols])
