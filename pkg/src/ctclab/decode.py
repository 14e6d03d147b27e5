"""Decoding (greedy, prefix beam, forced alignment) and scoring (WER, alignment quality)."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import NEG_INF, _value
from .ctc import BLANK, SequenceTooShort, collapse, extend_targets, min_admissible_T, skip_allowed


class InvalidWidth(ValueError):
    pass


class EmptyReference(ValueError):
    pass


class RangeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DecodeResult:
    labels: tuple[int, ...]
    log_score: float


@dataclass(frozen=True, order=True)
class Segment:
    """Inclusive, 0-based ``[start, end]`` span carrying one gloss id."""

    start: int
    end: int
    gloss: int

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"segment start {self.start} > end {self.end}")

    def __len__(self):
        return self.end - self.start + 1


def check_segments(segments: Sequence[Segment], n_frames: int | None = None) -> None:
    prev_end = -1
    for seg in segments:
        if seg.start <= prev_end:
            raise RangeMismatch("segments overlap or are out of order")
        if seg.start < 0 or (n_frames is not None and seg.end >= n_frames):
            raise RangeMismatch(f"segment {seg} outside [0, {n_frames})")
        prev_end = seg.end


# ---------------------------------------------------------------- decoders


def greedy_decode(log_probs) -> DecodeResult:
    lp = _value(log_probs)
    best = lp.argmax(axis=1)  # first maximum wins ties
    score = float(lp[np.arange(len(lp)), best].sum())
    return DecodeResult(collapse(best), score)


def _lse2(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + float(np.log1p(np.exp(-abs(a - b))))


def prefix_beam_decode(
    log_probs,
    width: int,
    lm: Callable[[tuple[int, ...], int], float] | None = None,
    lm_weight: float = 0.0,
) -> DecodeResult:
    """CTC prefix beam search.

    Each prefix keeps separate log masses for paths ending in blank and in
    its last gloss. ``lm(prefix, v)`` may return ``log P(v | prefix)``; it is
    added with weight ``lm_weight`` whenever a prefix is extended. Beams are
    ranked by score, ties broken by the lexicographically smaller prefix.
    The returned score is the log mass of the labeling (plus LM bonus).

    Width 1 without an LM keeps a single path rather than a single merged
    prefix, i.e. it is best-path decoding and returns the greedy result.
    """
    if width < 1:
        raise InvalidWidth(f"beam width must be >= 1, got {width}")
    lp = _value(log_probs)
    use_lm = lm is not None and lm_weight != 0.0
    if width == 1 and not use_lm:
        return greedy_decode(lp)
    T, L = lp.shape
    # prefix -> [log p_blank, log p_nonblank, lm bonus]
    beams: dict[tuple[int, ...], list[float]] = {(): [0.0, NEG_INF, 0.0]}
    for t in range(T):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF, 0.0])
        for prefix, (pb, pnb, bonus) in beams.items():
            total = _lse2(pb, pnb)
            entry = nxt[prefix]
            entry[2] = bonus
            entry[0] = _lse2(entry[0], total + row[BLANK])
            if prefix:
                entry[1] = _lse2(entry[1], pnb + row[prefix[-1]])
            for v in range(L):
                if v == BLANK:
                    continue
                ext = prefix + (v,)
                # repeating the last gloss needs an intervening blank
                src = pb if prefix and v == prefix[-1] else total
                if src == NEG_INF:
                    continue
                e = nxt[ext]
                if e[0] == NEG_INF and e[1] == NEG_INF:
                    e[2] = bonus + (lm_weight * lm(prefix, v) if use_lm else 0.0)
                e[1] = _lse2(e[1], src + row[v])
        ranked = sorted(nxt.items(), key=lambda kv: (-(_lse2(kv[1][0], kv[1][1]) + kv[1][2]), kv[0]))
        beams = dict(ranked[:width])
    prefix, (pb, pnb, bonus) = min(beams.items(), key=lambda kv: (-(_lse2(kv[1][0], kv[1][1]) + kv[1][2]), kv[0]))
    return DecodeResult(prefix, _lse2(pb, pnb) + bonus)


def forced_alignment(log_probs, y: Sequence[int]) -> tuple[tuple[int, ...], list[Segment]]:
    """Viterbi path constrained to collapse to ``y``, plus its gloss segments.

    Ties prefer staying in the current state, then the adjacent one, then
    the skip. Segments are over prediction steps.
    """
    lp = _value(log_probs)
    T = lp.shape[0]
    y = tuple(y)
    if T < max(1, min_admissible_T(y)):
        raise SequenceTooShort(f"T={T} too short for {len(y)} glosses")
    yext = extend_targets(y)
    S = len(yext)
    skip = skip_allowed(yext)
    emit = lp[:, yext]
    score = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.intp)
    score[0, : min(2, S)] = emit[0, : min(2, S)]
    for t in range(1, T):
        prev = score[t - 1]
        cand = np.full((3, S), NEG_INF)
        cand[0] = prev
        cand[1, 1:] = prev[:-1]
        cand[2, 2:] = np.where(skip[2:], prev[:-2], NEG_INF)
        choice = cand.argmax(axis=0)  # first max: stay, then step, then skip
        back[t] = choice
        score[t] = cand[choice, np.arange(S)] + emit[t]
    finals = [S - 1] if S == 1 else [S - 1, S - 2]
    s = max(finals, key=lambda i: (score[-1, i], i))
    if score[-1, s] == NEG_INF:
        raise SequenceTooShort("no path with non-zero probability collapses to y")
    states = [s]
    for t in range(T - 1, 0, -1):
        s = s - back[t, s]
        states.append(s)
    states.reverse()
    path = tuple(int(yext[s]) for s in states)
    return path, path_segments(path)


def path_segments(path: Sequence[int]) -> list[Segment]:
    """Maximal runs of one non-blank id in ``path``."""
    segs = []
    start = None
    for i, v in enumerate(path):
        if start is not None and v != path[start]:
            segs.append(Segment(start, i - 1, int(path[start])))
            start = None
        if start is None and v != BLANK:
            start = i
    if start is not None:
        segs.append(Segment(start, len(path) - 1, int(path[start])))
    return segs


def steps_to_frames(segments: Sequence[Segment], factor: int, n_frames: int, n_steps: int) -> list[Segment]:
    """Map step segments to frame segments; step ``t`` covers frames ``[f t, f t + f - 1]``.

    The last step also absorbs frames dropped by pooling at the sequence end.
    """
    out = []
    for seg in segments:
        start = seg.start * factor
        end = n_frames - 1 if seg.end == n_steps - 1 else min(n_frames - 1, seg.end * factor + factor - 1)
        out.append(Segment(start, end, seg.gloss))
    return out


def frame_labels(segments: Sequence[Segment], n_frames: int) -> np.ndarray:
    labels = np.full(n_frames, BLANK, dtype=np.intp)
    for seg in segments:
        labels[seg.start : seg.end + 1] = seg.gloss
    return labels


# ---------------------------------------------------------------- scoring


@dataclass(frozen=True)
class EditOps:
    S: int
    D: int
    I: int  # noqa: E741
    N: int

    @property
    def errors(self) -> int:
        return self.S + self.D + self.I

    @property
    def wer(self) -> float:
        return self.errors / self.N


def wer(reference: Sequence, hypothesis: Sequence) -> EditOps:
    """Unit-cost Levenshtein alignment; backtrace prefers S, then D, then I."""
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    if n == 0:
        raise EmptyReference("WER needs a non-empty reference")
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i - 1, j] + 1,
                d[i, j - 1] + 1,
            )
    S = D = I = 0  # noqa: E741
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1  # noqa: E741
            j -= 1
    return EditOps(int(S), D, I, n)


def aggregate_wer(ops: Sequence[EditOps]) -> float:
    return sum(o.errors for o in ops) / sum(o.N for o in ops)


def _iou(a: Segment, b: Segment) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start) + 1)
    union = len(a) + len(b) - inter
    return inter / union


def _matched_pairs(pred: Sequence[Segment], gold: Sequence[Segment]) -> list[tuple[int, int]]:
    """Order-preserving matching of equal glosses (longest common subsequence)."""
    n, m = len(gold), len(pred)
    lcs = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if gold[i].gloss == pred[j].gloss:
                lcs[i, j] = lcs[i + 1, j + 1] + 1
            else:
                lcs[i, j] = max(lcs[i + 1, j], lcs[i, j + 1])
    pairs = []
    i = j = 0
    while i < n and j < m:
        if gold[i].gloss == pred[j].gloss and lcs[i, j] == lcs[i + 1, j + 1] + 1:
            pairs.append((i, j))
            i, j = i + 1, j + 1
        elif lcs[i + 1, j] >= lcs[i, j + 1]:
            i += 1
        else:
            j += 1
    return pairs


@dataclass(frozen=True)
class AlignmentReport:
    frame_accuracy: float
    mean_iou: float
    matched: int
    gold_segments: int


def alignment_quality(predicted: Sequence[Segment], gold: Sequence[Segment], n_frames: int) -> AlignmentReport:
    """Frame accuracy (blank is its own class) and mean IoU over gold segments.

    Gold segments are matched in order to predicted segments of the same
    gloss; an unmatched gold segment scores IoU 0.
    """
    check_segments(predicted, n_frames)
    check_segments(gold, n_frames)
    acc = float((frame_labels(predicted, n_frames) == frame_labels(gold, n_frames)).mean())
    pairs = _matched_pairs(predicted, gold)
    ious = [_iou(gold[i], predicted[j]) for i, j in pairs]
    mean_iou = sum(ious) / len(gold) if gold else 1.0
    return AlignmentReport(acc, mean_iou, len(pairs), len(gold))
