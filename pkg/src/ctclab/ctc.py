"""The CTC lattice: extended targets, forward/backward recursions and the loss.

Conventions: the blank label is id 0. Time steps and lattice states are
0-based in code; the 1-based ``t`` accepted by :func:`posterior_at` is the only
exception. All lattice quantities are natural-log probabilities with ``-inf``
for impossible states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Tensor

BLANK = 0
BLANK_NAME = "<b>"


class CTCError(ValueError):
    pass


class SequenceTooShort(CTCError):
    pass


class DegenerateLattice(CTCError):
    pass


class InvalidTarget(CTCError):
    pass


@dataclass
class Vocabulary:
    """Gloss names with the blank fixed at id 0."""

    labels: list[str] = field(default_factory=lambda: [BLANK_NAME])

    def __post_init__(self):
        if not self.labels or self.labels[0] != BLANK_NAME:
            raise ValueError(f"label 0 must be the blank {BLANK_NAME!r}")
        if BLANK_NAME in self.labels[1:]:
            raise ValueError(f"{BLANK_NAME!r} is reserved for the blank")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("label names must be unique")
        self._index = {name: i for i, name in enumerate(self.labels)}

    @classmethod
    def from_glosses(cls, glosses: Sequence[str]) -> "Vocabulary":
        return cls([BLANK_NAME, *glosses])

    @property
    def size(self) -> int:
        """L, including the blank."""
        return len(self.labels)

    @property
    def glosses(self) -> list[str]:
        return self.labels[1:]

    def id(self, name: str) -> int:
        return self._index[name]

    def encode(self, names: Sequence[str]) -> list[int]:
        return [self._index[n] for n in names]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.labels[i] for i in ids]


def check_targets(y: Sequence[int], num_labels: int | None = None) -> tuple[int, ...]:
    y = tuple(int(v) for v in y)
    for v in y:
        if v == BLANK:
            raise InvalidTarget("target sequence contains the blank label")
        if v < 0 or (num_labels is not None and v >= num_labels):
            raise InvalidTarget(f"label id {v} outside vocabulary of size {num_labels}")
    return y


def extend_targets(y: Sequence[int]) -> np.ndarray:
    """Interleave blanks: ``(a, b) -> (-, a, -, b, -)``; length ``2K + 1``."""
    y = check_targets(y)
    ext = np.full(2 * len(y) + 1, BLANK, dtype=np.intp)
    ext[1::2] = y
    return ext


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge runs of repeated ids, then drop blanks."""
    out = []
    prev = None
    for v in path:
        v = int(v)
        if v != prev and v != BLANK:
            out.append(v)
        prev = v
    return tuple(out)


def min_admissible_T(y: Sequence[int]) -> int:
    y = tuple(y)
    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
    return len(y) + repeats


def skip_allowed(yext: np.ndarray) -> np.ndarray:
    """Boolean mask over states: may state ``s`` be entered from ``s - 2``."""
    allowed = np.zeros(len(yext), dtype=bool)
    allowed[2:] = (yext[2:] != BLANK) & (yext[2:] != yext[:-2])
    return allowed


def _emissions(log_probs, yext: np.ndarray) -> Tensor:
    log_probs = ad.as_tensor(log_probs)
    if log_probs.ndim != 2:
        raise ad.ShapeMismatch(f"emission lattice must be T x L, got {log_probs.shape}")
    return ad.gather(log_probs, yext, axis=1)


def _check_length(T: int, y: Sequence[int]) -> None:
    need = min_admissible_T(y)
    if T < max(need, 1):
        raise SequenceTooShort(f"T={T} steps cannot emit {len(y)} glosses (need {need})")


@dataclass
class ForwardLattice:
    log_alpha: Tensor  # T x K'
    targets: np.ndarray  # y'

    @property
    def values(self) -> np.ndarray:
        return self.log_alpha.value


@dataclass
class BackwardLattice:
    log_beta: Tensor
    targets: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.log_beta.value


def _shifted(v: np.ndarray, k: int, fill: float) -> np.ndarray:
    out = np.full_like(v, fill)
    if k > 0:
        out[k:] = v[:-k]
    else:
        out[:k] = v[-k:]
    return out


def _unshift(g: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of :func:`_shifted` (the vacated slots had no source)."""
    return _shifted(g, -k, 0.0)


def _candidates(v: np.ndarray, skip_mask: np.ndarray, d: int) -> np.ndarray:
    """3 x S predecessor scores: stay, one step, skip (masked)."""
    return np.stack([v, _shifted(v, d, NEG_INF), _shifted(v, 2 * d, NEG_INF) + skip_mask])


def _cand_weights(cand: np.ndarray, lse: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        w = np.exp(cand - lse)
    return np.where(lse == NEG_INF, 0.0, w)


def _fold(gc: np.ndarray, d: int) -> np.ndarray:
    return gc[0] + _unshift(gc[1], d) + _unshift(gc[2], 2 * d)


def lattice_step(prev, skip_mask: np.ndarray, direction: int = 1) -> Tensor:
    """One lattice transition without the emission: ``lse`` over the stay,
    single-step and (masked) skip predecessors. ``direction`` is +1 for the
    alpha recursion and -1 for beta. A fused op: one tape node per row.
    """
    prev = ad.as_tensor(prev)
    cand = _candidates(prev.value, skip_mask, direction)
    out = ad._lse_value(cand, 0)

    def bw(g):
        return (_fold(g * _cand_weights(cand, out), direction),)

    return ad.record("lattice_step", out[0], (prev,), bw)


def entropy_step(alpha, ent, skip_mask: np.ndarray) -> Tensor:
    """Posterior-weighted mix of the predecessors' expected surprisal.

    With ``w = softmax`` over the alpha candidates of each state, returns
    ``sum_j w_j * shift(ent, j)``; the caller subtracts the emission.
    """
    alpha, ent = ad.as_tensor(alpha), ad.as_tensor(ent)
    cand = _candidates(alpha.value, skip_mask, 1)
    w = _cand_weights(cand, ad._lse_value(cand, 0))
    e = ent.value
    E = np.stack([e, _shifted(e, 1, 0.0), _shifted(e, 2, 0.0)])
    out = (w * E).sum(axis=0)

    def bw(g):
        dw = g * E
        dcand = w * (dw - (w * dw).sum(axis=0, keepdims=True))
        return _fold(dcand, 1), _fold(g * w, 1)

    return ad.record("entropy_step", out, (alpha, ent), bw)


def forward_rows(emit: Tensor, yext: np.ndarray, with_entropy: bool = False):
    """Run the alpha recursion row by row.

    Returns ``(alpha_rows, entropy_rows)``. With ``with_entropy`` each entropy
    row holds, per state, the posterior-expected ``-log p`` of the prefix
    paths ending there; it is the ratio ``-Q_t(s) / alpha_t(s)`` of the
    (alpha, Q) accumulator, which keeps the recursion in a bounded range.
    Unreachable states carry an arbitrary finite value with zero weight.
    """
    T, S = emit.shape
    init_mask = np.full(S, NEG_INF)
    init_mask[: min(2, S)] = 0.0
    skip_mask = np.where(skip_allowed(yext), 0.0, NEG_INF)

    alpha = emit[0] + init_mask
    alphas = [alpha]
    ent = None
    ents = []
    if with_entropy:
        ent = -emit[0]
        ents.append(ent)
    for t in range(1, T):
        e_t = emit[t]
        if with_entropy:
            ent = entropy_step(alpha, ent, skip_mask) - e_t
            ents.append(ent)
        alpha = lattice_step(alpha, skip_mask) + e_t
        alphas.append(alpha)
    return alphas, ents


def backward_rows(emit: Tensor, yext: np.ndarray) -> list[Tensor]:
    T, S = emit.shape
    final_mask = np.full(S, NEG_INF)
    final_mask[max(0, S - 2) :] = 0.0
    # skip from s into s + 2 is allowed iff entering s + 2 from s is allowed
    skip_mask = np.where(np.roll(skip_allowed(yext), -2), 0.0, NEG_INF)
    if S >= 2:
        skip_mask[-2:] = NEG_INF

    beta = emit[T - 1] + final_mask
    betas = [beta]
    for t in range(T - 2, -1, -1):
        beta = lattice_step(beta, skip_mask, -1) + emit[t]
        betas.append(beta)
    betas.reverse()
    return betas


def ctc_forward(log_probs, y: Sequence[int]) -> ForwardLattice:
    """log alpha over the extended targets; ``alpha_t(s)`` includes ``g^t``."""
    yext = extend_targets(y)
    emit = _emissions(log_probs, yext)
    _check_length(emit.shape[0], y)
    rows, _ = forward_rows(emit, yext)
    return ForwardLattice(ad.stack(rows), yext)


def ctc_backward(log_probs, y: Sequence[int]) -> BackwardLattice:
    """log beta over the extended targets; ``beta_t(s)`` includes ``g^t`` too."""
    yext = extend_targets(y)
    emit = _emissions(log_probs, yext)
    _check_length(emit.shape[0], y)
    return BackwardLattice(ad.stack(backward_rows(emit, yext)), yext)


def _final_logp(alpha_last: Tensor) -> Tensor:
    tail = alpha_last[-2:] if alpha_last.shape[0] >= 2 else alpha_last
    return ad.log_sum_exp(tail, axis=0)


def ctc_log_prob(log_probs, y: Sequence[int]) -> Tensor:
    """Differentiable ``log p(y|X)``."""
    yext = extend_targets(y)
    emit = _emissions(log_probs, yext)
    _check_length(emit.shape[0], y)
    rows, _ = forward_rows(emit, yext)
    logp = _final_logp(rows[-1])
    if not np.isfinite(logp.value):
        raise DegenerateLattice("p(y|X) is zero even in the log domain")
    return logp


def ctc_loss(log_probs, y: Sequence[int]) -> Tensor:
    """``-log p(y|X)`` as a scalar on the active tape."""
    return -ctc_log_prob(log_probs, y)


def lattices(log_probs, y: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plain-array ``(log_alpha, log_beta, y')`` for analysis and decoding."""
    lp = ad.Tensor(ad._value(log_probs))
    fwd = ctc_forward(lp, y)
    bwd = ctc_backward(lp, y)
    return fwd.values, bwd.values, fwd.targets


def posterior_at(log_probs, y: Sequence[int], t: int) -> float:
    """``p(y|X)`` from the alpha-beta product at 1-based step ``t``."""
    lp = ad._value(log_probs)
    la, lb, yext = lattices(lp, y)
    if not 1 <= t <= lp.shape[0]:
        raise IndexError(f"t={t} outside [1, {lp.shape[0]}]")
    row = la[t - 1] + lb[t - 1] - lp[t - 1, yext]
    return float(np.exp(ad._lse_value(row, 0)[0]))


def ctc_grad_closed_form(probs, y: Sequence[int]) -> np.ndarray:
    """``dL_ctc / dg`` for linear-domain emissions ``probs`` (T x L).

    Entry ``(t, v)`` is ``-(1 / (p g_v^t)) * sum over valid paths with
    pi_t = v of p(pi)``; the path sum is ``sum_{s: y'_s = v} alpha_t(s)
    beta_t(s) / g_v^t``.
    """
    g = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        lg = np.log(g)
    la, lb, yext = lattices(lg, y)
    T, L = g.shape
    logp = ad._lse_value(la[-1, -2:] if len(yext) > 1 else la[-1], 0)[0]
    occ = la + lb - lg[:, yext]  # log mass of valid paths through (t, s)
    path_mass = np.full((T, L), NEG_INF)
    for v in np.unique(yext):
        cols = occ[:, yext == v]
        path_mass[:, v] = ad._lse_value(cols, 1)[:, 0]
    with np.errstate(invalid="ignore"):
        grad = -np.exp(path_mass - logp - lg)
    return np.where(path_mass == NEG_INF, 0.0, grad)
