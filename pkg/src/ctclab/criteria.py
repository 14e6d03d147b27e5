"""Entropy-regularized and stimulated CTC criteria on top of :mod:`ctclab.ctc`."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ctc import (
    DegenerateLattice,
    _check_length,
    _emissions,
    ctc_log_prob,
    extend_targets,
    forward_rows,
    lattices,
)

KINDS = ("ctc", "enctc", "stim", "enstim")


class ZeroNormalizer(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class CriterionConfig:
    kind: str = "ctc"
    phi: float = 0.1  # entropy weight
    theta: float = 0.5  # stimuli weight
    lam: float = 1.0  # language-model weight
    keep_entropy_after_activation: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown criterion {self.kind!r}; expected one of {KINDS}")
        for name in ("phi", "theta", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def uses_entropy(self) -> bool:
        return self.kind in ("enctc", "enstim")

    @property
    def uses_stimuli(self) -> bool:
        return self.kind in ("stim", "enstim")


def ctc_and_entropy(log_probs, y: Sequence[int]) -> tuple[Tensor, Tensor]:
    """``(L_ctc, H)`` from one joint forward pass.

    ``H = sum_s w_s E_T(s) + log p`` where ``w`` are the terminal posterior
    weights and ``E`` the expected prefix surprisal (see ``forward_rows``);
    this equals ``-Q(y)/p(y|X) + log p(y|X)``.
    """
    yext = extend_targets(y)
    emit = _emissions(log_probs, yext)
    _check_length(emit.shape[0], y)
    alphas, ents = forward_rows(emit, yext, with_entropy=True)
    last_a, last_e = alphas[-1], ents[-1]
    if last_a.shape[0] >= 2:
        last_a, last_e = last_a[-2:], last_e[-2:]
    logp = ad.log_sum_exp(last_a, axis=0)
    if not np.isfinite(logp.value):
        raise DegenerateLattice("p(y|X) is zero even in the log domain")
    w = ad.softmax(last_a, axis=0)
    H = (w * last_e).sum() + logp
    return -logp, H


def entropy_term(log_probs, y: Sequence[int]) -> Tensor:
    """Entropy of the path posterior ``p(pi | y, X)``, differentiable."""
    return ctc_and_entropy(log_probs, y)[1]


def enctc_loss(log_probs, y: Sequence[int], phi: float) -> Tensor:
    if phi < 0:
        raise ValueError("phi must be non-negative")
    loss, H = ctc_and_entropy(log_probs, y)
    return loss - phi * H


def nonblank_slices(log_alpha: np.ndarray, log_beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Columns of the gloss states (odd 0-based positions of y'): T x K each."""
    return log_alpha[:, 1::2], log_beta[:, 1::2]


def stimuli_weights(log_alpha_nb: np.ndarray, log_beta_nb: np.ndarray, strict: bool = False) -> np.ndarray:
    """Per-step responsibilities of each target gloss, rows summing to 1.

    A step at which no gloss state is reachable (e.g. the forced blank
    between two repeated glosses when T is at its minimum) gets an all-zero
    row; ``strict=True`` raises :class:`ZeroNormalizer` instead.
    """
    prod = log_alpha_nb + log_beta_nb
    norm = ad._lse_value(prod, 1)
    dead = norm[:, 0] == ad.NEG_INF
    if strict and dead.any():
        raise ZeroNormalizer(f"no gloss state reachable at steps {np.flatnonzero(dead).tolist()}")
    with np.errstate(invalid="ignore"):
        gamma = np.exp(prod - norm)
    gamma[dead] = 0.0
    return gamma


def stimuli_weights_for(log_probs, y: Sequence[int], strict: bool = False) -> np.ndarray:
    la, lb, _ = lattices(log_probs, y)
    return stimuli_weights(*nonblank_slices(la, lb), strict=strict)


def stimuli_loss(h_t, h_k, gamma) -> Tensor:
    """Mean over (k, t) of ``gamma_t(k) * ||h_t - h_k||^2``; gamma is a constant."""
    h_t, h_k = ad.as_tensor(h_t), ad.as_tensor(h_k)
    gamma = np.asarray(ad._value(gamma))
    if h_t.ndim != 2 or h_k.ndim != 2 or h_t.shape[1] != h_k.shape[1]:
        raise DimensionMismatch(f"state widths differ: {h_t.shape} vs {h_k.shape}")
    T, K = h_t.shape[0], h_k.shape[0]
    if gamma.shape != (T, K):
        raise DimensionMismatch(f"gamma shape {gamma.shape} != {(T, K)}")
    d = h_t.shape[1]
    diff = ad.reshape(h_t, (T, 1, d)) - ad.reshape(h_k, (1, K, d))
    dist = ad.square(diff).sum(axis=2)
    return (dist * gamma).sum() * (1.0 / (K * T))


def lm_loss(lm_log_probs, targets: Sequence[int]) -> Tensor:
    """Mean next-gloss negative log-likelihood.

    ``targets`` are the class ids each prediction row should put mass on (the
    LM target stream, end token included), one per row.
    """
    lm_log_probs = ad.as_tensor(lm_log_probs)
    targets = np.asarray(targets, dtype=np.intp)
    if lm_log_probs.ndim != 2 or lm_log_probs.shape[0] != len(targets):
        raise ad.ShapeMismatch(f"{lm_log_probs.shape} predictions for {len(targets)} targets")
    picked = lm_log_probs[np.arange(len(targets)), targets]
    return -picked.mean()


@dataclass
class LossParts:
    total: Tensor
    ctc: float
    entropy: float | None = None
    lm: float | None = None
    stimuli: float | None = None

    def as_dict(self) -> dict[str, float]:
        out = {"ctc": self.ctc}
        for name in ("entropy", "lm", "stimuli"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out


def active_terms(config: CriterionConfig, stimuli_active: bool) -> tuple[bool, bool]:
    """Which of (entropy, stimuli+LM) contribute under the activation schedule."""
    stim = config.uses_stimuli and stimuli_active
    ent = config.uses_entropy and (not stim or config.keep_entropy_after_activation)
    return ent, stim


def composite_loss(
    config: CriterionConfig,
    log_probs,
    y: Sequence[int],
    h_t=None,
    h_k=None,
    lm_log_probs=None,
    lm_targets: Sequence[int] | None = None,
    stimuli_active: bool = False,
    gamma=None,
) -> LossParts:
    """Criterion selected by ``config.kind`` under the late-activation schedule.

    Before activation ``stim`` is plain CTC and ``enstim`` is EnCTC. After it,
    both add ``lam * L_lm + theta * L_stimuli``; ``enstim`` drops the entropy
    term unless ``keep_entropy_after_activation`` is set. The stimuli weights
    are a constant of the graph; pass ``gamma`` to fix them (finite-difference
    checks do this), otherwise they are computed from ``log_probs``.
    """
    use_ent, use_stim = active_terms(config, stimuli_active)
    if use_ent:
        loss, H = ctc_and_entropy(log_probs, y)
        total = loss - config.phi * H
        parts = LossParts(total, float(loss.value), entropy=float(H.value))
    else:
        loss = -ctc_log_prob(log_probs, y)
        total = loss
        parts = LossParts(total, float(loss.value))
    if use_stim:
        if h_t is None or h_k is None or lm_log_probs is None or lm_targets is None:
            raise ValueError("stimulated criteria need h_t, h_k and LM predictions")
        if gamma is None:
            gamma = stimuli_weights_for(log_probs, y)
        l_stim = stimuli_loss(h_t, h_k, gamma)
        l_lm = lm_loss(lm_log_probs, lm_targets)
        total = total + config.lam * l_lm + config.theta * l_stim
        parts.lm, parts.stimuli = float(l_lm.value), float(l_stim.value)
    parts.total = total
    return parts


def warn_if_stimuli_from_scratch(config: CriterionConfig, activation_epoch: int | None) -> None:
    if config.uses_stimuli and activation_epoch is not None and activation_epoch <= 1:
        warnings.warn(
            "stimulated criterion active from the first epoch; training from scratch "
            "with stimuli tends not to converge",
            RuntimeWarning,
            stacklevel=2,
        )
