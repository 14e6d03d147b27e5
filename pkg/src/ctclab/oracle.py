"""Brute-force path enumeration: exact reference values for tiny lattices.

Every function here walks all ``L**T`` paths, so it is only for tests and the
``oracle`` CLI report. Inputs are linear-domain emission matrices ``G`` (T x L).
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .ctc import BLANK, extend_targets

DEFAULT_BUDGET = 10**7
_CHUNK = 1 << 18


class BudgetExceeded(ValueError):
    pass


class ZeroProbability(ValueError):
    pass


def _check_budget(T: int, L: int, budget: int) -> None:
    if L**T > budget:
        raise BudgetExceeded(f"L^T = {L}^{T} exceeds enumeration budget {budget}")


def _path_chunks(T: int, L: int) -> Iterator[np.ndarray]:
    total = L**T
    powers = L ** np.arange(T - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(total, start + _CHUNK), dtype=np.int64)
        yield (idx[:, None] // powers[None, :]) % L


def _collapse_code(paths: np.ndarray, L: int) -> np.ndarray:
    """Encode each path's collapse as a base-L integer (digits are never 0)."""
    code = np.zeros(len(paths), dtype=np.int64)
    prev = np.full(len(paths), -1)
    for t in range(paths.shape[1]):
        cur = paths[:, t]
        keep = (cur != prev) & (cur != BLANK)
        code = np.where(keep, code * L + cur, code)
        prev = cur
    return code


def _code(labels: Sequence[int], L: int) -> int:
    c = 0
    for v in labels:
        c = c * L + int(v)
    return c


def _decode(code: int, L: int) -> tuple[int, ...]:
    out = []
    while code:
        code, d = divmod(code, L)
        out.append(int(d))
    return tuple(reversed(out))


def _path_probs(G: np.ndarray, paths: np.ndarray, t0: int = 0) -> np.ndarray:
    p = np.ones(len(paths))
    for j in range(paths.shape[1]):
        p *= G[t0 + j, paths[:, j]]
    return p


def _valid(G: np.ndarray, y: Sequence[int], budget: int):
    """Yield ``(paths, probs)`` chunks restricted to ``B^-1(y)``."""
    G = np.asarray(G, dtype=np.float64)
    T, L = G.shape
    _check_budget(T, L, budget)
    target = _code(y, L)
    for paths in _path_chunks(T, L):
        ok = _collapse_code(paths, L) == target
        if ok.any():
            sel = paths[ok]
            yield sel, _path_probs(G, sel)


def prob_by_enumeration(G, y: Sequence[int], budget: int = DEFAULT_BUDGET) -> float:
    return float(sum(p.sum() for _, p in _valid(G, y, budget)))


def count_valid_paths(T: int, L: int, y: Sequence[int], budget: int = DEFAULT_BUDGET) -> int:
    return sum(len(paths) for paths, _ in _valid(np.ones((T, L)), y, budget))


def entropy_by_enumeration(G, y: Sequence[int], budget: int = DEFAULT_BUDGET) -> float:
    probs = np.concatenate([p for _, p in _valid(G, y, budget)] or [np.zeros(0)])
    total = probs.sum()
    if total <= 0:
        raise ZeroProbability("no valid path carries probability mass")
    q = probs[probs > 0] / total
    return float(-(q * np.log(q)).sum())


def labeling_distribution(G, budget: int = DEFAULT_BUDGET) -> dict[tuple[int, ...], float]:
    """Exact ``p(l|X)`` for every labeling reachable by some path."""
    G = np.asarray(G, dtype=np.float64)
    T, L = G.shape
    _check_budget(T, L, budget)
    acc: dict[int, float] = {}
    for paths in _path_chunks(T, L):
        codes = _collapse_code(paths, L)
        probs = _path_probs(G, paths)
        uniq, inv = np.unique(codes, return_inverse=True)
        sums = np.bincount(inv, weights=probs, minlength=len(uniq))
        for c, s in zip(uniq.tolist(), sums.tolist()):
            acc[c] = acc.get(c, 0.0) + s
    return {_decode(c, L): p for c, p in acc.items()}


def best_labeling_by_enumeration(G, budget: int = DEFAULT_BUDGET) -> tuple[tuple[int, ...], float]:
    """Most probable labeling; exact ties go to the lexicographically smaller one."""
    dist = labeling_distribution(G, budget)
    labels = min(dist, key=lambda lab: (-dist[lab], lab))
    return labels, dist[labels]


def best_path_in(G, y: Sequence[int], budget: int = DEFAULT_BUDGET) -> tuple[tuple[int, ...], float]:
    """Exhaustive constrained maximum over ``B^-1(y)``."""
    best, best_p = None, -1.0
    for paths, probs in _valid(G, y, budget):
        i = int(np.argmax(probs))
        if probs[i] > best_p:
            best, best_p = tuple(int(v) for v in paths[i]), float(probs[i])
    if best is None:
        raise ZeroProbability("no valid path")
    return best, best_p


def alpha_beta_by_definition(G, y: Sequence[int], budget: int = DEFAULT_BUDGET):
    """Linear-domain ``(alpha, beta)``, each T x K', by summing prefixes/suffixes.

    ``alpha_t(s)`` sums prefixes ``pi_{1:t}`` that collapse to the glosses of
    ``y'_{1:s}`` and end in the symbol ``y'_s``; ``beta_t(s)`` sums suffixes
    ``pi_{t:T}`` that start with ``y'_s`` and collapse to the glosses of
    ``y'_{s:K'}``. Both include the emission at ``t``.
    """
    G = np.asarray(G, dtype=np.float64)
    T, L = G.shape
    _check_budget(T, L, budget)
    y = tuple(y)
    yext = extend_targets(y)
    S = len(yext)
    alpha = np.zeros((T, S))
    beta = np.zeros((T, S))
    pre_codes = [_code(y[: (s + 1) // 2], L) for s in range(S)]
    suf_codes = [_code(y[s // 2 :], L) for s in range(S)]
    for t in range(T):
        n = t + 1
        for paths in _path_chunks(n, L):
            codes = _collapse_code(paths, L)
            probs = _path_probs(G, paths)
            last = paths[:, -1]
            for s in range(S):
                m = (codes == pre_codes[s]) & (last == yext[s])
                alpha[t, s] += probs[m].sum()
        n = T - t
        for paths in _path_chunks(n, L):
            codes = _collapse_code(paths, L)
            probs = _path_probs(G, paths, t0=t)
            first = paths[:, 0]
            for s in range(S):
                m = (codes == suf_codes[s]) & (first == yext[s])
                beta[t, s] += probs[m].sum()
    return alpha, beta


def gamma_by_definition(G, y: Sequence[int], budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Stimuli weights from definitional alpha/beta; rows with no mass are zero."""
    alpha, beta = alpha_beta_by_definition(G, y, budget)
    prod = alpha[:, 1::2] * beta[:, 1::2]
    norm = prod.sum(axis=1, keepdims=True)
    return np.divide(prod, norm, out=np.zeros_like(prod), where=norm > 0)
