"""Verification drivers: finite-difference gradient checks, oracle comparisons, latency bench."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import criteria as cr
from . import oracle
from .ctc import (
    ctc_grad_closed_form,
    ctc_log_prob,
    ctc_loss,
    entropy_step,
    lattice_step,
    lattices,
    min_admissible_T,
    posterior_at,
)
from .decode import forced_alignment, greedy_decode, prefix_beam_decode
from .models import CSLRModel, EncoderConfig, RNNLMConfig

GRAD_TOL = 1e-4
FD_EPS = 1e-5


# ---------------------------------------------------------------- gradients


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of ``f`` with respect to the array ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|)``; 0 when both vanish."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def check_function(fn: Callable[..., ad.Tensor], inputs: Sequence[np.ndarray], eps: float = FD_EPS) -> float:
    """Max relative error between reverse-mode and FD gradients of scalar ``fn`` over all inputs."""
    leaves = [ad.Tensor(x, requires_grad=True) for x in inputs]
    with ad.Tape():
        out = fn(*leaves)
    ad.backward(out)
    worst = 0.0
    for leaf in leaves:
        def f():
            return float(fn(*[ad.Tensor(l.value) for l in leaves]).value)
        worst = max(worst, rel_error(leaf.grad, numeric_grad(f, leaf.value, eps)))
    return worst


def _weighted(op_fn):
    """Scalarize a tensor-valued op with a fixed random weighting."""
    cache = {}

    def fn(*xs):
        out = op_fn(*xs)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(1).normal(size=out.shape)
        return (out * cache["w"]).sum()

    return fn


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One small differentiable case per recorded primitive."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    away = a + np.sign(a) * 0.1  # keep relu/max away from kinks
    row, ent = rng.normal(size=7), rng.normal(size=7)
    skip = np.where(np.arange(7) % 2 == 1, 0.0, ad.NEG_INF)
    return {
        "add": (_weighted(lambda x, y: x + y), [a, b[0].copy()]),
        "sub": (_weighted(lambda x, y: x - y), [a, b]),
        "mul": (_weighted(lambda x, y: x * y), [a, b]),
        "div": (_weighted(lambda x, y: x / y), [a, pos]),
        "neg": (_weighted(lambda x: -x), [a]),
        "exp": (_weighted(ad.exp), [a]),
        "log": (_weighted(ad.log), [pos]),
        "tanh": (_weighted(ad.tanh), [a]),
        "sigmoid": (_weighted(ad.sigmoid), [a]),
        "square": (_weighted(ad.square), [a]),
        "relu": (_weighted(ad.relu), [away]),
        "reduce_sum": (_weighted(lambda x: ad.reduce_sum(x, axis=1)), [a]),
        "reduce_mean": (_weighted(lambda x: ad.reduce_mean(x, axis=0)), [a]),
        "reduce_max": (_weighted(lambda x: ad.reduce_max(x, axis=1)), [a]),
        "log_sum_exp": (_weighted(lambda x: ad.log_sum_exp(x, axis=1)), [a]),
        "softmax": (_weighted(lambda x: ad.softmax(x, axis=1)), [a]),
        "log_softmax": (_weighted(lambda x: ad.log_softmax(x, axis=1)), [a]),
        "matmul": (_weighted(lambda x, y: x @ y.T), [a, b]),
        "getitem": (_weighted(lambda x: x[1:, [0, 2]]), [a]),
        "gather": (_weighted(lambda x: ad.gather(x, np.array([0, 2, 2, 1]), axis=1)), [a]),
        "reshape": (_weighted(lambda x: ad.reshape(x, (4, 3))), [a]),
        "transpose": (_weighted(ad.transpose), [a]),
        "concat": (_weighted(lambda x, y: ad.concat([x, y], axis=1)), [a, b]),
        "stack": (_weighted(lambda x, y: ad.stack([x, y])), [a, b]),
        "shift": (_weighted(lambda x: ad.shift(x, 1, 0.0) + ad.shift(x, -2, 0.0)), [a]),
        "unfold": (_weighted(lambda x: ad.unfold(x, 3, 1)), [a]),
        "where_const": (_weighted(lambda x: ad.where_const(a > 0, x, 0.5)), [a]),
        "lattice_step": (_weighted(lambda x: lattice_step(x, skip, 1) + lattice_step(x, skip[::-1], -1)),
                         [row]),
        "entropy_step": (_weighted(lambda x, e: entropy_step(x, e, skip)), [row, ent]),
    }


def _loss_inputs(rng, T: int, L: int, K: int, d: int = 3):
    y = tuple(int(v) for v in rng.integers(1, L, size=K))
    while min_admissible_T(y) > T:
        y = y[:-1]
    logits = rng.normal(size=(T, L))
    logG = logits - ad._lse_value(logits, 1)
    h_t = rng.normal(size=(T, d))
    h_k = rng.normal(size=(len(y), d))
    lm = rng.normal(size=(len(y), L))
    lm = lm - ad._lse_value(lm, 1)
    return y, logG, h_t, h_k, lm


def criterion_case(kind: str, rng, T: int = 6, L: int = 4, K: int = 3, phi: float = 0.3):
    """Loss of ``kind`` as a function of (emissions, h_t, h_k, LM log-probs); gamma held fixed."""
    y, logG, h_t, h_k, lm = _loss_inputs(rng, T, L, K)
    cfg = cr.CriterionConfig(kind, phi=phi, theta=0.7, lam=0.9)
    gamma = cr.stimuli_weights_for(logG, y)
    targets = [*y[1:], 0]

    def fn(g, ht, hk, lmp):
        return cr.composite_loss(cfg, g, y, ht, hk, lmp, targets, stimuli_active=True, gamma=gamma).total

    return fn, [logG, h_t, h_k, lm]


def tiny_model(seed: int = 0, num_classes: int = 4) -> CSLRModel:
    enc = EncoderConfig(input_dim=3, conv_channels=3, kernel=5, hidden=3, state_dim=3, num_classes=num_classes)
    return CSLRModel(enc, RNNLMConfig(embed_dim=2, state_dim=3, num_classes=num_classes), seed=seed)


def model_case(kind: str, seed: int = 0, n_frames: int = 16):
    """Composite loss of a tiny model as a function of all its parameters."""
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    frames = rng.normal(size=(n_frames, model.enc_cfg.input_dim))
    y = (1, 2, 2) if kind in ("stim", "enstim") else (3, 1)
    cfg = cr.CriterionConfig(kind, phi=0.3, theta=0.7, lam=0.9)
    _, logG = model.encoder.forward(frames)
    gamma = cr.stimuli_weights_for(logG, y)

    def loss():
        h_t, logG = model.encoder.forward(frames)
        h_k, lm_lp = model.lm.forward(y)
        parts = cr.composite_loss(cfg, logG, y, h_t, h_k, lm_lp, model.lm.targets(y),
                                  stimuli_active=True, gamma=gamma)
        iso = -model.encoder.isolated_forward(frames)[1]
        return parts.total + iso

    return model, loss


def check_model(kind: str, seed: int = 0, eps: float = FD_EPS) -> dict[str, float]:
    model, loss = model_case(kind, seed)
    model.params.zero_grad()
    with ad.Tape():
        out = loss()
    ad.backward(out)
    errs = {}
    for name, p in model.params.items():
        num = numeric_grad(lambda: float(loss().value), p.value, eps)
        errs[name] = rel_error(p.grad, num)
    return errs


def check_gru(seed: int = 0) -> float:
    from .models import gru_sequence

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 6))
    W = rng.normal(size=(2, 6)) * 0.5
    b = rng.normal(size=6) * 0.1
    err = 0.0
    for rev in (False, True):
        err = max(err, check_function(_weighted(lambda xp, w, bb: gru_sequence(xp, w, bb, rev)), [x, W, b]))
    return err


def closed_form_error(seed: int = 0, T: int = 6, L: int = 5, K: int = 3) -> float:
    """Relative deviation of the autodiff CTC gradient (w.r.t. linear probabilities) from the closed form."""
    rng = np.random.default_rng(seed)
    y, logG, *_ = _loss_inputs(rng, T, L, K)
    probs = ad.Tensor(np.exp(logG), requires_grad=True)
    with ad.Tape():
        loss = ctc_loss(ad.log(probs), y)
    ad.backward(loss)
    return rel_error(probs.grad, ctc_grad_closed_form(probs.value, y))


@dataclass
class GradReport:
    entries: dict[str, float] = field(default_factory=dict)
    tolerance: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, err: float, tol: float = GRAD_TOL) -> None:
        self.entries[name] = err
        self.tolerance[name] = tol

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.entries.items() if not v < self.tolerance[k]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def by_loss(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for k, v in self.entries.items():
            if k.startswith(("loss:", "model:")):
                kind = k.split(":")[1]
                out[kind] = max(out.get(kind, 0.0), v)
        return out


def run_gradcheck(seed: int = 0, T: int = 6, L: int = 4, K: int = 3, models: bool = True) -> GradReport:
    """All gradient suites: primitives, the fused GRU, each criterion, tiny models, the closed form."""
    rng = np.random.default_rng(seed)
    rep = GradReport()
    for name, (fn, inputs) in op_cases(rng).items():
        rep.add(f"op:{name}", check_function(fn, inputs))
    rep.add("op:gru_sequence", check_gru(seed))
    for kind in cr.KINDS:
        fn, inputs = criterion_case(kind, rng, T, L, K)
        rep.add(f"loss:{kind}", check_function(fn, inputs))
    if models:
        for kind in cr.KINDS:
            errs = check_model(kind, seed)
            rep.add(f"model:{kind}", max(errs.values()))
    rep.add("closed_form:ctc", closed_form_error(seed, T, L + 1, K), tol=1e-10)
    return rep


# ---------------------------------------------------------------- oracle


@dataclass
class OracleTrial:
    index: int
    seed: int
    T: int
    L: int
    y: tuple[int, ...]
    deviations: dict[str, float]


ORACLE_TOL = {
    "p": 1e-9,  # relative
    "H": 1e-8,
    "alpha": 1e-9,  # relative, per entry
    "beta": 1e-9,
    "gamma": 1e-9,
    "t_invariance": 1e-9,  # relative
    "forced": 1e-9,  # relative, best-path probability
    "beam": 0.0,  # mismatching labelings
    "greedy": 0.0,
}


def random_instance(rng: np.random.Generator, max_T: int = 8, max_L: int = 4, max_K: int = 3):
    T = int(rng.integers(1, max_T + 1))
    L = int(rng.integers(2, max_L + 1))
    while True:
        K = int(rng.integers(1, max_K + 1))
        y = tuple(int(v) for v in rng.integers(1, L, size=K))
        if min_admissible_T(y) <= T:
            break
    logits = rng.normal(size=(T, L)) * rng.uniform(0.5, 3.0)
    return logits - ad._lse_value(logits, 1), y


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def _max_rel(a: np.ndarray, b: np.ndarray) -> float:
    """Element-wise relative deviation; an entry that is zero in one array must be zero in both."""
    scale = np.maximum(np.abs(a), np.abs(b))
    nz = scale > 0
    return float((np.abs(a - b)[nz] / scale[nz]).max(initial=0.0))


def _max_abs(a, b) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).max(initial=0.0))


def compare_instance(logG: np.ndarray, y, budget: int = oracle.DEFAULT_BUDGET) -> dict[str, float]:
    """Deviations of every DP quantity from its enumeration counterpart on one instance."""
    G = np.exp(logG)
    T, L = G.shape
    dev = {}
    p_dp = float(np.exp(ctc_log_prob(logG, y).value))
    p_en = oracle.prob_by_enumeration(G, y, budget)
    dev["p"] = _rel(p_dp, p_en)
    _, H = cr.ctc_and_entropy(logG, y)
    dev["H"] = abs(float(H.value) - oracle.entropy_by_enumeration(G, y, budget))
    la, lb, _ = lattices(logG, y)
    a_def, b_def = oracle.alpha_beta_by_definition(G, y, budget)
    dev["alpha"] = _max_rel(np.exp(la), a_def)
    dev["beta"] = _max_rel(np.exp(lb), b_def)
    dev["gamma"] = _max_abs(cr.stimuli_weights_for(logG, y), oracle.gamma_by_definition(G, y, budget))
    dev["t_invariance"] = max(_rel(posterior_at(logG, y, t), p_en) for t in range(1, T + 1))
    path, _ = forced_alignment(logG, y)
    _, best_p = oracle.best_path_in(G, y, budget)
    dev["forced"] = _rel(float(np.prod(G[np.arange(T), path])), best_p)
    if L <= 3 and T <= 6:
        width = sum((L - 1) ** k for k in range(T + 1))
        best, _ = oracle.best_labeling_by_enumeration(G, budget)
        dev["beam"] = float(prefix_beam_decode(logG, width).labels != best)
    dev["greedy"] = float(prefix_beam_decode(logG, 1).labels != greedy_decode(logG).labels)
    return dev


@dataclass
class OracleReport:
    trials: list[OracleTrial]
    skipped: list[str]
    seconds: float

    def max_deviation(self) -> dict[str, float]:
        out = {k: 0.0 for k in ORACLE_TOL}
        for tr in self.trials:
            for k, v in tr.deviations.items():
                out[k] = max(out[k], v)
        return out

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_deviation().items() if v > ORACLE_TOL[k]]

    @property
    def passed(self) -> bool:
        return not self.failures


def run_oracle(trials: int = 200, budget: int = oracle.DEFAULT_BUDGET, seed: int = 0,
               max_T: int = 8, max_L: int = 4, max_K: int = 3) -> OracleReport:
    """Randomized DP-vs-enumeration comparison; instances over ``budget`` paths are skipped."""
    t0 = time.perf_counter()
    done, skipped = [], []
    for i in range(trials):
        trial_seed = seed * 1_000_003 + i
        logG, y = random_instance(np.random.default_rng(trial_seed), max_T, max_L, max_K)
        T, L = logG.shape
        if L**T > budget:
            skipped.append(f"trial {i} (seed {trial_seed}, T={T}, L={L}): {L}^{T} paths exceed budget {budget}")
            continue
        done.append(OracleTrial(i, trial_seed, T, L, y, compare_instance(logG, y, budget)))
    return OracleReport(done, skipped, time.perf_counter() - t0)


# ---------------------------------------------------------------- bench


@dataclass
class BenchCase:
    name: str
    T: int
    K: int
    L: int


BENCH_CASES = (
    BenchCase("gsl", 62, 20, 311),
    BenchCase("gsl_2T", 124, 20, 311),
    BenchCase("raw", 250, 20, 311),
)


def _bench_once(kind: str, logits: np.ndarray, y) -> float:
    x = ad.Tensor(logits, requires_grad=True)
    t0 = time.perf_counter()
    with ad.Tape():
        logG = ad.log_softmax(x, axis=1)
        loss = ctc_loss(logG, y) if kind == "ctc" else cr.enctc_loss(logG, y, 0.2)
    ad.backward(loss)
    return time.perf_counter() - t0


def run_bench(cases: Sequence[BenchCase] = BENCH_CASES, reps: int = 20, seed: int = 0,
              kinds: Sequence[str] = ("ctc", "enctc")) -> list[dict]:
    """Loss+gradient latency in ms (median and p95) per size and criterion."""
    rng = np.random.default_rng(seed)
    rows = []
    for case in cases:
        logits = rng.normal(size=(case.T, case.L))
        y = tuple(int(v) for v in rng.integers(1, case.L, size=case.K))
        for kind in kinds:
            _bench_once(kind, logits, y)  # warm-up
            times = np.array([_bench_once(kind, logits, y) for _ in range(reps)]) * 1e3
            rows.append({
                "case": case.name, "T": case.T, "K": case.K, "L": case.L, "criterion": kind,
                "reps": reps, "median_ms": float(np.median(times)), "p95_ms": float(np.percentile(times, 95)),
            })
    return rows


def iter_small_instances(max_T: int = 6, max_L: int = 3, seed: int = 0):
    """Random emission matrices for every (T, L) with ``T <= max_T`` and ``2 <= L <= max_L``."""
    rng = np.random.default_rng(seed)
    for T, L in itertools.product(range(1, max_T + 1), range(2, max_L + 1)):
        logits = rng.normal(size=(T, L)) * rng.uniform(0.5, 3.0)
        yield logits - ad._lse_value(logits, 1)
