"""Toy trainable networks: temporal-conv + BiGRU encoder, isolated head, GRU language model.

Encoder geometry (defaults): two ``same``-padded temporal convolutions
(width 5) each followed by ReLU and non-overlapping max pooling of 2, so
``T = (N // 2) // 2``; N = 40 frames gives T = 10 steps and step ``t``
covers frames ``[4t, 4t + 3]``. The bidirectional GRU output (2H wide) is
projected with tanh to ``state_dim`` so encoder states ``h_t`` and LM states
``h_k`` share one width.

The language model uses class 0 (the blank's id) as its end-of-sentence
class and embedding row 0 as its start token, so gloss ids are shared with
the CTC vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "ctclab-ckpt/1"
END = 0


class InputTooShort(ValueError):
    pass


class EmptyTarget(ValueError):
    pass


class BadCheckpoint(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_dim: int = 16
    conv_channels: int = 32
    kernel: int = 5
    pool: int = 2
    hidden: int = 32
    bidirectional: bool = True
    state_dim: int = 32
    num_classes: int = 21  # L, blank included

    @property
    def downsample(self) -> int:
        return self.pool * self.pool

    @property
    def num_glosses(self) -> int:
        return self.num_classes - 1

    def output_length(self, n_frames: int) -> int:
        return (n_frames // self.pool) // self.pool


@dataclass
class RNNLMConfig:
    embed_dim: int = 16
    state_dim: int = 32
    num_classes: int = 21  # L' = glosses + end token


# ---------------------------------------------------------------- GRU


def gru_sequence(x_proj: Tensor, W_hh: Tensor, b_hh: Tensor, reverse: bool = False) -> Tensor:
    """Run a GRU over precomputed input projections ``x_proj`` (T x 3H).

    Gate layout is ``[reset, update, candidate]``; ``h_0 = 0``. One fused
    node on the tape; backward is hand-written BPTT.
    """
    X, W, b = x_proj.value, W_hh.value, b_hh.value
    T = X.shape[0]
    H = W.shape[0]
    order = range(T - 1, -1, -1) if reverse else range(T)
    hs = np.zeros((T, H))
    hprev = np.zeros((T, H))
    R = np.zeros((T, H))
    Z = np.zeros((T, H))
    Nn = np.zeros((T, H))
    Ghn = np.zeros((T, H))
    h = np.zeros(H)
    for t in order:
        gh = h @ W + b
        x = X[t]
        r = expit(x[:H] + gh[:H])
        z = expit(x[H : 2 * H] + gh[H : 2 * H])
        n = np.tanh(x[2 * H :] + r * gh[2 * H :])
        hprev[t] = h
        h = (1.0 - z) * n + z * h
        hs[t] = h
        R[t], Z[t], Nn[t], Ghn[t] = r, z, n, gh[2 * H :]

    def bw(G):
        dX = np.zeros_like(X)
        dgh_all = np.zeros((T, 3 * H))
        dh = np.zeros(H)
        for t in reversed(order):
            dh = dh + G[t]
            r, z, n = R[t], Z[t], Nn[t]
            dz = dh * (hprev[t] - n)
            dan = dh * (1.0 - z) * (1.0 - n * n)
            dar = dan * Ghn[t] * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dX[t, :H] = dar
            dX[t, H : 2 * H] = daz
            dX[t, 2 * H :] = dan
            dgh = dgh_all[t]
            dgh[:H] = dar
            dgh[H : 2 * H] = daz
            dgh[2 * H :] = dan * r
            dh = dh * z + W @ dgh
        return dX, hprev.T @ dgh_all, dgh_all.sum(axis=0)

    return ad.record("gru_sequence", hs, (x_proj, W_hh, b_hh), bw)


# ---------------------------------------------------------------- parameters


class ParamSet:
    """Ordered named parameters; initialized uniform in ``+-1/sqrt(fan_in)``."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        t = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise BadCheckpoint(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise BadCheckpoint(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.value = arr.copy()

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())


def _linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return x @ W + b


class Encoder:
    def __init__(self, cfg: EncoderConfig, params: ParamSet, rng: np.random.Generator):
        self.cfg = cfg
        self.params = params
        c = cfg
        params.add("conv1.W", (c.kernel * c.input_dim, c.conv_channels), c.kernel * c.input_dim, rng)
        params.add("conv1.b", (c.conv_channels,), c.kernel * c.input_dim, rng)
        params.add("conv2.W", (c.kernel * c.conv_channels, c.conv_channels), c.kernel * c.conv_channels, rng)
        params.add("conv2.b", (c.conv_channels,), c.kernel * c.conv_channels, rng)
        for d in self._directions():
            params.add(f"{d}.W_ih", (c.conv_channels, 3 * c.hidden), c.hidden, rng)
            params.add(f"{d}.b_ih", (3 * c.hidden,), c.hidden, rng)
            params.add(f"{d}.W_hh", (c.hidden, 3 * c.hidden), c.hidden, rng)
            params.add(f"{d}.b_hh", (3 * c.hidden,), c.hidden, rng)
        width = c.hidden * len(self._directions())
        params.add("proj.W", (width, c.state_dim), width, rng)
        params.add("proj.b", (c.state_dim,), width, rng)
        params.add("cls.W", (c.state_dim, c.num_classes), c.state_dim, rng)
        params.add("cls.b", (c.num_classes,), c.state_dim, rng)
        params.add("iso.W", (c.state_dim, c.num_glosses), c.state_dim, rng)
        params.add("iso.b", (c.num_glosses,), c.state_dim, rng)

    def _directions(self) -> list[str]:
        return ["gru_f", "gru_b"] if self.cfg.bidirectional else ["gru_f"]

    def trunk(self, frames) -> Tensor:
        """Shared stack: conv/pool (within-gloss) then BiGRU (across glosses) -> h_t."""
        c, p = self.cfg, self.params
        x = ad.as_tensor(frames)
        if x.ndim != 2 or x.shape[1] != c.input_dim:
            raise ad.ShapeMismatch(f"expected N x {c.input_dim} frames, got {x.shape}")
        if c.output_length(x.shape[0]) < 1:
            raise InputTooShort(f"{x.shape[0]} frames; need at least {c.downsample}")
        pad = c.kernel // 2
        x = ad.relu(_linear(ad.unfold(x, c.kernel, pad), p["conv1.W"], p["conv1.b"]))
        x = ad.max_pool(x, c.pool)
        x = ad.relu(_linear(ad.unfold(x, c.kernel, pad), p["conv2.W"], p["conv2.b"]))
        x = ad.max_pool(x, c.pool)
        outs = []
        for d in self._directions():
            xp = _linear(x, p[f"{d}.W_ih"], p[f"{d}.b_ih"])
            outs.append(gru_sequence(xp, p[f"{d}.W_hh"], p[f"{d}.b_hh"], reverse=d == "gru_b"))
        h = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
        return ad.tanh(_linear(h, p["proj.W"], p["proj.b"]))

    def forward(self, frames) -> tuple[Tensor, Tensor]:
        """``(h_t, log G)`` with ``log G`` of shape T x L."""
        h = self.trunk(frames)
        return h, ad.log_softmax(_linear(h, self.params["cls.W"], self.params["cls.b"]), axis=1)

    def isolated_forward(self, frames) -> Tensor:
        """Log-probabilities over glosses (class ``i`` is gloss id ``i + 1``)."""
        h = self.trunk(frames).mean(axis=0)
        return ad.log_softmax(_linear(h, self.params["iso.W"], self.params["iso.b"]), axis=0)


class RNNLM:
    def __init__(self, cfg: RNNLMConfig, params: ParamSet, rng: np.random.Generator):
        self.cfg = cfg
        self.params = params
        c = cfg
        params.add("lm.embed", (c.num_classes, c.embed_dim), 1, rng)
        params.add("lm.W_ih", (c.embed_dim, 3 * c.state_dim), c.state_dim, rng)
        params.add("lm.b_ih", (3 * c.state_dim,), c.state_dim, rng)
        params.add("lm.W_hh", (c.state_dim, 3 * c.state_dim), c.state_dim, rng)
        params.add("lm.b_hh", (3 * c.state_dim,), c.state_dim, rng)
        params.add("lm.out.W", (c.state_dim, c.num_classes), c.state_dim, rng)
        params.add("lm.out.b", (c.num_classes,), c.state_dim, rng)

    def forward(self, y: Sequence[int]) -> tuple[Tensor, Tensor]:
        """Teacher-forced pass over ``(start, y_1 .. y_K)``.

        Returns ``h_k`` (K x state_dim, the state after gloss k) and the
        next-gloss log-probabilities predicted from each ``h_k``.
        """
        if len(y) == 0:
            raise EmptyTarget("language model needs at least one gloss")
        p = self.params
        ids = np.concatenate([[0], np.asarray(y, dtype=np.intp)])
        emb = ad.gather(p["lm.embed"], ids, axis=0)
        states = gru_sequence(_linear(emb, p["lm.W_ih"], p["lm.b_ih"]), p["lm.W_hh"], p["lm.b_hh"])
        h_k = states[1:]
        logits = _linear(h_k, p["lm.out.W"], p["lm.out.b"])
        return h_k, ad.log_softmax(logits, axis=1)

    @staticmethod
    def targets(y: Sequence[int]) -> list[int]:
        """Class each prediction row should hit: ``y_2 .. y_K`` then end."""
        return [int(v) for v in y[1:]] + [END]

    def log_prob(self, prefix: Sequence[int], v: int) -> float:
        """``log P(v | prefix)`` for decoding-time fusion; ``v = 0`` is end."""
        if not prefix:
            # the model never predicts the first gloss; stay neutral
            return 0.0
        _, lp = self.forward(prefix)
        return float(lp.value[-1, v])


class CSLRModel:
    """Encoder and language model sharing one parameter set."""

    def __init__(self, enc_cfg: EncoderConfig, lm_cfg: RNNLMConfig | None = None, seed: int = 0):
        if lm_cfg is None:
            lm_cfg = RNNLMConfig(state_dim=enc_cfg.state_dim, num_classes=enc_cfg.num_classes)
        if lm_cfg.state_dim != enc_cfg.state_dim:
            raise ValueError("LM state width must equal encoder state width")
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        self.encoder = Encoder(enc_cfg, self.params, rng)
        self.lm = RNNLM(lm_cfg, self.params, rng)

    @property
    def enc_cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    @property
    def lm_cfg(self) -> RNNLMConfig:
        return self.lm.cfg

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"format": CHECKPOINT_FORMAT, "encoder": asdict(self.enc_cfg),
                "lm": asdict(self.lm_cfg), "seed": self.seed, "extra": extra or {}}
        arrays = {f"param/{k}": v for k, v in self.params.state().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "CSLRModel":
        path = Path(path)
        if not path.exists():
            raise BadCheckpoint(f"no checkpoint at {path}")
        try:
            with np.load(path, allow_pickle=False) as z:
                meta = json.loads(str(z["__meta__"]))
                state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        except (OSError, ValueError, KeyError) as exc:
            raise BadCheckpoint(f"unreadable checkpoint {path}: {exc}") from exc
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise BadCheckpoint(f"unsupported checkpoint format {meta.get('format')!r}")
        model = cls(EncoderConfig(**meta["encoder"]), RNNLMConfig(**meta["lm"]), meta.get("seed", 0))
        model.params.load_state(state)
        model.meta = meta
        return model
