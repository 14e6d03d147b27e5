"""Training driver: pretraining schemes, criterion training, evaluation and alignment."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import criteria as cr
from .decode import (
    EditOps,
    Segment,
    aggregate_wer,
    alignment_quality,
    forced_alignment,
    frame_labels,
    greedy_decode,
    path_segments,
    prefix_beam_decode,
    steps_to_frames,
    wer,
)
from .models import BadCheckpoint, CSLRModel, EncoderConfig, RNNLMConfig
from .synthgen import SentenceSample, extract_isolated, read_dataset, read_split, uniform_pseudoalign

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str = ""
    out: str = "runs/default"
    seed: int = 0
    # criterion
    criterion: str = "ctc"
    phi: float = 0.1
    theta: float = 0.5
    lam: float = 1.0
    keep_entropy_after_activation: bool = False
    stim_activate: str = "auto"  # "auto", "plateau" or an epoch number
    stim_patience: int = 5
    # optimisation
    lr: float = 1e-4
    lr_min: float = 1e-5
    patience: int = 5
    max_epochs: int = 40
    clip_norm: float = 5.0
    # pretraining
    pretrain: str = "none"  # none | isolated | uniform | forced:<checkpoint>
    pretrain_epochs: int = 2
    pretrain_lr: float | None = None
    # model
    conv_channels: int = 32
    hidden: int = 32
    state_dim: int = 32
    embed_dim: int = 16
    # data handling
    frame_dropout: float = 0.0  # keep ratio floor for optional temporal subsampling; 0 disables
    max_train: int | None = None
    eval_beam: int = 1

    def validate(self) -> "RunConfig":
        cr.CriterionConfig(self.criterion, self.phi, self.theta, self.lam)
        if self.stim_activate not in ("auto", "plateau"):
            try:
                if int(self.stim_activate) < 1:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"stim_activate must be auto, plateau or an epoch >= 1, got {self.stim_activate!r}")
        if not (self.pretrain in ("none", "isolated", "uniform") or self.pretrain.startswith("forced:")):
            raise ConfigError(f"unknown pretraining scheme {self.pretrain!r}")
        if self.max_epochs < 1 or self.patience < 1 or self.stim_patience < 1:
            raise ConfigError("max_epochs, patience and stim_patience must be >= 1")
        if self.lr <= 0 or self.lr_min <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.frame_dropout < 1.0:
            raise ConfigError("frame_dropout must be in [0, 1)")
        if self.eval_beam < 1:
            raise ConfigError("eval_beam must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d).validate()

    def criterion_config(self) -> cr.CriterionConfig:
        return cr.CriterionConfig(self.criterion, self.phi, self.theta, self.lam,
                                  self.keep_entropy_after_activation)


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p._grad
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p._grad for p in params if p._grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p._grad is not None:
                p._grad = p._grad * scale
    return norm


class PlateauTracker:
    """Counts epochs without improvement of a monitored value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, value: float) -> bool:
        """Record one epoch; True when ``patience`` non-improving epochs have accrued."""
        if value < self.best:
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


class LRSchedule:
    """Drop the learning rate once, at the first epoch the plateau condition holds."""

    def __init__(self, lr: float, lr_min: float, patience: int):
        self.lr = lr
        self.lr_min = lr_min
        self.tracker = PlateauTracker(patience)
        self.dropped_at: int | None = None

    def observe(self, epoch: int, val_loss: float) -> float:
        if self.tracker.update(val_loss) and self.dropped_at is None:
            self.lr = self.lr_min
            self.dropped_at = epoch
        return self.lr

    def restart(self) -> None:
        """Forget the plateau history (the monitored objective just changed)."""
        self.tracker = PlateauTracker(self.tracker.patience)


class StimuliSchedule:
    """Decides per epoch whether the stimuli terms are on; once on, they stay on.

    ``auto`` fires at ``ceil(max_epochs / 2)`` or after a validation plateau,
    whichever comes first; ``plateau`` uses only the plateau; an integer
    fires at that epoch.
    """

    def __init__(self, mode: str, max_epochs: int, patience: int):
        self.mode = mode
        self.at_epoch = None
        if mode == "auto":
            self.at_epoch = math.ceil(max_epochs / 2)
        elif mode != "plateau":
            self.at_epoch = int(mode)
        self.tracker = PlateauTracker(patience)
        self.plateaued = False
        self.active = False

    def is_active(self, epoch: int) -> bool:
        if not self.active and (self.plateaued or (self.at_epoch is not None and epoch >= self.at_epoch)):
            self.active = True
        return self.active

    def observe(self, val_loss: float) -> None:
        if self.mode != "auto" and self.mode != "plateau":
            return
        if self.tracker.update(val_loss):
            self.plateaued = True


def build_model(cfg: RunConfig, num_classes: int, input_dim: int) -> CSLRModel:
    enc = EncoderConfig(input_dim=input_dim, conv_channels=cfg.conv_channels, hidden=cfg.hidden,
                        state_dim=cfg.state_dim, num_classes=num_classes)
    lm = RNNLMConfig(embed_dim=cfg.embed_dim, state_dim=cfg.state_dim, num_classes=num_classes)
    return CSLRModel(enc, lm, seed=cfg.seed)


# ---------------------------------------------------------------- steps


def _update(model: CSLRModel, opt: Adam, loss: ad.Tensor, clip: float) -> None:
    ad.backward(loss)
    clip_grad_norm(opt.params, clip)
    opt.step()


def step_targets(labels: np.ndarray, factor: int, n_steps: int) -> np.ndarray:
    """Per-step class from per-frame labels: majority within the step window (ties to the lower id)."""
    out = np.zeros(n_steps, dtype=np.intp)
    n = len(labels)
    for t in range(n_steps):
        window = labels[t * factor : n if t == n_steps - 1 else (t + 1) * factor]
        out[t] = int(np.bincount(window).argmax())
    return out


def _frame_ce_loss(model: CSLRModel, frames: np.ndarray, labels: np.ndarray) -> ad.Tensor:
    _, logG = model.encoder.forward(frames)
    targets = step_targets(labels, model.enc_cfg.downsample, logG.shape[0])
    return -logG[np.arange(len(targets)), targets].mean()


def pretrain(model: CSLRModel, cfg: RunConfig, train: Sequence[SentenceSample], rng: np.random.Generator) -> list[dict]:
    """Run the configured pretraining scheme; returns one summary record per pretraining epoch."""
    scheme = cfg.pretrain
    if scheme == "none" or cfg.pretrain_epochs == 0:
        return []
    lr = cfg.pretrain_lr or cfg.lr
    params = list(model.params.values())
    opt = Adam(params, lr)
    reports = []
    if scheme == "isolated":
        items = extract_isolated(train)
    else:
        if scheme == "uniform":
            seg_fn = lambda s: uniform_pseudoalign(s.n_frames, s.glosses)  # noqa: E731
        else:
            teacher = CSLRModel.load(scheme.split(":", 1)[1])
            seg_fn = lambda s: forced_segments(teacher, s)  # noqa: E731
        items = [(s.frames, frame_labels(seg_fn(s), s.n_frames), s.id) for s in train]
    for epoch in range(1, cfg.pretrain_epochs + 1):
        total = 0.0
        for i in rng.permutation(len(items)):
            frames, target, _ = items[i]
            model.params.zero_grad()
            with ad.Tape():
                if scheme == "isolated":
                    loss = -model.encoder.isolated_forward(frames)[target - 1]
                else:
                    loss = _frame_ce_loss(model, frames, target)
            _update(model, opt, loss, cfg.clip_norm)
            total += loss.item()
        reports.append({"pretrain_epoch": epoch, "scheme": scheme.split(":")[0], "loss": total / len(items)})
    return reports


def forced_segments(model: CSLRModel, sample: SentenceSample) -> list[Segment]:
    """Frame segments of the forced alignment of ``sample.glosses`` under ``model``."""
    _, logG = model.encoder.forward(sample.frames)
    _, segs = forced_alignment(logG.value, sample.glosses)
    return steps_to_frames(segs, model.enc_cfg.downsample, sample.n_frames, logG.shape[0])


def _subsample(frames: np.ndarray, keep_min: float, rng: np.random.Generator, min_len: int) -> np.ndarray:
    keep = rng.uniform(keep_min, 1.0)
    n = max(min_len, int(round(len(frames) * keep)))
    if n >= len(frames):
        return frames
    idx = np.sort(rng.choice(len(frames), size=n, replace=False))
    return frames[idx]


def train_epoch(model, cfg, crit, opt, train, rng, stimuli_active: bool) -> dict[str, float]:
    sums: dict[str, float] = {}
    for i in rng.permutation(len(train)):
        s = train[i]
        frames = s.frames
        if cfg.frame_dropout > 0:
            from .ctc import min_admissible_T

            need = min_admissible_T(s.glosses) * model.enc_cfg.downsample
            frames = _subsample(frames, cfg.frame_dropout, rng, need)
        model.params.zero_grad()
        with ad.Tape():
            h_t, logG = model.encoder.forward(frames)
            if crit.uses_stimuli and stimuli_active:
                h_k, lm_lp = model.lm.forward(s.glosses)
                parts = cr.composite_loss(crit, logG, s.glosses, h_t, h_k, lm_lp,
                                          model.lm.targets(s.glosses), stimuli_active=True)
            else:
                parts = cr.composite_loss(crit, logG, s.glosses, stimuli_active=stimuli_active)
        _update(model, opt, parts.total, cfg.clip_norm)
        for k, v in parts.as_dict().items():
            sums[k] = sums.get(k, 0.0) + v
        sums["total"] = sums.get("total", 0.0) + parts.total.item()
    return {k: v / len(train) for k, v in sums.items()}


# ---------------------------------------------------------------- evaluation


@dataclass
class SentenceResult:
    id: str
    reference: list[int]
    hypothesis: list[int]
    S: int
    D: int
    I: int  # noqa: E741
    N: int

    @property
    def ops(self) -> EditOps:
        return EditOps(self.S, self.D, self.I, self.N)


def decode_sample(model: CSLRModel, frames, beam: int = 1, lm_weight: float = 0.0):
    _, logG = model.encoder.forward(frames)
    lp = logG.value
    if beam <= 1:
        return greedy_decode(lp), lp
    lm = model.lm.log_prob if lm_weight else None
    return prefix_beam_decode(lp, beam, lm=lm, lm_weight=lm_weight), lp


def evaluate(model: CSLRModel, samples: Sequence[SentenceSample], beam: int = 1, lm_weight: float = 0.0) -> dict:
    """WER with S/D/I totals, peakiness and mean CTC loss over ``samples``."""
    results = []
    peak = 0.0
    loss = 0.0
    for s in samples:
        res, lp = decode_sample(model, s.frames, beam, lm_weight)
        ops = wer(s.glosses, res.labels)
        results.append(SentenceResult(s.id, list(s.glosses), list(res.labels), ops.S, ops.D, ops.I, ops.N))
        peak += float(np.exp(lp.max(axis=1)).mean())
        loss += -float(cr.ctc_log_prob(lp, s.glosses).value)
    ops_all = [r.ops for r in results]
    return {
        "wer": aggregate_wer(ops_all),
        "S": sum(o.S for o in ops_all),
        "D": sum(o.D for o in ops_all),
        "I": sum(o.I for o in ops_all),
        "N": sum(o.N for o in ops_all),
        "peakiness": peak / len(samples),
        "ctc_loss": loss / len(samples),
        "sentences": results,
    }


def align_records(model: CSLRModel, samples: Sequence[SentenceSample], vocab, use_gold: bool = False):
    """Alignment records (gold vs predicted frame segments) and a quality summary."""
    records = []
    acc = iou = 0.0
    factor = model.enc_cfg.downsample if model is not None else 1
    for s in samples:
        if use_gold:
            pred = list(s.segments)
            argmax = frame_labels(pred, s.n_frames)
        else:
            _, logG = model.encoder.forward(s.frames)
            best = logG.value.argmax(axis=1)
            pred = steps_to_frames(path_segments(best), factor, s.n_frames, len(best))
            argmax = np.repeat(best, factor)[: s.n_frames]
            if len(argmax) < s.n_frames:
                argmax = np.concatenate([argmax, np.full(s.n_frames - len(argmax), best[-1])])
        q = alignment_quality(pred, s.segments, s.n_frames)
        acc += q.frame_accuracy
        iou += q.mean_iou
        records.append({
            "id": s.id,
            "n_frames": s.n_frames,
            "gold": [[g.start, g.end, vocab.labels[g.gloss]] for g in s.segments],
            "predicted": [[g.start, g.end, vocab.labels[g.gloss]] for g in pred],
            "frame_argmax": [vocab.labels[int(v)] for v in argmax],
            "frame_accuracy": q.frame_accuracy,
            "mean_iou": q.mean_iou,
        })
    n = max(1, len(samples))
    return records, {"frame_accuracy": acc / n, "mean_iou": iou / n, "sentences": len(samples)}


# ---------------------------------------------------------------- driver


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def run_training(cfg: RunConfig) -> dict:
    """Full run; writes epochs.jsonl, timings.jsonl, model.npz and test_report.json under ``cfg.out``.

    ``epochs.jsonl`` holds only seed-determined values (no clock readings) so
    identical runs produce identical files.
    """
    cfg.validate()
    ds = read_dataset(cfg.data)
    train = ds.splits["train"][: cfg.max_train] if cfg.max_train else ds.splits["train"]
    val, test = ds.splits["val"], ds.splits["test"]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dump(asdict(cfg)) + "\n")

    model = build_model(cfg, ds.vocab.size, ds.config.dim)
    rng = np.random.default_rng(cfg.seed)
    crit = cfg.criterion_config()
    schedule = StimuliSchedule(cfg.stim_activate, cfg.max_epochs, cfg.stim_patience)
    cr.warn_if_stimuli_from_scratch(crit, schedule.at_epoch)

    epochs_path = out / "epochs.jsonl"
    timings_path = out / "timings.jsonl"
    with epochs_path.open("w") as ef, timings_path.open("w") as tf:
        t0 = time.perf_counter()
        for rec in pretrain(model, cfg, train, rng):
            ef.write(_dump(rec) + "\n")
        tf.write(_dump({"pretrain_seconds": time.perf_counter() - t0}) + "\n")

        opt = Adam(list(model.params.values()), cfg.lr)
        lr_sched = LRSchedule(cfg.lr, cfg.lr_min, cfg.patience)
        was_active = False
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            active = crit.uses_stimuli and schedule.is_active(epoch)
            if active and not was_active:
                # switching the stimuli terms on perturbs the val loss for a few
                # epochs; that transient should not count towards the LR drop
                lr_sched.restart()
            was_active = active
            losses = train_epoch(model, cfg, crit, opt, train, rng, active)
            ev = evaluate(model, val, cfg.eval_beam)
            report = {
                "epoch": epoch,
                "lr": opt.lr,
                "stimuli_active": active,
                "loss": losses,
                "val_loss": ev["ctc_loss"],
                "val_wer": ev["wer"],
                "val_peakiness": ev["peakiness"],
            }
            ef.write(_dump(report) + "\n")
            ef.flush()
            tf.write(_dump({"epoch": epoch, "seconds": time.perf_counter() - t0}) + "\n")
            log.info("epoch %d loss %.4f val_wer %.4f peak %.3f", epoch, losses["total"], ev["wer"], ev["peakiness"])
            opt.lr = lr_sched.observe(epoch, ev["ctc_loss"])
            schedule.observe(ev["ctc_loss"])

    model.save(out / "model.npz", extra={"vocab": ds.vocab.labels, "run": asdict(cfg)})
    write_summary(out)
    ev = evaluate(model, test, cfg.eval_beam)
    final = {k: v for k, v in ev.items() if k != "sentences"}
    (out / "test_report.json").write_text(_dump(final) + "\n")
    return final


SUMMARY_COLUMNS = ("epoch", "lr", "stimuli_active", "total", "ctc", "entropy", "lm", "stimuli",
                   "val_loss", "val_wer", "val_peakiness")


def write_summary(out_dir) -> Path:
    """Tab-separated per-epoch table next to ``epochs.jsonl``; inactive components are blank."""
    path = Path(out_dir) / "summary.tsv"
    lines = ["\t".join(SUMMARY_COLUMNS)]
    for r in read_epochs(out_dir):
        row = {**r, **r["loss"]}
        lines.append("\t".join("" if row.get(c) is None else repr(row[c]) for c in SUMMARY_COLUMNS))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_epochs(out_dir) -> list[dict]:
    lines = (Path(out_dir) / "epochs.jsonl").read_text().splitlines()
    return [r for r in map(json.loads, lines) if "epoch" in r]


def load_checkpoint(path) -> CSLRModel:
    try:
        return CSLRModel.load(path)
    except BadCheckpoint:
        raise
    except Exception as exc:  # corrupt archives surface as assorted errors
        raise BadCheckpoint(f"cannot load checkpoint {path}: {exc}") from exc


def eval_split(checkpoint, data_dir, split: str, beam: int = 1) -> dict:
    model = load_checkpoint(checkpoint)
    samples = read_split(data_dir, split)
    return evaluate(model, samples, beam)
