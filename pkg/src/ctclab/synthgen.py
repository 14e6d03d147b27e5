"""Synthetic continuous gloss streams with gold alignments.

Each gloss has a prototype feature vector; a sentence is a bigram-grammar
gloss sequence rendered as frames: prototype (under a per-signer affine
style) plus Gaussian noise, with linearly interpolated transition frames
between glosses. All randomness comes from one seeded generator.

On-disk layout (``write_dataset``)::

    vocab.json       {"blank": "<b>", "labels": ["<b>", "G00", ...]}  (id = index)
    manifest.json    format tag, seed, config echo, split counts + sha256
    {train,val,test}.jsonl   one sample per line:
        {"id", "signer_style", "glosses": [names],
         "segments": [[start, end, name], ...],   # 0-based inclusive frames
         "frames": [[x_1 .. x_d], ...]}           # 9 significant digits
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctc import Vocabulary, min_admissible_T
from .decode import Segment

FORMAT = "ctclab-synth/1"
SPLITS = ("train", "val", "test")


class InvalidConfig(ValueError):
    pass


@dataclass
class GenConfig:
    num_glosses: int = 20
    dim: int = 16
    min_len: int = 3
    max_len: int = 8
    dur_min: int = 4
    dur_max: int = 10
    trans_min: int = 0
    trans_max: int = 3
    noise: float = 0.3
    num_styles: int = 7
    style_strength: float = 0.25
    num_sentences: int = 1250
    split_mode: str = "SD"
    grammar_concentration: float = 0.3
    end_prob: float = 0.4
    downsample: int = 4

    def validate(self) -> "GenConfig":
        checks = [
            (self.num_glosses >= 2, "num_glosses must be >= 2"),
            (self.dim >= 1, "dim must be >= 1"),
            (1 <= self.min_len <= self.max_len, "need 1 <= min_len <= max_len"),
            (self.dur_min >= max(2, self.downsample), "dur_min must cover one prediction step (>= downsample, >= 2)"),
            (self.dur_min <= self.dur_max, "need dur_min <= dur_max"),
            (0 <= self.trans_min <= self.trans_max, "need 0 <= trans_min <= trans_max"),
            (self.noise >= 0, "noise must be >= 0"),
            (self.style_strength >= 0, "style_strength must be >= 0"),
            (self.num_styles >= 1, "num_styles must be >= 1"),
            (self.num_sentences >= 3, "num_sentences must be >= 3"),
            (self.split_mode in ("SD", "SI"), "split_mode must be SD or SI"),
            (self.split_mode == "SD" or self.num_styles >= 2, "SI mode needs >= 2 signer styles"),
            (self.grammar_concentration > 0, "grammar_concentration must be > 0"),
            (0 < self.end_prob < 1, "end_prob must be in (0, 1)"),
            (self.downsample >= 1, "downsample must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidConfig(msg)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown generator config key(s): {', '.join(unknown)}")
        return cls(**d).validate()


@dataclass
class GlossPrototype:
    gloss: int
    mean: np.ndarray
    dur_min: int
    dur_max: int


@dataclass
class GrammarModel:
    start: np.ndarray  # V
    transitions: np.ndarray  # V x (V + 1); last column is end-of-sentence


@dataclass
class SentenceSample:
    id: str
    frames: np.ndarray  # N x d
    glosses: tuple[int, ...]
    segments: list[Segment]
    signer_style: int

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass
class Dataset:
    vocab: Vocabulary
    splits: dict[str, list[SentenceSample]]
    config: GenConfig
    seed: int
    manifest: dict = field(default_factory=dict)
    # generator internals; only present on freshly generated datasets
    prototypes: list[GlossPrototype] | None = None
    grammar: GrammarModel | None = None
    styles: list | None = None


def _round9(a: np.ndarray) -> np.ndarray:
    """Round to what the 9-significant-digit file rendering stores."""
    flat = [float(f"{v:.9g}") for v in a.ravel().tolist()]
    return np.array(flat, dtype=np.float64).reshape(a.shape)


def _make_world(cfg: GenConfig, rng: np.random.Generator):
    V, d = cfg.num_glosses, cfg.dim
    protos = []
    means = rng.normal(size=(V, d))
    span = cfg.dur_max - cfg.dur_min
    for v in range(V):
        lo = int(rng.integers(cfg.dur_min, cfg.dur_min + span // 2 + 1))
        hi = int(rng.integers(lo, cfg.dur_max + 1))
        protos.append(GlossPrototype(v + 1, means[v], lo, hi))
    start = rng.dirichlet(np.full(V, cfg.grammar_concentration))
    trans = np.zeros((V, V + 1))
    trans[:, :V] = rng.dirichlet(np.full(V, cfg.grammar_concentration), size=V)
    trans[np.arange(V), np.arange(V)] = 0.0  # no immediate gloss repeats
    trans[:, :V] *= (1.0 - cfg.end_prob) / trans[:, :V].sum(axis=1, keepdims=True)
    trans[:, V] = cfg.end_prob
    styles = []
    for _ in range(cfg.num_styles):
        A = np.eye(d) + cfg.style_strength * rng.normal(size=(d, d)) / np.sqrt(d)
        b = cfg.style_strength * rng.normal(size=d)
        styles.append((A, b))
    return protos, GrammarModel(start, trans), styles


def _sample_glosses(cfg: GenConfig, grammar: GrammarModel, rng: np.random.Generator) -> tuple[int, ...]:
    V = cfg.num_glosses
    seq = [int(rng.choice(V, p=grammar.start))]
    while len(seq) < cfg.max_len:
        row = grammar.transitions[seq[-1]].copy()
        if len(seq) < cfg.min_len:
            row[V] = 0.0
        total = row.sum()
        if total <= 0:
            row = np.ones(V + 1)
            row[seq[-1]] = 0.0
            row[V] = 0.0 if len(seq) < cfg.min_len else 1.0
            total = row.sum()
        nxt = int(rng.choice(V + 1, p=row / total))
        if nxt == V:
            break
        seq.append(nxt)
    return tuple(v + 1 for v in seq)


def _render(cfg, glosses, protos, style, rng):
    A, b = style
    blocks: list[np.ndarray] = []
    segments = []
    pos = 0
    styled = [A @ protos[g - 1].mean + b for g in glosses]
    for k, g in enumerate(glosses):
        if k > 0:
            n_tr = int(rng.integers(cfg.trans_min, cfg.trans_max + 1))
            if g == glosses[k - 1]:
                n_tr = max(n_tr, cfg.downsample)  # pause so repeats stay separable
            if n_tr:
                w = (np.arange(1, n_tr + 1) / (n_tr + 1))[:, None]
                blocks.append((1 - w) * styled[k - 1] + w * styled[k])
                pos += n_tr
        p = protos[g - 1]
        dur = int(rng.integers(p.dur_min, p.dur_max + 1))
        blocks.append(np.repeat(styled[k][None, :], dur, axis=0))
        segments.append(Segment(pos, pos + dur - 1, g))
        pos += dur
    clean = np.concatenate(blocks, axis=0)
    frames = clean + cfg.noise * rng.normal(size=clean.shape)
    return _round9(frames), segments


def generate(cfg: GenConfig, seed: int) -> Dataset:
    """Build all splits in memory; identical (cfg, seed) give identical data."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    protos, grammar, styles = _make_world(cfg, rng)
    vocab = Vocabulary.from_glosses([f"G{v:02d}" for v in range(cfg.num_glosses)])
    n_val = n_test = cfg.num_sentences // 10
    sizes = {"train": cfg.num_sentences - n_val - n_test, "val": n_val, "test": n_test}
    held = cfg.num_styles - 1
    splits: dict[str, list[SentenceSample]] = {}
    for split in SPLITS:
        samples = []
        for i in range(sizes[split]):
            if cfg.split_mode == "SI":
                style = held if split != "train" else int(rng.integers(0, held))
            else:
                style = int(rng.integers(0, cfg.num_styles))
            glosses = _sample_glosses(cfg, grammar, rng)
            frames, segments = _render(cfg, glosses, protos, styles[style], rng)
            steps = len(frames) // cfg.downsample
            assert min_admissible_T(glosses) <= steps, "generator produced an infeasible sample"
            samples.append(SentenceSample(f"{split}-{i:05d}", frames, glosses, segments, style))
        splits[split] = samples
    manifest = {"format": FORMAT, "seed": seed, "config": asdict(cfg),
                "splits": {s: {"count": len(v)} for s, v in splits.items()}}
    return Dataset(vocab, splits, cfg, seed, manifest, protos, grammar, styles)


# ---------------------------------------------------------------- derived views


def extract_isolated(samples: Sequence[SentenceSample]) -> list[tuple[np.ndarray, int, str]]:
    """One ``(frames, gloss, source id)`` instance per gold segment."""
    out = []
    for s in samples:
        for seg in s.segments:
            out.append((s.frames[seg.start : seg.end + 1], seg.gloss, s.id))
    return out


def uniform_pseudoalign(n_frames: int, glosses: Sequence[int]) -> list[Segment]:
    """Split ``n_frames`` into ``K`` contiguous blocks; the first ``N mod K`` get one extra frame."""
    from .ctc import SequenceTooShort

    K = len(glosses)
    if K < 1 or n_frames < K:
        raise SequenceTooShort(f"cannot split {n_frames} frames over {K} glosses")
    base, extra = divmod(n_frames, K)
    segs = []
    pos = 0
    for k, g in enumerate(glosses):
        n = base + (1 if k < extra else 0)
        segs.append(Segment(pos, pos + n - 1, int(g)))
        pos += n
    return segs


# ---------------------------------------------------------------- files


def _frames_text(frames: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(f"{v:.9g}" for v in row) + "]" for row in frames.tolist()) + "]"


def sample_to_line(s: SentenceSample, vocab: Vocabulary) -> str:
    head = json.dumps({
        "id": s.id,
        "signer_style": s.signer_style,
        "glosses": vocab.decode(s.glosses),
        "segments": [[seg.start, seg.end, vocab.labels[seg.gloss]] for seg in s.segments],
    })
    return head[:-1] + ', "frames": ' + _frames_text(s.frames) + "}"


def sample_from_line(line: str, vocab: Vocabulary) -> SentenceSample:
    rec = json.loads(line)
    return SentenceSample(
        id=rec["id"],
        frames=np.array(rec["frames"], dtype=np.float64),
        glosses=tuple(vocab.encode(rec["glosses"])),
        segments=[Segment(a, b, vocab.id(g)) for a, b, g in rec["segments"]],
        signer_style=int(rec["signer_style"]),
    )


def write_vocab(vocab: Vocabulary, path: Path) -> None:
    path.write_text(json.dumps({"blank": vocab.labels[0], "labels": vocab.labels}, indent=1) + "\n")


def read_vocab(path: Path) -> Vocabulary:
    return Vocabulary(json.loads(Path(path).read_text())["labels"])


def write_dataset(ds: Dataset, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_vocab(ds.vocab, out / "vocab.json")
    manifest = dict(ds.manifest)
    manifest["vocabulary"] = "vocab.json"
    split_info = {}
    for split, samples in ds.splits.items():
        text = "".join(sample_to_line(s, ds.vocab) + "\n" for s in samples)
        (out / f"{split}.jsonl").write_text(text)
        split_info[split] = {"file": f"{split}.jsonl", "count": len(samples),
                             "sha256": hashlib.sha256(text.encode()).hexdigest()}
    manifest["splits"] = split_info
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    ds.manifest = manifest
    return manifest


class MissingDataset(FileNotFoundError):
    pass


def read_split(data_dir, split: str, vocab: Vocabulary | None = None) -> list[SentenceSample]:
    d = Path(data_dir)
    path = d / f"{split}.jsonl"
    if not path.exists():
        raise MissingDataset(f"no split file {path}")
    vocab = vocab or read_vocab(d / "vocab.json")
    with path.open() as fh:
        return [sample_from_line(line, vocab) for line in fh if line.strip()]


def read_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not (d / "manifest.json").exists():
        raise MissingDataset(f"no manifest.json in {d}")
    manifest = json.loads((d / "manifest.json").read_text())
    vocab = read_vocab(d / manifest.get("vocabulary", "vocab.json"))
    splits = {s: read_split(d, s, vocab) for s in manifest["splits"]}
    cfg = GenConfig.from_dict(manifest["config"])
    return Dataset(vocab, splits, cfg, manifest["seed"], manifest)
