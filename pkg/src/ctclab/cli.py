"""Command line entry point: ``ctclab {gen,train,eval,align,gradcheck,oracle,bench}``.

Exit codes: 0 success, 1 a verification failed, 2 bad input (config,
dataset or checkpoint).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import autodiff as ad
from .checks import BENCH_CASES, run_bench, run_gradcheck, run_oracle
from .models import BadCheckpoint
from .synthgen import GenConfig, InvalidConfig, MissingDataset, generate, read_split, write_dataset
from .train import ConfigError, RunConfig, align_records, evaluate, load_checkpoint, run_training

log = logging.getLogger("ctclab")


class BadInput(Exception):
    pass


def load_config(path: str | None) -> dict:
    """Flat key/value mapping from a YAML or JSON file (JSON is valid YAML)."""
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise BadInput(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise BadInput(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise BadInput(f"config {path} must be a mapping of keys to values")
    nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
    if nested:
        raise BadInput(f"config must be flat; nested value under key(s): {', '.join(map(str, nested))}")
    return data


def _emit(obj, out: Path | None = None, name: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out is not None and name:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.pop("seed", 0))
    cfg.pop("seed", None)
    try:
        gen = GenConfig.from_dict(cfg)
    except (InvalidConfig, TypeError) as exc:
        raise BadInput(str(exc)) from exc
    ds = generate(gen, seed)
    manifest = write_dataset(ds, args.out)
    _emit({"out": str(args.out), "manifest": manifest})
    return 0


_TRAIN_FLAGS = {
    "data": "data", "seed": "seed", "out": "out", "criterion": "criterion", "phi": "phi",
    "theta": "theta", "lam": "lam", "pretrain": "pretrain", "stim_activate": "stim_activate",
    "max_epochs": "max_epochs", "lr": "lr", "eval_beam": "eval_beam",
}


def train_config(args) -> RunConfig:
    d = load_config(args.config)
    for attr, key in _TRAIN_FLAGS.items():
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    try:
        return RunConfig.from_dict(d)
    except (ConfigError, ValueError, TypeError) as exc:
        raise BadInput(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = train_config(args)
    final = run_training(cfg)
    _emit({"out": cfg.out, "test": final})
    return 0


def _sentence_record(r) -> dict:
    return {"id": r.id, "reference": r.reference, "hypothesis": r.hypothesis,
            "S": r.S, "D": r.D, "I": r.I, "N": r.N}


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = read_split(args.data, args.split)
    ev = evaluate(model, samples, args.beam)
    summary = {k: v for k, v in ev.items() if k != "sentences"}
    summary.update(split=args.split, beam=args.beam, sentences=len(samples))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / f"eval_{args.split}.jsonl").open("w") as f:
            for r in ev["sentences"]:
                f.write(json.dumps(_sentence_record(r), sort_keys=True) + "\n")
    _emit(summary, Path(args.out) if args.out else None, f"eval_{args.split}_summary.json")
    return 0


def cmd_align(args) -> int:
    from .synthgen import read_vocab

    vocab = read_vocab(Path(args.data) / "vocab.json")
    samples = read_split(args.data, args.split, vocab)
    model = None if args.gold else load_checkpoint(args.checkpoint)
    records, summary = align_records(model, samples, vocab, use_gold=args.gold)
    summary["split"] = args.split
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / f"align_{args.split}.jsonl").open("w") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    _emit(summary, Path(args.out) if args.out else None, f"align_{args.split}_summary.json")
    return 0


def cmd_gradcheck(args) -> int:
    def run():
        return run_gradcheck(args.seed, args.T, args.L, args.K, models=not args.no_models)

    if args.inject_fault:
        with ad.inject_fault(args.inject_fault, -1.0):
            rep = run()
    else:
        rep = run()
    report = {
        "passed": rep.passed,
        "failures": rep.failures,
        "max_rel_error_per_loss": rep.by_loss(),
        "entries": rep.entries,
        "injected_fault": args.inject_fault,
    }
    _emit(report, Path(args.out) if args.out else None, "gradcheck.json")
    for name in rep.failures:
        print(f"FAIL {name}: max relative error {rep.entries[name]:.3e}", file=sys.stderr)
    return 0 if rep.passed else 1


def cmd_oracle(args) -> int:
    if args.budget < 1:
        raise BadInput("budget must be >= 1")
    rep = run_oracle(args.trials, args.budget, args.seed)
    for note in rep.skipped:
        print(f"skipped {note}", file=sys.stderr)
    report = {
        "passed": rep.passed,
        "failures": rep.failures,
        "max_deviation": rep.max_deviation(),
        "trials_run": len(rep.trials),
        "trials_skipped": len(rep.skipped),
        "seconds": rep.seconds,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "oracle_trials.jsonl").open("w") as f:
            for tr in rep.trials:
                f.write(json.dumps(asdict(tr), sort_keys=True) + "\n")
    _emit(report, Path(args.out) if args.out else None, "oracle.json")
    return 0 if rep.passed else 1


def cmd_bench(args) -> int:
    cases = [c for c in BENCH_CASES if not args.sizes or c.name in args.sizes]
    if not cases:
        raise BadInput(f"unknown size(s) {args.sizes}; choose from {[c.name for c in BENCH_CASES]}")
    rows = run_bench(cases, args.reps, args.seed)
    _emit({"rows": rows}, Path(args.out) if args.out else None, "bench.json")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctclab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--config", help="flat YAML/JSON file; flags override its values")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="pretrain (optional) and train with a criterion")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--criterion", choices=["ctc", "enctc", "stim", "enstim"])
    sp.add_argument("--phi", type=float)
    sp.add_argument("--theta", type=float)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--pretrain", help="none | isolated | uniform | forced:<checkpoint>")
    sp.add_argument("--stim-activate", dest="stim_activate", help="epoch number, plateau or auto")
    sp.add_argument("--epochs", dest="max_epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--beam", dest="eval_beam", type=int, help="beam width for validation/test decoding")
    sp.set_defaults(func=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "WER report with S/D/I breakdown"),
                          ("align", cmd_align, "alignment records and quality summary")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--checkpoint")
        sp.add_argument("--data", required=True)
        sp.add_argument("--split", default="test", choices=["train", "val", "test"])
        if name == "eval":
            sp.add_argument("--beam", type=int, default=1)
        else:
            sp.add_argument("--gold", action="store_true", help="score gold segments against themselves")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(sp, 0)
    sp.add_argument("--T", type=int, default=6)
    sp.add_argument("--L", type=int, default=4)
    sp.add_argument("--K", type=int, default=3)
    sp.add_argument("--no-models", action="store_true", help="skip the tiny-model suites")
    sp.add_argument("--inject-fault", metavar="OP", help="flip the sign of OP's gradient rule")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("oracle", help="DP quantities against brute-force enumeration")
    common(sp, 0)
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--budget", type=int, default=10**7, help="max paths enumerated per instance")
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("bench", help="loss+gradient latency")
    common(sp, 0)
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--sizes", nargs="*", help=f"subset of {[c.name for c in BENCH_CASES]}")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command in ("eval", "align") and not args.checkpoint and not getattr(args, "gold", False):
        print("error: --checkpoint is required", file=sys.stderr)
        return 2
    if args.command in ("gen",) and not args.out:
        print("error: --out is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (BadInput, MissingDataset, BadCheckpoint, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
