"""Multi-run comparisons built on :func:`ctclab.train.run_training`.

Each driver trains one run per (setting, seed), writes the runs under
``out/<setting>_s<seed>`` and a JSON report at ``out/<name>.json``.
"""

from __future__ import annotations

import json
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .train import RunConfig, read_epochs, run_training


def _write(out: Path, name: str, report: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _exact_mean(errors, totals) -> float:
    return float(sum(Fraction(e, n) for e, n in zip(errors, totals)) / len(errors))


def compare_criteria(base: RunConfig, settings: dict[str, dict], seeds, out, name="criteria") -> dict:
    """Train every named setting (RunConfig overrides) for every seed.

    The report holds per-seed test WER / peakiness, their means, and wall-clock.
    Mean WER is computed exactly from the integer error counts, so two settings
    with the same errors tie exactly instead of by float summation order.
    """
    out = Path(out)
    per: dict[str, dict] = {k: {"wer": [], "errors": [], "N": [], "peakiness": [], "val_wer": []} for k in settings}
    t0 = time.perf_counter()
    for seed in seeds:
        for label, overrides in settings.items():
            cfg = replace(base, out=str(out / f"{label}_s{seed}"), seed=seed, **overrides)
            final = run_training(cfg)
            per[label]["wer"].append(final["wer"])
            per[label]["errors"].append(final["S"] + final["D"] + final["I"])
            per[label]["N"].append(final["N"])
            per[label]["peakiness"].append(final["peakiness"])
            per[label]["val_wer"].append(read_epochs(cfg.out)[-1]["val_wer"])
    report = {
        "seeds": list(seeds),
        "settings": settings,
        "runs": per,
        "mean_wer": {k: _exact_mean(v["errors"], v["N"]) for k, v in per.items()},
        "mean_peakiness": {k: float(np.mean(v["peakiness"])) for k, v in per.items()},
        "seconds": time.perf_counter() - t0,
    }
    return _write(out, name, report)


def criterion_margin(report: dict, better: str, baseline: str) -> dict:
    """Adds ``margin = mean WER(baseline) - mean WER(better)`` (positive favours ``better``)."""
    m = report["mean_wer"]
    report["margin"] = {"better": better, "baseline": baseline, "value": m[baseline] - m[better]}
    return report


def first_epoch_wer(base: RunConfig, schemes, seeds, out, name="pretrain_start") -> dict:
    """Validation WER after one training epoch, per pretraining scheme and seed."""
    out = Path(out)
    table: dict[str, list] = {s: [] for s in schemes}
    for seed in seeds:
        for scheme in schemes:
            cfg = replace(base, out=str(out / f"{scheme}_s{seed}"), seed=seed, pretrain=scheme, max_epochs=1)
            run_training(cfg)
            table[scheme].append(read_epochs(cfg.out)[0]["val_wer"])
    return _write(out, name, {"seeds": list(seeds), "epoch1_val_wer": table})


def rank_pretraining(base: RunConfig, schemes, seeds, out, name="pretrain_ranking") -> dict:
    """Mean test WER after the full budget per scheme, ranked best first."""
    rep = compare_criteria(base, {s: {"pretrain": s} for s in schemes}, seeds, out, name)
    rep["ranking"] = sorted(schemes, key=lambda s: (rep["mean_wer"][s], schemes.index(s)))
    return _write(Path(out), name, rep)
