"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The experimental criteria (5-7) train real runs on the default synthetic
benchmark and take tens of minutes on one core. Reports land in
``$CTCLAB_ACCEPT_DIR`` (default: a pytest temp dir).
"""

import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ctclab import oracle
from ctclab.checks import BENCH_CASES, iter_small_instances, run_bench, run_gradcheck, run_oracle
from ctclab.decode import aggregate_wer, greedy_decode, prefix_beam_decode, wer
from ctclab.experiments import compare_criteria, criterion_margin, first_epoch_wer, rank_pretraining
from ctclab.synthgen import GenConfig, generate, write_dataset
from ctclab.train import RunConfig, run_training

SEEDS = (0, 1, 2, 3, 4)
PEAK_EPOCHS = 10
RANK_EPOCHS = 10
RANK_SEEDS = (0, 1, 2)


def report(request, number, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
    with request.config.pluginmanager.get_plugin("capturemanager").global_and_fixture_disabled():
        print("\n" + line, flush=True)
    return ok


@pytest.fixture(scope="module")
def accept_dir(tmp_path_factory):
    env = os.environ.get("CTCLAB_ACCEPT_DIR")
    path = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="module")
def default_data(accept_dir):
    d = accept_dir / "data_default"
    if not (d / "manifest.json").exists():
        write_dataset(generate(GenConfig(), 0), d)
    return d


@pytest.fixture(scope="module")
def si_data(accept_dir):
    d = accept_dir / "data_si"
    if not (d / "manifest.json").exists():
        write_dataset(generate(GenConfig(split_mode="SI"), 0), d)
    return d


def test_c1_oracle_equivalence(request):
    t0 = time.perf_counter()
    rep = run_oracle(200, seed=0)
    secs = time.perf_counter() - t0
    ok = rep.passed and secs < 60 and len(rep.trials) > 0
    dev = rep.max_deviation()
    detail = f"{len(rep.trials)} trials, {len(rep.skipped)} skipped, {secs:.1f}s, " + \
        ", ".join(f"{k}={v:.1e}" for k, v in dev.items())
    assert report(request, 1, "oracle equivalence", ok, detail), rep.failures


def test_c2_gradient_gate(request):
    t0 = time.perf_counter()
    rep = run_gradcheck(seed=0)
    secs = time.perf_counter() - t0
    by_loss = rep.by_loss()
    ok = rep.passed and secs < 120 and rep.entries["closed_form:ctc"] < 1e-10
    worst = max(v for k, v in rep.entries.items() if not k.startswith("closed_form"))
    detail = f"max FD rel error {worst:.1e} (< 1e-4), closed form {rep.entries['closed_form:ctc']:.1e} " \
             f"(< 1e-10), {secs:.1f}s; per loss " + ", ".join(f"{k}={v:.1e}" for k, v in by_loss.items())
    assert report(request, 2, "gradient gate", ok, detail), rep.failures


def test_c3_decoder_exactness(request):
    checked = mismatches = greedy_mismatch = 0
    for seed in range(5):
        for lp in iter_small_instances(max_T=6, max_L=3, seed=seed):
            T, L = lp.shape
            width = sum((L - 1) ** k for k in range(T + 1))
            best, _ = oracle.best_labeling_by_enumeration(np.exp(lp))
            mismatches += prefix_beam_decode(lp, width).labels != best
            greedy_mismatch += prefix_beam_decode(lp, 1).labels != greedy_decode(lp).labels
            checked += 1
    ok = mismatches == 0 and greedy_mismatch == 0
    detail = f"{checked} instances (T<=6, L<=3): {mismatches} beam/enumeration mismatches, " \
             f"{greedy_mismatch} width-1/greedy mismatches"
    assert report(request, 3, "decoder exactness", ok, detail)


def test_c4_wer_suite(request):
    a = wer("ABCD", "AXC")
    b = wer("ABC", "ABC")
    c = wer("A", "BC")
    hand = (a.S, a.D, a.I, a.wer) == (1, 1, 0, 0.5) and b.wer == 0.0 and (c.S, c.I, c.wer) == (1, 1, 2.0)
    rng = np.random.default_rng(0)
    refs = [tuple(rng.integers(1, 6, size=rng.integers(1, 8))) for _ in range(50)]
    hyps = [tuple(rng.integers(1, 6, size=rng.integers(0, 8))) for _ in range(50)]
    ops = [wer(r, h) for r, h in zip(refs, hyps)]
    recomputed = sum(o.S + o.D + o.I for o in ops) / sum(len(r) for r in refs)
    agg_ok = aggregate_wer(ops) == recomputed
    ok = hand and agg_ok
    assert report(request, 4, "WER suite", ok, f"hand examples {'exact' if hand else 'WRONG'}, "
                  f"aggregate {aggregate_wer(ops):.6f} vs recomputed {recomputed:.6f}")


@pytest.mark.slow
def test_c5_peakiness(request, default_data, accept_dir):
    base = RunConfig(data=str(default_data), out="", max_epochs=PEAK_EPOCHS)
    rep = compare_criteria(base, {"ctc": {"criterion": "ctc"}, "enctc": {"criterion": "enctc", "phi": 0.2}},
                           SEEDS, accept_dir / "peakiness", "peakiness")
    ctc, en = rep["runs"]["ctc"]["peakiness"], rep["runs"]["enctc"]["peakiness"]
    wins = sum(e < c for e, c in zip(en, ctc))
    detail = f"EnCTC(0.2) lower in {wins}/5 seeds after {PEAK_EPOCHS} epochs; CTC " + \
        " ".join(f"{v:.3f}" for v in ctc) + " | EnCTC " + " ".join(f"{v:.3f}" for v in en)
    assert report(request, 5, "peakiness", wins == 5, detail)


@pytest.mark.slow
def test_c6_criterion_ordering(request, default_data, accept_dir):
    base = RunConfig(data=str(default_data), out="")
    rep = compare_criteria(base, {"ctc": {"criterion": "ctc"}, "enstim": {"criterion": "enstim"}},
                           SEEDS, accept_dir / "ordering", "ordering")
    rep = criterion_margin(rep, "enstim", "ctc")
    (accept_dir / "ordering" / "ordering.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    m = rep["mean_wer"]
    ok = m["enstim"] <= m["ctc"] and rep["seconds"] < 7200
    detail = f"mean test WER EnStim {m['enstim']:.4f} vs CTC {m['ctc']:.4f}, margin " \
             f"{rep['margin']['value']:+.4f} (test errors CTC {sum(rep['runs']['ctc']['errors'])}, EnStim " \
             f"{sum(rep['runs']['enstim']['errors'])}), {rep['seconds'] / 60:.1f} min; per seed CTC " + \
             " ".join(f"{v:.4f}" for v in rep["runs"]["ctc"]["wer"]) + " | EnStim " + \
             " ".join(f"{v:.4f}" for v in rep["runs"]["enstim"]["wer"])
    assert report(request, 6, "criterion ordering", ok, detail)


@pytest.mark.slow
def test_c7_pretraining(request, default_data, si_data, accept_dir):
    base = RunConfig(data=str(default_data), out="")
    start = first_epoch_wer(base, ["none", "isolated"], SEEDS, accept_dir / "pretrain_start")
    none, iso = start["epoch1_val_wer"]["none"], start["epoch1_val_wer"]["isolated"]
    wins = sum(i < n for i, n in zip(iso, none))
    si = replace(base, data=str(si_data), max_epochs=RANK_EPOCHS)
    rank = rank_pretraining(si, ["isolated", "uniform", "none"], RANK_SEEDS, accept_dir / "pretrain_rank")
    ok = wins == 5 and rank["ranking"][0] == "isolated"
    detail = f"epoch-1 val WER isolated < none in {wins}/5 seeds (none " + " ".join(f"{v:.3f}" for v in none) + \
        " | isolated " + " ".join(f"{v:.3f}" for v in iso) + f"); SI ranking after {RANK_EPOCHS} epochs: " + \
        ", ".join(f"{s} {rank['mean_wer'][s]:.4f}" for s in rank["ranking"])
    assert report(request, 7, "pretraining", ok, detail)


def test_c8_performance(request):
    rows = run_bench([c for c in BENCH_CASES if c.name == "gsl"], reps=20)
    ms = {r["criterion"]: r["median_ms"] for r in rows}
    ratio = ms["enctc"] / ms["ctc"]
    ok = ms["ctc"] < 100 and ratio <= 3
    detail = f"GSL size CTC median {ms['ctc']:.1f} ms (< 100), EnCTC {ms['enctc']:.1f} ms, ratio {ratio:.2f} (<= 3)"
    assert report(request, 8, "performance", ok, detail)


def test_c9_determinism(request, small_data_dir, tmp_path):
    cfg = RunConfig(data=str(small_data_dir), out=str(tmp_path / "a"), criterion="enstim", max_epochs=3,
                    stim_activate="2", conv_channels=8, hidden=8, state_dim=8, embed_dim=4, lr=3e-3)
    run_training(cfg)
    run_training(replace(cfg, out=str(tmp_path / "b")))
    a = (tmp_path / "a" / "epochs.jsonl").read_bytes()
    b = (tmp_path / "b" / "epochs.jsonl").read_bytes()
    ok = a == b
    assert report(request, 9, "determinism", ok, f"epoch reports byte-identical: {ok} ({len(a)} bytes)")
