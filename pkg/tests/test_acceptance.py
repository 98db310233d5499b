"""End-to-end acceptance suite; each test prints one PASS/FAIL line.

The two experiment runs (ERD with EOG, SSVEP with inherent noise) are the
shipped configs under ``configs/`` and are computed once per session.
"""

import json
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from oracles import best_match_corr, descent_run, gradient_errors, two_source_mixture, wilcoxon_enumeration_p

from taskdenoise import harness as hz
from taskdenoise import metrics as mt
from taskdenoise import synth as sy
from taskdenoise.decomposition import DecompConfig, decompose
from taskdenoise.nnet import model as nn
from taskdenoise.signal import Trial

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RERUN_SEEDS = (0, 7)


def _timed_run(name):
    cfg = hz.load_config(CONFIGS / f"{name}.json")
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = hz.run_experiment(cfg)
    return cfg, report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def erd_run():
    return _timed_run("erd_eog")


@pytest.fixture(scope="module")
def ssvep_run():
    return _timed_run("ssvep_inherent")


def _col(rows, *path):
    out = []
    for r in rows:
        for p in path:
            r = r[p]
        out.append(r)
    return np.array(out, dtype=float)


def test_c01_reconstruction_identity(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2024)
    shapes = [(c, t) for c in (4, 8) for t in (256, 512)]
    for method in ("pca", "svd", "ica"):
        dcfg = DecompConfig(method=method, ica_restarts=2, ica_strict=False)
        for j in range(100):
            c, t = shapes[j % len(shapes)]
            x = rng.laplace(size=(c, c)) @ rng.laplace(size=(c, t)) + 0.1 * rng.normal(size=(c, t))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                cs = decompose(Trial(x, 128.0), dcfg, j)
            worst = max(worst, np.linalg.norm(cs.components.sum(0) - x) / np.linalg.norm(x))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and dt < 30
    assert verdict("C1", ok, f"reconstruction identity: worst rel error {worst:.2e} (< 1e-9), {dt:.1f}s (< 30s)")


def test_c02_ica_source_recovery(verdict):
    t0 = time.perf_counter()
    corr = []
    for seed in range(50):
        x, s = two_source_mixture(seed)
        cs = decompose(Trial(x, 250.0), DecompConfig(method="ica"), seed)
        corr.append(best_match_corr(cs.temporal, s))
    dt = time.perf_counter() - t0
    mean = float(np.mean(corr))
    ok = mean > 0.95 and dt < 30
    assert verdict("C2", ok, f"ICA source recovery: mean |corr| {mean:.4f} (> 0.95), min {min(corr):.4f}, {dt:.1f}s (< 30s)")


def test_c03_gradient_correctness(verdict):
    t0 = time.perf_counter()
    errors = {}
    for arch in (nn.BANDPOWER_MLP, nn.COMPACT_CNN):
        errors.update({f"{arch}/{k}": v for k, v in gradient_errors(arch).items()})
    dt = time.perf_counter() - t0
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    ok = worst < 1e-4 and dt < 60
    assert verdict("C3", ok, f"finite-difference gradients: {len(errors)} blocks, worst {worst:.2e} at {name} (< 1e-4), {dt:.1f}s (< 60s)")


def test_c04_descent_monotone(verdict):
    t0 = time.perf_counter()
    worst_rise = -np.inf
    for seed in range(10):
        losses = descent_run(seed, steps=50, lr=1e-4)
        chain = [losses[0][0]]
        for before, mid, after in losses:
            # the next step starts where this one ended
            assert before == chain[-1]
            chain += [mid, after]
        worst_rise = max(worst_rise, float(np.max(np.diff(chain))))
    dt = time.perf_counter() - t0
    ok = worst_rise <= 1e-8 and dt < 300
    assert verdict("C4", ok, f"descent mode: largest per-half-step change {worst_rise:.2e} (<= 1e-8) over 10 seeds x 50 steps, {dt:.1f}s (< 300s)")


def test_c05_mixing_exactness(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    cases = [(sy.SynthConfig(paradigm="erd", trials_per_class=5, seed=1), "eog"), (sy.SynthConfig(trials_per_class=5, fs=256.0, seed=2), "emg")]
    for cfg, kind in cases:
        _, raw = sy.gen_dataset(cfg)
        for snr in (-5.0, -2.5, 0.0, 2.5, 5.0):
            con = sy.contaminate(raw, sy.NoiseSpec(kind, snr), 7)
            for x, noisy in zip(raw.data, con.noisy.data):
                worst = max(worst, abs(mt.snr_db(noisy, x) - snr))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and dt < 5
    assert verdict("C5", ok, f"SNR mixing: worst |measured - requested| {worst:.2e} dB (< 1e-9), {dt:.2f}s (< 5s)")


@pytest.mark.slow
def test_c06_task_metric_direction(erd_run, verdict):
    cfg, report, dt = erd_run
    entry = report["methods"]["ica"]
    rows = entry["per_seed"]
    gain = _col(rows, "classification", "denoised", "accuracy") - _col(rows, "classification", "baseline", "accuracy")
    test = mt.wilcoxon_signed_rank(_col(rows, "classification", "denoised", "accuracy"), _col(rows, "classification", "baseline", "accuracy"))
    assert test.p_value == entry["tests"]["accuracy_denoised_vs_baseline"]["p_value"]
    ok = len(rows) == 10 and gain.mean() >= 0.01 and test.p_value < 0.05 and dt < 1800 and not report["errors"]
    assert verdict(
        "C6",
        ok,
        f"ERD+EOG accuracy: denoised - noisy = {100 * gain.mean():+.2f} pp (>= +1), Wilcoxon p={test.p_value:.4g} (< 0.05), "
        f"{int(np.sum(gain > 0))}/10 seeds positive, {dt:.0f}s (< 1800s)",
    )


@pytest.mark.slow
def test_c07_signal_quality_direction(erd_run, verdict):
    _, report, _ = erd_run
    rows = report["methods"]["ica"]["per_seed"]
    dsnr = _col(rows, "quality", "clean", "denoised", "snr_db") - _col(rows, "quality", "clean", "baseline", "snr_db")
    lower = int(np.sum(_col(rows, "quality", "clean", "denoised", "mse") < _col(rows, "quality", "clean", "baseline", "mse")))
    ok = dsnr.mean() >= 1.0 and lower >= 8
    assert verdict("C7", ok, f"ERD+EOG quality vs clean: mean dSNR {dsnr.mean():+.2f} dB (>= +1), MSE lower in {lower}/10 seeds (>= 8)")


@pytest.mark.slow
def test_c08_random_mixing_ablation(ssvep_run, verdict):
    _, report, dt = ssvep_run
    margins = {}
    for m in ("pca", "svd", "ica"):
        rows = report["methods"][m]["per_seed"]
        margins[m] = float(np.mean(_col(rows, "classification", "denoised", "accuracy") - _col(rows, "classification", "control", "accuracy")))
    ok = all(v >= 0.02 for v in margins.values()) and dt < 1800 and not report["errors"]
    detail = ", ".join(f"{m} {100 * v:+.1f} pp" for m, v in margins.items())
    assert verdict("C8", ok, f"SSVEP selector vs random mixing: {detail} (each >= +2), {dt:.0f}s (< 1800s)")


@pytest.mark.slow
def test_c09_component_probe_trend(ssvep_run, verdict):
    _, report, _ = ssvep_run
    counts = {}
    for m in ("pca", "svd", "ica"):
        rho = [p["spearman"] for p in report["methods"][m]["probe"]]
        counts[m] = sum(r is not None and r > 0 for r in rho)
    ok = len(report["methods"]["ica"]["probe"]) == 10 and counts["ica"] >= 8
    assert verdict("C9", ok, f"probe Spearman > 0 (ICA): {counts['ica']}/10 seeds (>= 8); PCA {counts['pca']}/10, SVD {counts['svd']}/10 reported only")


@pytest.mark.slow
def test_c10_fundamental_enhancement(ssvep_run, verdict):
    _, report, _ = ssvep_run
    rows = report["methods"]["ica"]["per_seed"]
    gain = _col(rows, "spectral", "denoised", "fundamental_ratio") - _col(rows, "spectral", "baseline", "fundamental_ratio")
    up = int(np.sum(gain > 0))
    ok = up >= 8
    assert verdict("C10", ok, f"fundamental power ratio (ICA): denoised > noisy in {up}/10 seeds (>= 8), mean change {gain.mean():+.4f}")


def test_c11_wilcoxon_oracle(verdict):
    rng = np.random.default_rng(11)
    worst, done = 0.0, 0
    while done < 200:
        n = int(rng.integers(1, 13))
        a = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        b = np.round(rng.normal(size=n) * rng.uniform(0, 1), int(rng.integers(0, 3)))
        if not np.any(a - b):
            continue
        worst = max(worst, abs(mt.wilcoxon_signed_rank(a, b).p_value - wilcoxon_enumeration_p(a - b)))
        done += 1
    ok = worst < 1e-12
    assert verdict("C11", ok, f"Wilcoxon exact p vs sign enumeration: worst |diff| {worst:.1e} over 200 datasets, n <= 12 (< 1e-12)")


def _seed_payload(report, seeds):
    out = {}
    for m, e in report["methods"].items():
        out[m] = {
            "folds": [f for f in e["folds"] if f["seed"] in seeds],
            "per_seed": [r for r in e["per_seed"] if r["seed"] in seeds],
            "probe": [p for p in e["probe"] if p["seed"] in seeds],
        }
    return json.dumps(out, sort_keys=True, separators=(",", ":"), allow_nan=False)


@pytest.mark.slow
def test_c12_determinism(erd_run, ssvep_run, verdict):
    same = {}
    for name, (cfg, report, _) in (("erd_eog", erd_run), ("ssvep_inherent", ssvep_run)):
        sub = replace(cfg, seeds=RERUN_SEEDS)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            again = hz.run_experiment(sub, run_info={"started": time.time()})
        same[name] = _seed_payload(again, RERUN_SEEDS) == _seed_payload(report, RERUN_SEEDS)
    ok = all(same.values())
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items())
    assert verdict("C12", ok, f"rerun of seeds {list(RERUN_SEEDS)} vs full runs, payload bytes: {detail}")
