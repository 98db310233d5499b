import json

import numpy as np
import pytest
from click.testing import CliRunner

from taskdenoise import harness as hz
from taskdenoise import synth as sy
from taskdenoise import training as tr
from taskdenoise.cli import EXIT_DATA, EXIT_EXPERIMENT, EXIT_USAGE, main
from taskdenoise.decomposition import DecompConfig
from taskdenoise.nnet import load_params
from taskdenoise.signal import load_trialset

SMALL = ["--channels", "4", "--samples", "256", "--trials-per-class", "6"]


@pytest.fixture
def run():
    runner = CliRunner()

    def invoke(*args, code=0):
        res = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
        assert res.exit_code == code, res.output
        return res

    return invoke


@pytest.fixture
def dataset(tmp_path, run):
    path = tmp_path / "data.tdn"
    run("synth", "--paradigm", "erd", "--noise", "eog", "--snr", "-2,2", "--out", path, "--clean-out", tmp_path / "clean.tdn", *SMALL, "--seed", 3)
    return path


def test_synth_matches_library(tmp_path, dataset):
    ts = load_trialset(dataset)
    cfg = sy.SynthConfig(paradigm="erd", n_channels=4, n_samples=256, trials_per_class=6, seed=3)
    clean, raw = sy.gen_dataset(cfg)
    expect = sy.contaminate(raw, sy.NoiseSpec("eog", (-2.0, 2.0)), 3).noisy
    # samples are stored as float32
    assert ts.data.tobytes() == expect.data.astype(np.float32).astype(np.float64).tobytes()
    np.testing.assert_array_equal(ts.labels, expect.labels)
    np.testing.assert_array_equal(load_trialset(tmp_path / "clean.tdn").data, clean.data.astype(np.float32))


def test_synth_bad_snr(tmp_path, run):
    res = run("synth", "--noise", "eog", "--snr", "a,b", "--out", tmp_path / "x.tdn", code=EXIT_USAGE)
    assert "lo,hi" in res.output
    run("synth", "--noise", "eog", "--snr", "5,-5", "--out", tmp_path / "x.tdn", code=EXIT_USAGE)


def test_decompose_dump(tmp_path, dataset, run):
    out = tmp_path / "comps"
    run("decompose", "--method", "svd", "--in", dataset, "--out", out, "--trial", 0, "--trial", 5)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["method"] == "svd" and [t["index"] for t in manifest["trials"]] == [0, 5]
    x = load_trialset(dataset).data[5]
    m = manifest["trials"][1]["M"]
    total = sum(np.loadtxt(out / "trial_0005" / f"component_{i:02d}.csv", delimiter=",") for i in range(m + 1))
    assert np.linalg.norm(total - x) / np.linalg.norm(x) < 1e-7
    run("decompose", "--in", dataset, "--out", out, "--trial", 99, code=EXIT_USAGE)


def test_train_denoise_probe(tmp_path, dataset, run):
    ckpt = tmp_path / "model.npz"
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs_pretrain": 2, "epochs_collab": 1, "collab_checkpoint": "last"}))
    res = run("train", "--in", dataset, "--out", ckpt, "--config", cfg, "--method", "pca", "--history", tmp_path / "hist.csv")
    assert "best collab epoch None" in res.output
    assert (tmp_path / "hist.csv").read_text().startswith("stage,epoch,step")
    params, extra = load_params(ckpt, with_extra=True)
    assert extra["train"]["decomposition"]["method"] == "pca"

    out = tmp_path / "den.tdn"
    run("denoise", "--model", ckpt, "--in", dataset, "--out", out, "--probabilities", tmp_path / "p.csv")
    ts = load_trialset(dataset)
    res = tr.denoise(params, ts[2], DecompConfig(method="pca"))
    np.testing.assert_allclose(load_trialset(out).data[2], res.denoised.data, atol=1e-12)
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0].startswith("trial,p0") and len(rows) == len(ts) + 1

    res = run("probe", "--model", ckpt, "--in", dataset, "--out", tmp_path / "probe.json", "--epochs", 1)
    probe = json.loads((tmp_path / "probe.json").read_text())
    assert len(probe["bins"]) == 10 and "spearman" in res.output


def test_train_rejects_bad_config(tmp_path, dataset, run):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"batch_size": 0}))
    res = run("train", "--in", dataset, "--out", tmp_path / "m.npz", "--config", cfg, code=EXIT_USAGE)
    assert "batch_size" in res.output


def test_corrupt_input_exit_code(tmp_path, run):
    bad = tmp_path / "bad.tdn"
    bad.write_bytes(b"not a trial file at all, definitely not")
    run("decompose", "--in", bad, "--out", tmp_path / "o", code=EXIT_DATA)


def _tiny_experiment(tmp_path, **kw):
    cfg = hz.ExperimentConfig(
        synth=sy.SynthConfig(trials_per_class=10, n_channels=4, n_samples=256),
        train=tr.TrainConfig(epochs_pretrain=2, epochs_collab=1, decomposition=DecompConfig(method="pca")),
        methods=("pca",),
        folds=2,
        **kw,
    )
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_evaluate_and_report(tmp_path, run):
    cfg = _tiny_experiment(tmp_path)
    out = tmp_path / "run"
    res = run("evaluate", "--config", cfg, "--out", out, "--seed", 0, "--seed", 1, "--method", "svd")
    assert "denoised" in res.output
    report = json.loads((out / "report.json").read_text())
    assert list(report["methods"]) == ["svd"] and report["config"]["seeds"] == [0, 1]
    assert report["run_info"]["jobs"] == 1
    res = run("report", "--in", out / "report.json")
    assert "accuracy_denoised_vs_baseline" in res.output

    broken = tmp_path / "broken.json"
    report.pop("methods")
    broken.write_text(json.dumps(report))
    run("report", "--in", broken, code=EXIT_DATA)


def test_evaluate_strict_failure_exit_code(tmp_path, run):
    cfg = json.loads(_tiny_experiment(tmp_path).read_text())
    cfg["methods"] = ["ica"]
    cfg["train"]["decomposition"] = {"method": "ica", "ica_max_iter": 1, "ica_tol": 1e-12, "ica_restarts": 0}
    path = tmp_path / "strict.json"
    path.write_text(json.dumps(cfg))
    run("evaluate", "--config", path, "--out", tmp_path / "run", code=EXIT_EXPERIMENT)
    assert json.loads((tmp_path / "run" / "report.json").read_text())["errors"]


def test_missing_required_option(run):
    run("synth", code=2)
