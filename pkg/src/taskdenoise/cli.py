"""Command-line entry point: ``taskdenoise <command> ...``.

Log level comes from the ``TASKDENOISE_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``; default ``WARNING``).
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import harness, synth
from .decomposition import DecompConfig, Method, decompose, trial_seed
from .errors import ExperimentError, FormatError, IoError, TaskDenoiseError, ValidationError
from .nnet import load_params, save_params
from .signal import load_trialset, make_rng, save_trialset
from .training import TrainConfig, denoise_components, precompute_components, train

log = logging.getLogger("taskdenoise")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_EXPERIMENT = 4


class _Failure(click.ClickException):
    def __init__(self, message, code):
        super().__init__(message)
        self.exit_code = code


def _guard(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ExperimentError as exc:
            raise _Failure(str(exc), EXIT_EXPERIMENT) from exc
        except (FormatError, IoError) as exc:
            raise _Failure(str(exc), EXIT_DATA) from exc
        except (ValidationError, TaskDenoiseError, ArithmeticError) as exc:
            raise _Failure(f"{type(exc).__name__}: {exc}", EXIT_USAGE) from exc

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _setup_logging():
    level = os.environ.get("TASKDENOISE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if level not in ("DEBUG", "INFO"):
        warnings.simplefilter("ignore", RuntimeWarning)


def _parse_snr(text):
    parts = [p for p in text.replace(":", ",").split(",") if p.strip()]
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise click.BadParameter(f"expected a number or 'lo,hi', got {text!r}") from exc
    if len(vals) == 1:
        return vals[0]
    if len(vals) == 2:
        return tuple(vals)
    raise click.BadParameter(f"expected a number or 'lo,hi', got {text!r}")


def _decomp(method, restarts, lenient):
    return DecompConfig(method=method, ica_restarts=restarts, ica_strict=not lenient)


def _read_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


method_opt = click.option("--method", type=click.Choice([m.value for m in Method]), default="ica", show_default=True)
seed_opt = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True)
restart_opt = click.option("--ica-restarts", type=click.IntRange(0), default=2, show_default=True, help="FastICA restarts from fresh seeds.")
lenient_opt = click.option("--ica-lenient/--ica-strict", default=True, show_default=True, help="Keep the last FastICA iterate instead of failing.")


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Task-oriented denoising of multichannel time series."""
    _setup_logging()


@main.command("synth")
@click.option("--paradigm", type=click.Choice(["ssvep", "erd"]), default="ssvep", show_default=True)
@click.option("--noise", type=click.Choice(["none", "eog", "emg"]), default="none", show_default=True)
@click.option("--snr", "snr", default="-5,5", show_default=True, help="Contamination SNR in dB, or a range 'lo,hi'.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--clean-out", type=click.Path(dir_okay=False), help="Also write the clean ground truth.")
@click.option("--channels", type=click.IntRange(1), default=8, show_default=True)
@click.option("--samples", type=click.IntRange(2), default=512, show_default=True)
@click.option("--fs", type=float, default=128.0, show_default=True)
@click.option("--classes", type=click.IntRange(2), default=2, show_default=True)
@click.option("--trials-per-class", type=click.IntRange(0), default=40, show_default=True)
@click.option("--signal-amp", type=float, default=1.0, show_default=True)
@seed_opt
@_guard
def synth_cmd(paradigm, noise, snr, out, clean_out, channels, samples, fs, classes, trials_per_class, signal_amp, seed):
    """Generate a labelled synthetic dataset."""
    cfg = synth.SynthConfig(
        paradigm=paradigm, n_channels=channels, n_samples=samples, fs=fs, num_classes=classes,
        trials_per_class=trials_per_class, signal_amp=signal_amp, seed=seed,
    )
    clean, raw = synth.gen_dataset(cfg)
    data = raw
    if noise != "none":
        data = synth.contaminate(raw, synth.NoiseSpec(noise, _parse_snr(snr)), seed).noisy
    save_trialset(data, out)
    if clean_out:
        save_trialset(clean, clean_out)
    click.echo(f"wrote {len(data)} trials ({channels}x{samples} @ {fs:g} Hz) to {out}")


@main.command("decompose")
@method_opt
@click.option("--in", "inp", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--trial", "trials", type=int, multiple=True, help="Trial index to dump (repeatable; default all).")
@seed_opt
@restart_opt
@lenient_opt
@_guard
def decompose_cmd(method, inp, out, trials, seed, ica_restarts, ica_lenient):
    """Dump every component of each trial as CSV plus a JSON manifest."""
    ts = load_trialset(inp)
    dcfg = _decomp(method, ica_restarts, ica_lenient)
    pick = list(trials) if trials else list(range(len(ts)))
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"method": method, "decomposition": dcfg.to_dict(), "trials": []}
    for j in pick:
        if not 0 <= j < len(ts):
            raise ValidationError(f"trial index {j} out of range [0, {len(ts)})")
        cs = decompose(ts[j], dcfg, trial_seed(seed, j))
        d = root / f"trial_{j:04d}"
        d.mkdir(exist_ok=True)
        for i, comp in enumerate(cs.components):
            np.savetxt(d / f"component_{i:02d}.csv", comp, delimiter=",", fmt="%.9g")
        info = {k: v for k, v in cs.info.items()}
        manifest["trials"].append({"index": j, "label": int(ts.labels[j]), "M": cs.M, "energies": cs.energies().tolist(), "convergence": info})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    click.echo(f"decomposed {len(pick)} trial(s) into {root}")


@main.command("train")
@click.option("--in", "inp", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Checkpoint path.")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="JSON object of TrainConfig fields.")
@method_opt
@click.option("--arch", type=click.Choice(["bandpower_mlp", "compact_cnn"]), default=None)
@click.option("--epochs-pretrain", type=click.IntRange(0), default=None)
@click.option("--epochs-collab", type=click.IntRange(0), default=None)
@click.option("--val-fraction", type=click.FloatRange(0.0, 0.9), default=0.2, show_default=True)
@click.option("--history", type=click.Path(dir_okay=False), help="Write the per-step training history CSV here.")
@seed_opt
@restart_opt
@lenient_opt
@_guard
def train_cmd(inp, out, config, method, arch, epochs_pretrain, epochs_collab, val_fraction, history, seed, ica_restarts, ica_lenient):
    """Pretrain the proxy and run the alternating selector/proxy optimisation."""
    ts = load_trialset(inp)
    opts = _read_json(config)
    if "decomposition" in opts:
        opts["decomposition"] = DecompConfig(**opts["decomposition"])
    else:
        opts["decomposition"] = _decomp(method, ica_restarts, ica_lenient)
    opts["seed"] = seed
    for key, val in (("arch", arch), ("epochs_pretrain", epochs_pretrain), ("epochs_collab", epochs_collab)):
        if val is not None:
            opts[key] = val
    cfg = TrainConfig(**opts)
    val = None
    train_set = ts
    if val_fraction > 0 and len(ts) >= 5:
        order = make_rng(seed, 0x7A1).permutation(len(ts))
        n_val = max(1, int(round(val_fraction * len(ts))))
        val, train_set = ts.subset(np.sort(order[:n_val])), ts.subset(np.sort(order[n_val:]))
    params, hist = train(train_set, cfg, val=val)
    save_params(params, out, extra={"train": cfg.to_dict()})
    if history:
        hist.to_csv(history)
    click.echo(f"trained on {len(train_set)} trials; best collab epoch {hist.best_epoch}; checkpoint {out}")


def _model_decomp(extra, method, restarts, lenient):
    if method is None and "train" in extra:
        return DecompConfig(**extra["train"]["decomposition"])
    return _decomp(method or "ica", restarts, lenient)


@main.command("denoise")
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--in", "inp", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--probabilities", type=click.Path(dir_okay=False), help="CSV of per-component retention probabilities.")
@click.option("--method", type=click.Choice([m.value for m in Method]), default=None, help="Defaults to the checkpoint's method.")
@seed_opt
@restart_opt
@lenient_opt
@_guard
def denoise_cmd(model, inp, out, probabilities, method, seed, ica_restarts, ica_lenient):
    """Denoise every trial of a file with a trained checkpoint."""
    params, extra = load_params(model, with_extra=True)
    ts = load_trialset(inp)
    dcfg = _model_decomp(extra, method, ica_restarts, ica_lenient)
    comps = precompute_components(ts, dcfg, seed)
    den, prob = denoise_components(params, comps)
    save_trialset(ts.with_data(den), out)
    if probabilities:
        with open(probabilities, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", *(f"p{i}" for i in range(prob.shape[1]))])
            for j, row in enumerate(prob):
                w.writerow([j, *(f"{v:.9g}" for v in row)])
    click.echo(f"denoised {len(ts)} trials; mean retention probability {prob.mean():.3f}")


@main.command("evaluate")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", "seeds", type=click.IntRange(0, 2**64 - 1), multiple=True, help="Override the config's seed list (repeatable).")
@click.option("--method", "methods", type=click.Choice([m.value for m in Method]), multiple=True, help="Override the methods (repeatable).")
@click.option("--arch", type=click.Choice(["bandpower_mlp", "compact_cnn"]), default=None)
@click.option("--jobs", type=click.IntRange(1), default=1, show_default=True, help="Seeds run in parallel processes.")
@_guard
def evaluate_cmd(config, out, seeds, methods, arch, jobs):
    """Run the cross-validated baseline/denoised/control experiment."""
    cfg = harness.load_config(config)
    if seeds:
        cfg = replace(cfg, seeds=tuple(seeds))
    if methods:
        cfg = replace(cfg, methods=tuple(methods))
    if arch:
        cfg = replace(cfg, train=replace(cfg.train, arch=arch))
    run_info = {"started": datetime.now(timezone.utc).isoformat(), "jobs": jobs, "argv": sys.argv[1:]}
    report = harness.run_experiment(cfg, out_dir=out, jobs=jobs, run_info=run_info)
    _print_summary(report)
    click.echo(f"report written to {Path(out) / 'report.json'}")


@main.command("probe")
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--in", "inp", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="JSON output.")
@click.option("--method", type=click.Choice([m.value for m in Method]), default=None)
@click.option("--epochs", type=click.IntRange(1), default=30, show_default=True)
@seed_opt
@restart_opt
@lenient_opt
@_guard
def probe_cmd(model, inp, out, method, epochs, seed, ica_restarts, ica_lenient):
    """Probe accuracy of components binned by retention probability."""
    params, extra = load_params(model, with_extra=True)
    ts = load_trialset(inp)
    res = harness.component_probe(ts, params, _model_decomp(extra, method, ica_restarts, ica_lenient), seed, epochs=epochs)
    Path(out).write_text(json.dumps(res.to_dict(), indent=2) + "\n")
    for b in res.bins:
        acc = "-" if b["accuracy"] is None else f"{b['accuracy']:.3f}"
        click.echo(f"[{b['lo']:.1f}, {b['hi']:.1f})  n={b['count']:5d}  acc={acc}  {b['skipped'] or ''}")
    click.echo(f"spearman: {res.spearman}")


def _print_summary(report):
    rows = harness.summary_rows(report)
    if not rows:
        click.echo("no completed folds")
        return
    cols = ["method", "condition", "accuracy", "f1", "snr_clean_db", "snr_raw_db"]
    click.echo("  ".join(f"{c:>12}" for c in cols))
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c)
            cells.append(f"{v:>12.4f}" if isinstance(v, float) else f"{'-' if v is None else v:>12}")
        click.echo("  ".join(cells))


@main.command("report")
@click.option("--in", "inp", type=click.Path(exists=True, dir_okay=False), required=True, help="report.json")
@click.option("--validate/--no-validate", default=True, show_default=True)
@_guard
def report_cmd(inp, validate):
    """Print the summary table and paired tests of a saved report."""
    with open(inp) as fh:
        report = json.load(fh)
    if validate:
        try:
            harness.validate_report(report)
        except jsonschema.ValidationError as exc:
            raise FormatError(f"report does not match schema: {exc.message}") from exc
    _print_summary(report)
    for m, entry in report["methods"].items():
        for name, t in entry["tests"].items():
            if "p_value" in t:
                click.echo(f"{m}  {name}: W={t['statistic']:g} p={t['p_value']:.4g} (n={t['n_effective']}, {t['method']})")
            else:
                click.echo(f"{m}  {name}: {t['error']}")


if __name__ == "__main__":
    main()
