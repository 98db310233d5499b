"""Cross-validated experiments: baseline vs denoised vs random-mixing control.

Each seed plays the role of one subject. For every fold the pipeline is
trained on the training split (validation split for checkpointing), every
trial is denoised, and one fresh evaluator classifier per condition is
trained on that condition's training data and scored on the test split.
The evaluators share architecture and seed; only their data differ.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import scipy
from scipy import stats

from . import __version__, metrics
from . import synth as sy
from .decomposition import ComponentSet, DecompConfig, Method, decompose_many, reconstruct
from .errors import ExperimentError, TaskDenoiseError, ValidationError
from .nnet import model as nn
from .signal import Trial, TrialSet, load_trialset, make_rng
from .training import TrainConfig, denoise_components, fit_feature_scaling, supervised_fit, train, weighted_sum

log = logging.getLogger(__name__)

CONDITIONS = ("baseline", "denoised", "control")
REPORT_SCHEMA = "eval_report.schema.json"
CONFIG_SCHEMA = "experiment_config.schema.json"
SCHEMA_VERSION = 1


def load_schema(name):
    return json.loads(resources.files("taskdenoise.schemas").joinpath(name).read_text())


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    synth: sy.SynthConfig | None = field(default_factory=sy.SynthConfig)
    data_path: str | None = None
    noise: sy.NoiseSpec | None = None
    methods: tuple = (Method.ICA,)
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: int = 5
    ratio: tuple = (6.0, 2.0, 2.0)
    seeds: tuple = (0,)
    evaluator_epochs: int | None = None
    probe: bool = False
    probe_epochs: int = 30
    strict: bool = True

    def __post_init__(self):
        if (self.synth is None) == (self.data_path is None):
            raise ValidationError("exactly one of synth or data_path must be given")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        r = tuple(float(v) for v in self.ratio)
        if len(r) != 3 or min(r) <= 0:
            raise ValidationError("ratio needs three positive parts")
        total = sum(r)
        object.__setattr__(self, "ratio", tuple(v / total for v in r))
        methods = tuple(Method(str(getattr(m, "value", m)).lower()) for m in self.methods)
        if not methods:
            raise ValidationError("at least one decomposition method is required")
        object.__setattr__(self, "methods", methods)
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.noise is not None and self.noise.kind is sy.NoiseKind.NONE:
            object.__setattr__(self, "noise", None)

    @property
    def eval_epochs(self):
        return self.train.epochs_pretrain if self.evaluator_epochs is None else int(self.evaluator_epochs)

    def decomposition(self, method):
        return replace(self.train.decomposition, method=method)

    def to_dict(self):
        return {
            "synth": self.synth.to_dict() if self.synth else None,
            "data_path": self.data_path,
            "noise": self.noise.to_dict() if self.noise else None,
            "methods": [m.value for m in self.methods],
            "train": self.train.to_dict(),
            "folds": self.folds,
            "ratio": list(self.ratio),
            "seeds": list(self.seeds),
            "evaluator_epochs": self.eval_epochs,
            "probe": self.probe,
            "probe_epochs": self.probe_epochs,
            "strict": self.strict,
        }

    @classmethod
    def from_dict(cls, d):
        import jsonschema

        jsonschema.validate(d, load_schema(CONFIG_SCHEMA))
        d = dict(d)
        if d.get("synth") is not None:
            s = dict(d["synth"])
            s.pop("seed", None)
            if s.get("stimulus_freqs") is not None:
                s["stimulus_freqs"] = tuple(s["stimulus_freqs"])
            d["synth"] = sy.SynthConfig(**s)
        if d.get("noise") is not None:
            n = dict(d["noise"])
            if isinstance(n.get("snr_db"), list):
                n["snr_db"] = tuple(n["snr_db"])
            d["noise"] = sy.NoiseSpec(**n)
        if d.get("train") is not None:
            t = dict(d["train"])
            if "decomposition" in t:
                t["decomposition"] = DecompConfig(**t["decomposition"])
            d["train"] = TrainConfig(**t)
        for key in ("methods", "ratio", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path):
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


# --- splits and controls -----------------------------------------------------


def _largest_remainder(n, ratio):
    raw = np.asarray(ratio) * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def kfold_splits(n_trials, labels, k=5, ratio=(6, 2, 2), seed=0):
    """Stratified train/val/test partitions for ``k`` folds.

    Each class's indices are shuffled once; fold ``f`` rotates that order by
    ``f * n_c / k`` and cuts it by ``ratio``. With a 6:2:2 ratio and
    ``k = 5`` the test parts of successive folds are disjoint.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_trials,):
        raise ValidationError("labels must have one entry per trial")
    if k < 2:
        raise ValidationError("k must be >= 2")
    ratio = np.asarray(ratio, dtype=float)
    if ratio.shape != (3,) or np.any(ratio <= 0):
        raise ValidationError("ratio needs three positive parts")
    ratio = ratio / ratio.sum()
    rng = make_rng(seed, 0x5917)
    per_class = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ValidationError(f"class {c} has {idx.size} trials, fewer than k={k}")
        per_class.append(rng.permutation(idx))
    folds = []
    for f in range(k):
        parts = ([], [], [])
        for idx in per_class:
            rolled = np.roll(idx, -((f * idx.size) // k))
            cuts = np.cumsum(_largest_remainder(idx.size, ratio))[:2]
            for part, chunk in zip(parts, np.split(rolled, cuts)):
                part.append(chunk)
        folds.append(tuple(np.sort(np.concatenate(p)) for p in parts))
    return folds


def random_mixing_weights(shape, seed, key=0):
    """I.i.d. ``Uniform[0, 1]`` weights, one per component per trial."""
    return make_rng(seed, 0xC7, key).uniform(0.0, 1.0, size=shape)


def random_mixing_control(cs: ComponentSet, seed, rng=None) -> Trial:
    """Reconstruct ``cs`` with uniformly random component weights."""
    rng = make_rng(seed, 0xC7) if rng is None else rng
    return reconstruct(cs, rng.uniform(0.0, 1.0, size=cs.N))


def derived_seed(*keys):
    return int(make_rng(*keys).integers(0, 2**63))


# --- evaluators ----------------------------------------------------------------


def fit_evaluator(x, y, x_val, y_val, num_classes, fs, cfg: TrainConfig, epochs, seed):
    """Fresh classifier trained on ``x``; best validation-accuracy epoch."""
    params = nn.init_params(
        cfg.arch, x.shape[1], x.shape[2], fs, num_classes, seed=seed, relative_power=cfg.relative_power
    )
    params = fit_feature_scaling(params, x)
    params, _ = supervised_fit(params, x, y, replace(cfg, seed=seed), epochs, stage="evaluator", val=(x_val, y_val))
    return params


def _quality(x, ref):
    """Mean per-trial MSE and SNR of ``x`` against ``ref``."""
    mses = [metrics.mse(a, b) for a, b in zip(x, ref)]
    snrs = [metrics.snr_db(a, b) for a, b in zip(x, ref)]
    snr = float(np.mean(snrs))
    return {"mse": float(np.mean(mses)), "snr_db": snr if math.isfinite(snr) else None}


def _spectral(x, fs, labels, synth_cfg):
    """Scalar spectral summaries of a stack of trials."""
    out = {}
    if synth_cfg is not None and synth_cfg.paradigm is sy.Paradigm.SSVEP:
        ratios = [metrics.fundamental_power_ratio(t, fs, synth_cfg.stimulus_freqs[y]) for t, y in zip(x, labels)]
        out["fundamental_ratio"] = float(np.mean(ratios))
    win = int(round(fs))
    if x.shape[-1] >= win:
        series = np.array([metrics.band_power_ratio(t, fs)[1] for t in x])
        out["alpha_beta_ratio"] = float(np.mean(series))
    return out


def _mean_psd(x, fs):
    f, p = metrics.welch_psd(x, fs)
    return f, p.reshape(-1, p.shape[-1]).mean(axis=0)


# --- one fold / one seed ---------------------------------------------------------


@dataclass
class SeedData:
    seed: int
    noisy: TrialSet
    raw: TrialSet
    clean: TrialSet | None
    snr_db: np.ndarray


def prepare_data(cfg: ExperimentConfig, seed) -> SeedData:
    if cfg.synth is not None:
        clean, raw = sy.gen_dataset(replace(cfg.synth, seed=seed))
    else:
        clean, raw = None, load_trialset(cfg.data_path)
    if cfg.noise is None:
        return SeedData(seed, raw, raw, clean, np.full(len(raw), np.inf))
    con = sy.contaminate(raw, cfg.noise, seed)
    return SeedData(seed, con.noisy, raw, clean, con.snr_db)


def run_fold(cfg: ExperimentConfig, data: SeedData, method, comps, control, split, fold):
    """Train, denoise and evaluate one fold; returns a JSON-ready dict and plot series."""
    tr_i, va_i, te_i = split
    noisy = data.noisy
    tcfg = replace(cfg.train, seed=derived_seed(data.seed, 0xF01D, fold), decomposition=cfg.decomposition(method))
    params, history = train(
        noisy.subset(tr_i), tcfg, val=noisy.subset(va_i), components=comps[tr_i], val_components=comps[va_i]
    )
    denoised, prob = denoise_components(params, comps)
    stacks = {"baseline": noisy.data, "denoised": denoised, "control": control}
    y = noisy.labels
    eval_seed = derived_seed(data.seed, 0xE7A1, fold)
    reports = {}
    for name in CONDITIONS:
        x = stacks[name]
        ev = fit_evaluator(x[tr_i], y[tr_i], x[va_i], y[va_i], noisy.num_classes, noisy.fs, cfg.train, cfg.eval_epochs, eval_seed)
        reports[name] = metrics.class_report(nn.predict(ev, x[te_i]), y[te_i], noisy.num_classes).to_dict()
    quality = {}
    refs = {"raw": data.raw.data}
    if data.clean is not None:
        refs["clean"] = data.clean.data
    for ref_name, ref in refs.items():
        quality[ref_name] = {name: _quality(stacks[name][te_i], ref[te_i]) for name in CONDITIONS}
    spectral = {name: _spectral(stacks[name][te_i], noisy.fs, y[te_i], cfg.synth) for name in CONDITIONS}
    if data.clean is not None:
        spectral["clean"] = _spectral(data.clean.data[te_i], noisy.fs, y[te_i], cfg.synth)
    result = {
        "seed": data.seed,
        "fold": fold,
        "n_train": int(tr_i.size),
        "n_val": int(va_i.size),
        "n_test": int(te_i.size),
        "best_epoch": history.best_epoch,
        "classification": reports,
        "quality": quality,
        "spectral": spectral,
        "selector": {
            "mean_probability": float(prob[te_i].mean()),
            "min_probability": float(prob[te_i].min()),
            "max_probability": float(prob[te_i].max()),
        },
    }
    series = {name: _mean_psd(stacks[name][te_i], noisy.fs) for name in CONDITIONS}
    if data.clean is not None:
        series["clean"] = _mean_psd(data.clean.data[te_i], noisy.fs)
    return result, series, params


def run_seed(cfg: ExperimentConfig, seed):
    """All methods and folds for one seed (one synthetic subject)."""
    data = prepare_data(cfg, seed)
    splits = kfold_splits(len(data.noisy), data.noisy.labels, cfg.folds, cfg.ratio, seed)
    out = {}
    for mi, method in enumerate(cfg.methods):
        entry = {"folds": [], "errors": [], "psd": None, "probe": None, "n_nonconverged": 0}
        try:
            comps, infos = decompose_many(data.noisy.data, cfg.decomposition(method), seed, data.noisy.fs)
        except (TaskDenoiseError, ArithmeticError, ValueError) as exc:
            entry["errors"] = [{"seed": seed, "fold": None, "stage": "decompose", "cause": f"{type(exc).__name__}: {exc}"}]
            out[method.value] = entry
            continue
        entry["n_nonconverged"] = int(sum(not i.get("converged", True) for i in infos))
        control = weighted_sum(random_mixing_weights(comps.shape[:2], seed, mi), comps)
        psd_acc = []
        for fold, split in enumerate(splits):
            try:
                res, series, params = run_fold(cfg, data, method, comps, control, split, fold)
            except (TaskDenoiseError, ArithmeticError, ValueError) as exc:
                log.error("seed %d fold %d (%s) aborted: %s", seed, fold, method.value, exc)
                entry["errors"].append({"seed": seed, "fold": fold, "stage": "fold", "cause": f"{type(exc).__name__}: {exc}"})
                continue
            entry["folds"].append(res)
            psd_acc.append(series)
            if cfg.probe and fold == 0:
                pr = component_probe(data.noisy, params, cfg.decomposition(method), seed, comps=comps, epochs=cfg.probe_epochs)
                entry["probe"] = pr.to_dict()
        if psd_acc:
            freqs = psd_acc[0]["baseline"][0]
            entry["psd"] = (freqs, {k: np.mean([s[k][1] for s in psd_acc], axis=0) for k in psd_acc[0]})
        out[method.value] = entry
    return seed, out


# --- component probe ----------------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    bins: list
    spearman: float | None
    n_components: int

    def to_dict(self):
        return {"bins": self.bins, "spearman": self.spearman, "n_components": self.n_components}


def _stratified_folds(labels, k, rng):
    fold_of = np.empty(labels.size, dtype=int)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = np.arange(idx.size) % k
    return fold_of


def component_probe(data: TrialSet, params, dcfg: DecompConfig, seed=0, comps=None, epochs=30, k=5, min_count=10):
    """Classification accuracy of components grouped by retention probability.

    Components are binned into fixed-width deciles of selector probability.
    Inside each bin a fresh classifier learns the parent trial's label from
    the component matrix alone (stratified ``k``-fold). Bins with fewer than
    ``min_count`` components, or a single class, are skipped and flagged.
    """
    if comps is None:
        comps, _ = decompose_many(data.data, dcfg, seed, data.fs)
    n, big_n = comps.shape[:2]
    _, prob = denoise_components(params, comps)
    flat = comps.reshape(n * big_n, *comps.shape[2:])
    p = prob.reshape(-1)
    labels = np.repeat(data.labels, big_n)
    which = np.minimum((p * 10).astype(int), 9)
    cfg = TrainConfig(arch=params.arch, relative_power=params.relative_power)
    bins = []
    for b in range(10):
        members = np.flatnonzero(which == b)
        row = {"lo": b / 10, "hi": (b + 1) / 10, "center": (b + 0.5) / 10, "count": int(members.size), "accuracy": None, "skipped": None}
        lab = labels[members]
        if members.size < min_count:
            row["skipped"] = "too_few_components"
        elif np.unique(lab).size < 2:
            row["skipped"] = "single_class"
        else:
            kk = int(min(k, np.bincount(lab).max()))
            fold_of = _stratified_folds(lab, kk, make_rng(seed, 0x9B0E, b))
            correct = 0
            for f in range(kk):
                te = members[fold_of == f]
                trn = members[fold_of != f]
                if te.size == 0 or np.unique(labels[trn]).size < 2:
                    continue
                ps = nn.init_params(
                    params.arch, data.n_channels, data.n_samples, data.fs, data.num_classes,
                    seed=derived_seed(seed, 0x9B0E, b, f), relative_power=params.relative_power,
                )
                ps = fit_feature_scaling(ps, flat[trn])
                ps, _ = supervised_fit(ps, flat[trn], labels[trn], replace(cfg, seed=derived_seed(seed, b, f)), epochs)
                correct += int(np.sum(nn.predict(ps, flat[te]) == labels[te]))
            row["accuracy"] = correct / members.size
        bins.append(row)
    used = [r for r in bins if r["accuracy"] is not None]
    rho = None
    if len(used) >= 2:
        acc = [r["accuracy"] for r in used]
        if np.ptp(acc) > 0:
            rho = float(stats.spearmanr([r["center"] for r in used], acc)[0])
    return ProbeResult(bins, rho, int(p.size))


# --- aggregation and report ----------------------------------------------------


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _paired_test(a, b):
    try:
        return metrics.wilcoxon_signed_rank(a, b).to_dict()
    except ValidationError as exc:
        return {"error": str(exc)}


def _aggregate(folds):
    """Means over folds of every scalar leaf shared by all folds."""
    def walk(items):
        first = items[0]
        if isinstance(first, dict):
            return {k: walk([it[k] for it in items]) for k in first if k not in ("confusion", "support", "undefined_precision", "undefined_recall")}
        if isinstance(first, (int, float)) or first is None:
            return _mean(items)
        return None

    keys = ("classification", "quality", "spectral", "selector")
    return {k: walk([f[k] for f in folds]) for k in keys}


def _per_seed(folds, seeds):
    out = []
    for s in seeds:
        fs = [f for f in folds if f["seed"] == s]
        if fs:
            out.append({"seed": s, "n_folds": len(fs), **_aggregate(fs)})
    return out


def _tests(per_seed):
    def col(path):
        vals = []
        for row in per_seed:
            v = row
            for p in path:
                v = v.get(p) if isinstance(v, dict) else None
            vals.append(v)
        return vals

    tests = {}
    acc = {c: col(("classification", c, "accuracy")) for c in CONDITIONS}
    tests["accuracy_denoised_vs_baseline"] = _paired_test(acc["denoised"], acc["baseline"])
    tests["accuracy_denoised_vs_control"] = _paired_test(acc["denoised"], acc["control"])
    for ref in ("clean", "raw"):
        d = col(("quality", ref, "denoised", "snr_db"))
        b = col(("quality", ref, "baseline", "snr_db"))
        if all(v is not None for v in d + b):
            tests[f"snr_{ref}_denoised_vs_baseline"] = _paired_test(d, b)
    return tests


def build_report(cfg: ExperimentConfig, seed_results):
    methods = {}
    errors = []
    for m in cfg.methods:
        folds, probes, nonconv = [], [], 0
        for seed, res in seed_results:
            entry = res[m.value]
            folds.extend(entry["folds"])
            errors.extend({"method": m.value, **e} for e in entry["errors"])
            nonconv += entry["n_nonconverged"]
            if entry["probe"] is not None:
                probes.append({"seed": seed, **entry["probe"]})
        per_seed = _per_seed(folds, cfg.seeds)
        methods[m.value] = {
            "folds": folds,
            "per_seed": per_seed,
            "aggregate": _aggregate(folds) if folds else None,
            "tests": _tests(per_seed) if len(per_seed) >= 1 else {},
            "probe": probes,
            "ica_nonconverged_trials": nonconv,
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "provenance": {
            "config_hash": cfg.config_hash(),
            "seeds": list(cfg.seeds),
            "package_version": __version__,
            "numpy_version": np.__version__,
            "scipy_version": scipy.__version__,
            "python_version": platform.python_version(),
        },
        "methods": methods,
        "errors": errors,
    }


def payload_json(report):
    """Canonical serialisation used for reproducibility comparisons."""
    body = {k: v for k, v in report.items() if k != "run_info"}
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _run_seed_job(args):
    cfg, seed = args
    return run_seed(cfg, seed)


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs=1, run_info=None):
    """Run every seed, assemble the report and optionally write it to ``out_dir``.

    Raises :class:`ExperimentError` in strict mode if any fold aborted (the
    report is still written first).
    """
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            seed_results = list(ex.map(_run_seed_job, [(cfg, s) for s in cfg.seeds]))
    else:
        seed_results = [run_seed(cfg, s) for s in cfg.seeds]
    seed_results.sort(key=lambda r: cfg.seeds.index(r[0]))
    report = build_report(cfg, seed_results)
    if run_info is not None:
        report["run_info"] = run_info
    if out_dir is not None:
        write_outputs(report, seed_results, out_dir)
    if cfg.strict and report["errors"]:
        raise ExperimentError(f"{len(report['errors'])} fold(s) aborted; first: {report['errors'][0]['cause']}")
    return report


def validate_report(report):
    import jsonschema

    jsonschema.validate(json.loads(payload_json(report)), load_schema(REPORT_SCHEMA))


SUMMARY_METRICS = ("accuracy", "precision", "recall", "f1")


def summary_rows(report):
    """Method x condition table of aggregate metrics."""
    rows = []
    for m, entry in report["methods"].items():
        agg = entry["aggregate"]
        if agg is None:
            continue
        for c in CONDITIONS:
            row = {"method": m, "condition": c}
            row.update({k: agg["classification"][c][k] for k in SUMMARY_METRICS})
            for ref in ("clean", "raw"):
                q = agg["quality"].get(ref)
                row[f"mse_{ref}"] = q[c]["mse"] if q else None
                row[f"snr_{ref}_db"] = q[c]["snr_db"] if q else None
            rows.append(row)
    return rows


def _write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in header})


def write_outputs(report, seed_results, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n")
    rows = summary_rows(report)
    header = ["method", "condition", *SUMMARY_METRICS, "mse_clean", "snr_clean_db", "mse_raw", "snr_raw_db"]
    _write_csv(out / "summary.csv", rows, header)
    fold_rows = []
    for m, entry in report["methods"].items():
        for f in entry["folds"]:
            for c in CONDITIONS:
                r = {"method": m, "seed": f["seed"], "fold": f["fold"], "condition": c}
                r.update({k: f["classification"][c][k] for k in SUMMARY_METRICS})
                for ref, q in f["quality"].items():
                    r[f"mse_{ref}"] = q[c]["mse"]
                    r[f"snr_{ref}_db"] = q[c]["snr_db"]
                fold_rows.append(r)
    _write_csv(out / "folds.csv", fold_rows, ["method", "seed", "fold", "condition", *header[2:]])
    for m in report["methods"]:
        curves = [res[m]["psd"] for _, res in seed_results if res[m]["psd"] is not None]
        if not curves:
            continue
        freqs = curves[0][0]
        names = list(curves[0][1])
        with open(out / f"psd_{m}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", *names])
            for i, f in enumerate(freqs):
                w.writerow([f"{f:.6g}", *(f"{np.mean([c[1][n][i] for c in curves]):.9g}" for n in names)])
