"""Proxy pretraining, alternating selector/proxy optimisation and inference.

The collaborative objective for a batch is the mean cross-entropy of the
proxy classifier on ``xhat = sum_i p_i C_i`` where ``p_i`` are selector
probabilities of the components. Step A moves only the selector head with
extractor and classifier frozen; step B then moves extractor and classifier
with the selector head frozen, evaluated at the updated selector.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .decomposition import DecompConfig, decompose, decompose_many, reconstruct
from .errors import NumericalError, ValidationError
from .nnet import model as nn
from .nnet.optim import OptimizerState, adamw_step, clip_gradients, cosine_lr
from .signal import Trial, TrialSet, make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 50
    epochs_collab: int = 50
    batch_size: int = 32
    lr_selector: float = 1e-3
    lr_proxy: float = 1e-3
    clip_threshold: float = 1.0
    cosine_alpha: float = 0.9
    weight_decay: float = 1e-4
    max_norm: float = 2.0
    selector_init_bias: float = 2.0
    selector_init_scale: float = 0.01
    arch: str = nn.BANDPOWER_MLP
    relative_power: bool = True
    decomposition: DecompConfig = field(default_factory=DecompConfig)
    seed: int = 0
    full_batch_descent_mode: bool = False
    collab_checkpoint: str = "val_loss"

    def __post_init__(self):
        if self.collab_checkpoint not in ("last", "val_loss"):
            raise ValidationError(f"collab_checkpoint must be 'last' or 'val_loss', got {self.collab_checkpoint!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not (self.lr_selector > 0 and self.lr_proxy > 0):
            raise ValidationError("learning rates must be positive")
        if self.epochs_pretrain < 0 or self.epochs_collab < 0:
            raise ValidationError("epoch counts must be >= 0")
        if not self.clip_threshold > 0:
            raise ValidationError("clip_threshold must be positive")
        if self.arch not in nn.ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.arch!r}")
        if isinstance(self.decomposition, dict):
            object.__setattr__(self, "decomposition", DecompConfig(**self.decomposition))

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "decomposition"}
        out["decomposition"] = self.decomposition.to_dict()
        return out


@dataclass(frozen=True)
class StepRecord:
    stage: str
    epoch: int
    step: int
    loss: float
    lr_s: float
    lr_p: float
    grad_norm_s: float
    grad_norm_p: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self):
        return len(self.records)

    def append(self, rec: StepRecord):
        if not all(math.isfinite(v) for v in (rec.loss, rec.lr_s, rec.lr_p, rec.grad_norm_s, rec.grad_norm_p)):
            raise NumericalError(f"non-finite value in history at {rec.stage} step {rec.step}")
        self.records.append(rec)

    def losses(self, stage=None):
        return np.array([r.loss for r in self.records if stage is None or r.stage == stage])

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(StepRecord.__dataclass_fields__.keys())
        for r in self.records:
            w.writerow([r.stage, r.epoch, r.step, repr(r.loss), repr(r.lr_s), repr(r.lr_p), repr(r.grad_norm_s), repr(r.grad_norm_p)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


@dataclass(frozen=True)
class SelectionResult:
    probabilities: np.ndarray
    energies: np.ndarray
    denoised: Trial


@dataclass
class ComponentBatch:
    """Components ``(n, N, C, T)`` with cached extractor front-end output."""

    comps: np.ndarray
    labels: np.ndarray
    pre: np.ndarray

    def __len__(self):
        return self.comps.shape[0]

    def take(self, idx):
        return ComponentBatch(self.comps[idx], self.labels[idx], self.pre[idx])


def weighted_sum(prob, comps):
    """``sum_i prob[n, i] * comps[n, i]`` for every trial ``n``."""
    n, big_n = comps.shape[:2]
    flat = comps.reshape(n, big_n, -1)
    return np.matmul(prob[:, None, :], flat)[:, 0].reshape(n, *comps.shape[2:])


def component_inner(g, comps):
    """Frobenius inner products ``<g[n], comps[n, i]>`` of shape ``(n, N)``."""
    n, big_n = comps.shape[:2]
    return np.matmul(comps.reshape(n, big_n, -1), g.reshape(n, -1, 1))[..., 0]


def make_component_batch(params, comps, labels):
    comps = np.asarray(comps, dtype=np.float64)
    n, big_n = comps.shape[:2]
    pre = nn.preprocess(params, comps.reshape(n * big_n, *comps.shape[2:]))
    return ComponentBatch(comps, np.asarray(labels, dtype=np.int64), pre.reshape(n, big_n, *pre.shape[1:]))


def _batches(n, size, rng):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


# --- pretraining -----------------------------------------------------------


def fit_feature_scaling(params, data):
    """Set the band-power standardisation buffers from training trials."""
    if params.arch != nn.BANDPOWER_MLP or len(data) == 0:
        return params
    z = nn.preprocess(params, data)
    shift = z.mean(axis=0)
    scale = z.std(axis=0)
    scale = np.where(scale > 1e-6, scale, 1.0)
    return params.replace_tensors(buffers={"shift": shift, "scale": scale})


def init_selector(params, cfg: TrainConfig):
    rng = make_rng(cfg.seed, 0x5E1)
    w = rng.uniform(-cfg.selector_init_scale, cfg.selector_init_scale, size=params.tensors["s.W"].shape)
    return params.replace_tensors({"s.W": w, "s.b": np.array([cfg.selector_init_bias])})


def supervised_fit(params, x, y, cfg: TrainConfig, epochs, stage="pretrain", history=None, val=None, seed_key=0):
    """Minibatch cross-entropy training of extractor + classifier head.

    With ``val=(x_val, y_val)`` the epoch with the best validation accuracy
    (ties broken by lower validation loss) is returned.
    """
    history = history if history is not None else TrainHistory()
    n = x.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size)) if n else 0
    total = steps_per_epoch * epochs
    opt = OptimizerState(weight_decay=cfg.weight_decay)
    best = None
    step = 0
    for epoch in range(epochs):
        rng = None if cfg.full_batch_descent_mode else make_rng(cfg.seed, 0x9E, seed_key, epoch)
        size = n if cfg.full_batch_descent_mode else cfg.batch_size
        for idx in _batches(n, size, rng):
            lr = cfg.lr_proxy if cfg.full_batch_descent_mode else cosine_lr(step, total, cfg.lr_proxy, cfg.cosine_alpha)
            loss, grads = nn.proxy_loss_and_grads(params, x[idx], y[idx], frozen={nn.SELECTOR})
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at {stage} step {step}")
            grads, gnorm = clip_gradients(grads, cfg.clip_threshold)
            params, opt = adamw_step(params, grads, opt, lr, cfg.max_norm)
            history.append(StepRecord(stage, epoch, step, loss, 0.0, lr, 0.0, gnorm))
            step += 1
        if val is not None and len(val[1]):
            logits, _ = nn.proxy_forward(params, val[0])
            acc = float(np.mean(np.argmax(logits, axis=-1) == val[1]))
            vloss = nn.cross_entropy(logits, val[1])
            key = (acc, -vloss)
            if best is None or key > best[0]:
                best = (key, params, epoch)
    if best is not None:
        history.best_epoch = best[2]
        params = best[1]
    return params, history


def pretrain(data: TrialSet, cfg: TrainConfig):
    """Supervised pretraining of the proxy model on raw trials.

    The selector head is initialised afterwards with a positive bias so every
    component starts close to full retention.
    """
    if data.num_classes < 2:
        raise ValidationError("pretraining needs at least two classes")
    params = nn.init_params(
        cfg.arch, data.n_channels, data.n_samples, data.fs, data.num_classes, seed=cfg.seed, relative_power=cfg.relative_power
    )
    params = fit_feature_scaling(params, data.data)
    params, history = supervised_fit(params, data.data, data.labels, cfg, cfg.epochs_pretrain)
    return init_selector(params, cfg), history


# --- collaborative objective ---------------------------------------------


@dataclass
class _Forward:
    feat_c: np.ndarray
    vals_c: dict
    prob: np.ndarray
    xhat: np.ndarray
    feat: np.ndarray
    cache: object
    logits: np.ndarray
    loss: float


def _collab_forward(params, batch: ComponentBatch):
    n, big_n = batch.comps.shape[:2]
    pre = batch.pre.reshape(n * big_n, *batch.pre.shape[2:])
    feat_c, vals_c = nn.extractor_forward_pre(params, pre)
    prob = nn.sigmoid(nn.selector_logit(params, feat_c)).reshape(n, big_n)
    xhat = weighted_sum(prob, batch.comps)
    feat, cache = nn.extractor_forward(params, xhat)
    logits = nn.classifier_forward(params, feat)
    loss = nn.cross_entropy(logits, batch.labels)
    return _Forward(feat_c, vals_c, prob, xhat, feat, cache, logits, loss)


def collab_loss(params, batch: ComponentBatch):
    """Mean proxy cross-entropy on the probability-weighted reconstruction."""
    return _collab_forward(params, batch).loss


def collab_grads(params, batch: ComponentBatch, update):
    """Loss and gradients for one block group.

    ``update="selector"`` returns gradients of the selector head only;
    ``update="proxy"`` returns gradients of extractor and classifier head,
    including the extractor's contribution through the selector path.
    """
    fw = _collab_forward(params, batch)
    sel = update == "selector"
    dlogits = nn.cross_entropy_grad(fw.logits, batch.labels)
    grads, dfeat = nn.classifier_backward(params, fw.feat, dlogits, frozen=sel)
    gq, dxhat = nn.extractor_backward(params, fw.cache, dfeat, frozen=sel, input_grad=True)
    # d xhat / d p_i = C_i
    dprob = component_inner(dxhat, batch.comps)
    gs, dfeat_c = nn.selector_backward(params, fw.feat_c, fw.prob.reshape(-1), dprob.reshape(-1), frozen=not sel)
    if sel:
        return fw.loss, gs
    gq2 = nn.extractor_backward_pre(params, fw.vals_c, dfeat_c)
    for k, v in gq2.items():
        gq[k] = gq[k] + v
    grads.update(gq)
    return fw.loss, grads


@dataclass
class CollabResult:
    params: nn.ModelParams
    opt_selector: OptimizerState
    opt_proxy: OptimizerState
    loss_before: float
    loss_mid: float
    loss_after: float | None
    grad_norm_s: float
    grad_norm_p: float


def collab_step(params, opt_states, batch: ComponentBatch, cfg: TrainConfig, lr_s=None, lr_p=None, compute_after=True):
    """One alternating update: step A on the selector, then step B on the proxy.

    ``opt_states`` is ``(selector_state, proxy_state)``.
    """
    if len(batch) == 0:
        raise ValidationError("collaborative step needs a non-empty batch")
    opt_s, opt_p = opt_states
    lr_s = cfg.lr_selector if lr_s is None else lr_s
    lr_p = cfg.lr_proxy if lr_p is None else lr_p

    loss0, gs = collab_grads(params, batch, "selector")
    if not math.isfinite(loss0):
        raise NumericalError("non-finite loss in step A")
    try:
        gs, norm_s = clip_gradients(gs, cfg.clip_threshold)
        params, opt_s = adamw_step(params, gs, opt_s, lr_s, cfg.max_norm)
    except NumericalError as exc:
        raise NumericalError(f"step A: {exc}") from exc

    loss1, gp = collab_grads(params, batch, "proxy")
    if not math.isfinite(loss1):
        raise NumericalError("non-finite loss in step B")
    try:
        gp, norm_p = clip_gradients(gp, cfg.clip_threshold)
        params, opt_p = adamw_step(params, gp, opt_p, lr_p, cfg.max_norm)
    except NumericalError as exc:
        raise NumericalError(f"step B: {exc}") from exc

    loss2 = collab_loss(params, batch) if compute_after else None
    if loss2 is not None and not math.isfinite(loss2):
        raise NumericalError("non-finite loss after step B")
    return CollabResult(params, opt_s, opt_p, loss0, loss1, loss2, norm_s, norm_p)


def precompute_components(data: TrialSet, dcfg: DecompConfig, seed):
    comps, _ = decompose_many(data.data, dcfg, seed, data.fs)
    return comps


def train(data: TrialSet, cfg: TrainConfig, val: TrialSet | None = None, components=None, val_components=None):
    """Pretrain, then run ``epochs_collab`` epochs of alternating updates.

    ``components``/``val_components`` may carry precomputed component stacks
    ``(n, N, C, T)`` aligned with ``data``/``val``. With a validation set and
    ``cfg.collab_checkpoint == "val_loss"`` the collaborative epoch with the
    lowest validation loss is returned; otherwise the last one.
    """
    params, history = pretrain(data, cfg)
    if cfg.epochs_collab == 0 or len(data) == 0:
        return params, history
    if components is None:
        components = precompute_components(data, cfg.decomposition, cfg.seed)
    batch_all = make_component_batch(params, components, data.labels)
    vbatch = None
    if val is not None and len(val) and cfg.collab_checkpoint == "val_loss":
        if val_components is None:
            val_components = precompute_components(val, cfg.decomposition, cfg.seed + 1)
        vbatch = make_component_batch(params, val_components, val.labels)

    n = len(data)
    descent = cfg.full_batch_descent_mode
    size = n if descent else cfg.batch_size
    steps_per_epoch = math.ceil(n / size)
    total = steps_per_epoch * cfg.epochs_collab
    opts = (OptimizerState(weight_decay=cfg.weight_decay), OptimizerState(weight_decay=cfg.weight_decay))
    best = None
    step = 0
    for epoch in range(cfg.epochs_collab):
        rng = None if descent else make_rng(cfg.seed, 0xC011, epoch)
        for idx in _batches(n, size, rng):
            if descent:
                lr_s, lr_p = cfg.lr_selector, cfg.lr_proxy
            else:
                lr_s = cosine_lr(step, total, cfg.lr_selector, cfg.cosine_alpha)
                lr_p = cosine_lr(step, total, cfg.lr_proxy, cfg.cosine_alpha)
            res = collab_step(params, opts, batch_all.take(idx), cfg, lr_s, lr_p, compute_after=descent)
            params, opts = res.params, (res.opt_selector, res.opt_proxy)
            history.append(StepRecord("collab", epoch, step, res.loss_before, lr_s, lr_p, res.grad_norm_s, res.grad_norm_p))
            step += 1
        if vbatch is not None:
            vloss = collab_loss(params, vbatch)
            if best is None or vloss < best[0]:
                best = (vloss, params, epoch)
    if best is not None:
        params = best[1]
        history.best_epoch = best[2]
    return params, history


# --- inference ---------------------------------------------------------------


def selector_probabilities(params, comps):
    """Retention probabilities ``(n, N)`` for a component stack ``(n, N, C, T)``."""
    comps = np.asarray(comps, dtype=np.float64)
    n, big_n = comps.shape[:2]
    if comps.shape[2:] != (params.n_channels, params.n_samples):
        raise ValidationError(
            f"components of shape {comps.shape[2:]} do not match model input ({params.n_channels}, {params.n_samples})"
        )
    out = np.empty((n, big_n))
    chunk = max(1, 512 // big_n)
    for i in range(0, n, chunk):
        c = comps[i : i + chunk]
        flat = c.reshape(-1, *c.shape[2:])
        feat, _ = nn.extractor_forward(params, flat)
        out[i : i + chunk] = nn.selector_forward(params, feat).reshape(c.shape[0], big_n)
    return out


def denoise_components(params, comps):
    """Denoised stack and probabilities for precomputed components."""
    prob = selector_probabilities(params, comps)
    return weighted_sum(prob, comps), prob


def denoise(params, x, dcfg: DecompConfig = DecompConfig(), seed=0) -> SelectionResult:
    """Decompose ``x``, score each component and return the weighted sum."""
    if not isinstance(x, Trial):
        x = Trial(np.asarray(x, dtype=np.float64), params.fs)
    if x.data.shape != (params.n_channels, params.n_samples) or x.fs != params.fs:
        raise ValidationError(
            f"trial ({x.data.shape}, fs={x.fs}) does not match model "
            f"({params.n_channels}, {params.n_samples}, fs={params.fs})"
        )
    cs = decompose(x, dcfg, seed)
    prob = selector_probabilities(params, cs.components[None])[0]
    return SelectionResult(prob, cs.energies(), reconstruct(cs, prob))


def with_constant_selector(params, logit):
    """Copy of ``params`` whose selector outputs ``sigmoid(logit)`` everywhere."""
    return params.replace_tensors({"s.W": np.zeros_like(params.tensors["s.W"]), "s.b": np.array([float(logit)])})
