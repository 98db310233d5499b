"""Shared feature extractor, selector head and classifier head.

Parameters live in a flat ``{name: ndarray}`` mapping. Names are prefixed by
block: ``q.`` for the shared extractor, ``s.`` for the selector head and
``p.`` for the classifier head. Every forward function accepts a single
sample or a leading batch axis; all math is float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ValidationError
from ..signal import make_rng

BANDPOWER_MLP = "bandpower_mlp"
COMPACT_CNN = "compact_cnn"
ARCHITECTURES = (BANDPOWER_MLP, COMPACT_CNN)

BANDS = ((1.0, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 30.0), (30.0, 45.0))
LOG_EPS = 1e-12

EXTRACTOR, SELECTOR, CLASSIFIER = "q", "s", "p"
BLOCKS = (EXTRACTOR, SELECTOR, CLASSIFIER)

_uid = itertools.count()


def block_of(name):
    return name.split(".", 1)[0]


def is_weight_matrix(name):
    return name.split(".", 1)[1].startswith("W")


@dataclass(frozen=True)
class ModelParams:
    """Immutable parameter bundle; every update produces a new instance."""

    arch: str
    n_channels: int
    n_samples: int
    fs: float
    n_classes: int
    tensors: dict
    buffers: dict = field(default_factory=dict)
    hidden: int = 64
    n_features: int = 32
    relative_power: bool = True
    uid: int = field(default_factory=lambda: next(_uid), compare=False)

    def block(self, name):
        return {k: v for k, v in self.tensors.items() if block_of(k) == name}

    def replace_tensors(self, updates=None, buffers=None):
        tensors = dict(self.tensors)
        tensors.update(updates or {})
        return replace(
            self,
            tensors=tensors,
            buffers=dict(self.buffers if buffers is None else buffers),
            uid=next(_uid),
        )

    def descriptor(self):
        return {
            "arch": self.arch,
            "n_channels": self.n_channels,
            "n_samples": self.n_samples,
            "fs": self.fs,
            "n_classes": self.n_classes,
            "hidden": self.hidden,
            "n_features": self.n_features,
            "relative_power": self.relative_power,
        }

    def n_parameters(self):
        return sum(v.size for v in self.tensors.values())


def _glorot(rng, fan_out, fan_in, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_out, fan_in))


def cnn_kernel_length(fs):
    k = int(round(fs / 2.0))
    return k if k % 2 else k + 1


def init_params(arch, n_channels, n_samples, fs, n_classes, seed=0, hidden=64, n_features=32, relative_power=True):
    """Freshly initialised parameters for ``arch``.

    The selector head starts at zero; training re-initialises it after
    pretraining. ``relative_power`` (BandPowerMLP only) subtracts each
    input's mean log band power, making the features invariant to a global
    gain.
    """
    if arch not in ARCHITECTURES:
        raise ValidationError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    if n_classes < 2:
        raise ValidationError("n_classes must be >= 2")
    rng = make_rng(seed, 0x11E7)
    c, t = int(n_channels), int(n_samples)
    tensors = {}
    buffers = {}
    if arch == BANDPOWER_MLP:
        if fs <= 2 * BANDS[-1][1]:
            raise ValidationError(f"band-power extractor needs fs > {2 * BANDS[-1][1]} Hz, got {fs}")
        d = c * len(BANDS)
        tensors["q.W1"] = _glorot(rng, hidden, d)
        tensors["q.b1"] = np.zeros(hidden)
        tensors["q.W2"] = _glorot(rng, n_features, hidden)
        tensors["q.b2"] = np.zeros(n_features)
        buffers["shift"] = np.zeros(d)
        buffers["scale"] = np.ones(d)
        f = n_features
    else:
        if t < 64:
            raise ValidationError(f"compact CNN needs T >= 64 samples, got {t}")
        k = cnn_kernel_length(fs)
        tensors["q.Wt"] = _glorot(rng, 8, k)
        tensors["q.Ws"] = _glorot(rng, 16, c)
        tensors["q.bs"] = np.zeros(16)
        tensors["q.Wp"] = _glorot(rng, 16, 16)
        tensors["q.bp"] = np.zeros(16)
        f = 16 * ((t // 8) // 8)
        hidden = 16
    tensors["s.W"] = np.zeros((1, f))
    tensors["s.b"] = np.zeros(1)
    tensors["p.W"] = _glorot(rng, n_classes, f)
    tensors["p.b"] = np.zeros(n_classes)
    return ModelParams(arch, c, t, float(fs), int(n_classes), tensors, buffers, hidden, f, bool(relative_power))


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- band-power front end -------------------------------------------------


def _band_layout(n_samples, fs):
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / fs)
    scale = np.full(freqs.shape, 2.0 / n_samples**2)
    scale[0] = 1.0 / n_samples**2
    if n_samples % 2 == 0:
        scale[-1] = 1.0 / n_samples**2
    member = np.full(freqs.shape, -1)
    for b, (lo, hi) in enumerate(BANDS):
        member[(freqs >= lo) & (freqs < hi)] = b
    return freqs, scale, member


def band_powers(x, fs):
    """Mean-square power of ``x`` in each fixed band, shape ``(..., C, 5)``.

    Computed from the one-sided periodogram (rectangular window); the sum
    over all bins equals ``mean(x**2)``.
    """
    x = np.asarray(x, dtype=np.float64)
    spec = np.fft.rfft(x, axis=-1)
    _, scale, member = _band_layout(x.shape[-1], fs)
    p = (spec.real**2 + spec.imag**2) * scale
    out = np.stack([p[..., member == b].sum(axis=-1) for b in range(len(BANDS))], axis=-1)
    return out, spec


def _log_features(bp, relative):
    z = np.log(bp + LOG_EPS).reshape(*bp.shape[:-2], -1)
    if relative:
        z = z - z.mean(axis=-1, keepdims=True)
    return z


def log_band_features(x, fs, relative=False):
    """Flattened ``log(band power)`` per channel and band, shape ``(..., C*5)``.

    With ``relative=True`` the mean over all channel-band entries is
    subtracted from each input.
    """
    bp, _ = band_powers(x, fs)
    return _log_features(bp, relative)


def _bandpower_pre_backward(x_shape, spec, bp, dz, fs, relative):
    t = x_shape[-1]
    _, scale, member = _band_layout(t, fs)
    if relative:
        dz = dz - dz.mean(axis=-1, keepdims=True)
    dbp = dz.reshape(bp.shape) / (bp + LOG_EPS)
    wbin = np.zeros(spec.shape)
    for b in range(len(BANDS)):
        wbin[..., member == b] = dbp[..., b : b + 1]
    g = wbin * scale * spec
    return 2.0 * t * np.fft.ifft(g, n=t, axis=-1).real


# --- extractor -----------------------------------------------------------


@dataclass
class ExtractorCache:
    uid: int
    batched: bool
    x_shape: tuple
    values: dict


def _as_batch(params, x):
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (params.n_channels, params.n_samples):
        raise ValidationError(
            f"expected input of shape ({params.n_channels}, {params.n_samples}) "
            f"optionally batched, got {x.shape}"
        )
    return x, batched


def preprocess(params, x):
    """Parameter-free front end of the extractor (cacheable across steps)."""
    x, _ = _as_batch(params, x)
    if params.arch == BANDPOWER_MLP:
        return log_band_features(x, params.fs, params.relative_power)
    return x


def _mlp_trunk(params, z):
    t = params.tensors
    zn = (z - params.buffers["shift"]) / params.buffers["scale"]
    a1 = zn @ t["q.W1"].T + t["q.b1"]
    h = elu(a1)
    a2 = h @ t["q.W2"].T + t["q.b2"]
    return elu(a2), {"zn": zn, "a1": a1, "h": h, "a2": a2}


def _mlp_trunk_backward(params, c, dfeat, want_params):
    t = params.tensors
    da2 = dfeat * elu_grad(c["a2"])
    dh = da2 @ t["q.W2"]
    da1 = dh * elu_grad(c["a1"])
    grads = {}
    if want_params:
        grads["q.W2"] = da2.T @ c["h"]
        grads["q.b2"] = da2.sum(axis=0)
        grads["q.W1"] = da1.T @ c["zn"]
        grads["q.b1"] = da1.sum(axis=0)
    dz = (da1 @ t["q.W1"]) / params.buffers["scale"]
    return grads, dz


_REP = np.repeat(np.arange(8), 2)


def _cnn_trunk(params, x):
    t = params.tensors
    n, c, T = x.shape
    k = t["q.Wt"].shape[1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)
    u = win @ t["q.Wt"].T
    v = np.einsum("jc,nctj->njt", t["q.Ws"], u[..., _REP], optimize=True) + t["q.bs"][:, None]
    a1 = elu(v)
    t1 = T // 8
    p1 = a1[..., : t1 * 8].reshape(n, 16, t1, 8).mean(axis=-1)
    w = np.einsum("kj,njt->nkt", t["q.Wp"], p1) + t["q.bp"][:, None]
    a2 = elu(w)
    t2 = t1 // 8
    p2 = a2[..., : t2 * 8].reshape(n, 16, t2, 8).mean(axis=-1)
    return p2.reshape(n, -1), {"win": win, "u": u, "v": v, "p1": p1, "w": w, "pad": pad}


def _unpool(d, length, factor):
    n, ch, tp = d.shape
    out = np.zeros((n, ch, length))
    out[..., : tp * factor] = np.repeat(d / factor, factor, axis=-1)
    return out


def _cnn_trunk_backward(params, c, dfeat, want_params, want_input):
    t = params.tensors
    n = dfeat.shape[0]
    T = params.n_samples
    t1 = T // 8
    dp2 = dfeat.reshape(n, 16, -1)
    dw = _unpool(dp2, t1, 8) * elu_grad(c["w"])
    dp1 = np.einsum("kj,nkt->njt", t["q.Wp"], dw)
    dv = _unpool(dp1, T, 8) * elu_grad(c["v"])
    grads = {}
    u = c["u"]
    if want_params:
        grads["q.Wp"] = np.einsum("nkt,njt->kj", dw, c["p1"])
        grads["q.bp"] = dw.sum(axis=(0, 2))
        grads["q.Ws"] = np.einsum("njt,nctj->jc", dv, u[..., _REP], optimize=True)
        grads["q.bs"] = dv.sum(axis=(0, 2))
    dur = np.einsum("jc,njt->nctj", t["q.Ws"], dv, optimize=True)
    du = dur[..., 0::2] + dur[..., 1::2]
    if want_params:
        grads["q.Wt"] = np.einsum("nctf,nctk->fk", du, c["win"], optimize=True)
    dx = None
    if want_input:
        k = t["q.Wt"].shape[1]
        dwin = du @ t["q.Wt"]
        dxp = np.zeros((n, params.n_channels, T + 2 * c["pad"]))
        for j in range(k):
            dxp[..., j : j + T] += dwin[..., j]
        dx = dxp[..., c["pad"] : c["pad"] + T]
    return grads, dx


def extractor_forward_pre(params, pre):
    """Trunk of the extractor applied to :func:`preprocess` output (batched)."""
    if params.arch == BANDPOWER_MLP:
        feat, vals = _mlp_trunk(params, pre)
    else:
        feat, vals = _cnn_trunk(params, pre)
    return feat, vals


def extractor_forward(params, x):
    """Features of shape ``(F,)`` (or ``(n, F)`` for a batch) plus a cache."""
    xb, batched = _as_batch(params, x)
    if params.arch == BANDPOWER_MLP:
        bp, spec = band_powers(xb, params.fs)
        pre = _log_features(bp, params.relative_power)
        feat, vals = _mlp_trunk(params, pre)
        vals.update(bp=bp, spec=spec)
    else:
        feat, vals = _cnn_trunk(params, xb)
    cache = ExtractorCache(params.uid, batched, xb.shape, vals)
    return (feat if batched else feat[0]), cache


def _check_cache(params, cache):
    if cache.uid != params.uid:
        raise ValidationError("stale cache: parameters changed since the forward pass")


def extractor_backward(params, cache, dfeat, frozen=False, input_grad=True):
    """Gradients of the extractor parameters and of its input.

    With ``frozen=True`` no parameter gradients are produced but the input
    gradient is still propagated.
    """
    _check_cache(params, cache)
    dfeat = np.asarray(dfeat, dtype=np.float64)
    if not cache.batched:
        dfeat = dfeat[None]
    vals = cache.values
    if params.arch == BANDPOWER_MLP:
        grads, dz = _mlp_trunk_backward(params, vals, dfeat, not frozen)
        dx = _bandpower_pre_backward(cache.x_shape, vals["spec"], vals["bp"], dz, params.fs, params.relative_power) if input_grad else None
    else:
        grads, dx = _cnn_trunk_backward(params, vals, dfeat, not frozen, input_grad)
    if dx is not None and not cache.batched:
        dx = dx[0]
    return grads, dx


def extractor_backward_pre(params, vals, dfeat, frozen=False):
    """Parameter gradients for :func:`extractor_forward_pre` (no input gradient)."""
    if params.arch == BANDPOWER_MLP:
        grads, _ = _mlp_trunk_backward(params, vals, dfeat, not frozen)
    else:
        grads, _ = _cnn_trunk_backward(params, vals, dfeat, not frozen, False)
    return grads


# --- heads and loss --------------------------------------------------------


def selector_logit(params, feat):
    t = params.tensors
    return np.asarray(feat) @ t["s.W"][0] + t["s.b"][0]


def selector_forward(params, feat):
    """Retention probability ``sigmoid(w . feat + b)``."""
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape[-1] != params.n_features:
        raise ValidationError(f"selector expects {params.n_features} features, got {feat.shape[-1]}")
    return sigmoid(selector_logit(params, feat))


def selector_backward(params, feat, prob, dprob, frozen=False):
    """Returns ``(grads, dfeat)`` for upstream ``dL/dprob``."""
    dlogit = np.asarray(dprob) * prob * (1.0 - prob)
    grads = {}
    if not frozen:
        f2 = np.atleast_2d(feat)
        d2 = np.atleast_1d(dlogit)
        grads["s.W"] = (d2 @ f2)[None]
        grads["s.b"] = np.array([d2.sum()])
    dfeat = np.multiply.outer(dlogit, params.tensors["s.W"][0])
    return grads, dfeat


def classifier_forward(params, feat):
    """Class logits (softmax is applied only inside the loss)."""
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape[-1] != params.n_features:
        raise ValidationError(f"classifier expects {params.n_features} features, got {feat.shape[-1]}")
    t = params.tensors
    return feat @ t["p.W"].T + t["p.b"]


def classifier_backward(params, feat, dlogits, frozen=False):
    grads = {}
    f2 = np.atleast_2d(feat)
    d2 = np.atleast_2d(dlogits)
    if not frozen:
        grads["p.W"] = d2.T @ f2
        grads["p.b"] = d2.sum(axis=0)
    dfeat = d2 @ params.tensors["p.W"]
    return grads, (dfeat if np.ndim(dlogits) > 1 else dfeat[0])


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]``; batched input gives the batch mean."""
    logits = np.asarray(logits, dtype=np.float64)
    label = np.asarray(label)
    k = logits.shape[-1]
    if np.any(label < 0) or np.any(label >= k):
        raise ValidationError(f"label out of range for {k} classes")
    ls = log_softmax(logits)
    if logits.ndim == 1:
        return float(max(-ls[int(label)], 0.0))
    per = -ls[np.arange(ls.shape[0]), label.astype(int)]
    return float(np.maximum(per, 0.0).mean())


def cross_entropy_grad(logits, labels):
    """Gradient of the batch-mean cross-entropy w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels).astype(int)
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


# --- proxy path ------------------------------------------------------------


@dataclass
class ProxyCache:
    uid: int
    extractor: ExtractorCache
    feat: np.ndarray
    logits: np.ndarray


def proxy_forward(params, x):
    """Classifier logits for ``x`` plus the cache used by :func:`backward`."""
    feat, ec = extractor_forward(params, x)
    logits = classifier_forward(params, feat)
    return logits, ProxyCache(params.uid, ec, feat, logits)


def backward(params, cache, dlogits, frozen=frozenset(), input_grad=False):
    """Reverse pass through classifier head and extractor.

    Parameters
    ----------
    frozen : collection of block names
        Blocks (``"q"``, ``"p"``) whose parameter gradients are skipped.
        Signal still flows through their forward maps.

    Returns
    -------
    grads : dict
        Gradients for parameters of unfrozen blocks only.
    dx : ndarray or None
        Input gradient when ``input_grad`` is set.
    """
    if cache.uid != params.uid:
        raise ValidationError("stale cache: parameters changed since the forward pass")
    grads, dfeat = classifier_backward(params, cache.feat, dlogits, frozen=CLASSIFIER in frozen)
    if not cache.extractor.batched:
        dfeat = np.asarray(dfeat).reshape(-1)
    eg, dx = extractor_backward(params, cache.extractor, dfeat, frozen=EXTRACTOR in frozen, input_grad=input_grad)
    grads.update(eg)
    return grads, dx


def proxy_loss_and_grads(params, x, labels, frozen=frozenset()):
    logits, cache = proxy_forward(params, x)
    loss = cross_entropy(logits, labels)
    grads, _ = backward(params, cache, cross_entropy_grad(logits, labels).reshape(np.shape(logits)), frozen)
    return loss, grads


def predict(params, x, batch=256):
    """Arg-max class for each trial in a stack ``(n, C, T)``."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for i in range(0, x.shape[0], batch):
        logits, _ = proxy_forward(params, x[i : i + batch])
        out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)
