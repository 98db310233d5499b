"""Rank-1 spatial-temporal decomposition of a single trial.

Every backend factors a ``(C, T)`` trial as ``sum_i a_i b_i^T + residual`` and
returns the ``N = M + 1`` accumulated components, the residual always last.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ValidationError
from .signal import Trial, make_rng

EIG_FLOOR = 1e-12


class Method(str, enum.Enum):
    PCA = "pca"
    SVD = "svd"
    ICA = "ica"


@dataclass(frozen=True)
class DecompConfig:
    method: Method = Method.ICA
    ica_max_iter: int = 200
    ica_tol: float = 1e-4
    ica_nonlinearity: str = "tanh"
    center: bool = True
    ica_restarts: int = 0
    ica_strict: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(str(getattr(self.method, "value", self.method)).lower()))
        if not self.ica_tol > 0:
            raise ValidationError("ica_tol must be positive")
        if int(self.ica_max_iter) < 1:
            raise ValidationError("ica_max_iter must be >= 1")
        if int(self.ica_restarts) < 0:
            raise ValidationError("ica_restarts must be >= 0")
        if self.ica_nonlinearity not in ("tanh", "cube"):
            raise ValidationError(f"unknown nonlinearity {self.ica_nonlinearity!r}")

    def to_dict(self):
        return {
            "method": self.method.value,
            "ica_max_iter": int(self.ica_max_iter),
            "ica_tol": float(self.ica_tol),
            "ica_nonlinearity": self.ica_nonlinearity,
            "center": bool(self.center),
            "ica_restarts": int(self.ica_restarts),
            "ica_strict": bool(self.ica_strict),
        }


@dataclass(frozen=True)
class ComponentSet:
    """Components of one trial.

    ``components`` has shape ``(N, C, T)``; index ``M`` (the last) is the
    residual. ``spatial`` is ``(M, C)`` and ``temporal`` is ``(M, T)``.
    """

    components: np.ndarray
    spatial: np.ndarray
    temporal: np.ndarray
    method: Method
    fs: float
    info: dict = field(default_factory=dict, compare=False)

    @property
    def M(self):
        return self.spatial.shape[0]

    @property
    def N(self):
        return self.components.shape[0]

    @property
    def residual(self):
        return self.components[-1]

    def energies(self):
        return np.sqrt(np.einsum("nct,nct->n", self.components, self.components))


def _canonical_sign(a, b):
    # largest-magnitude spatial entry made positive
    for i in range(a.shape[0]):
        j = np.argmax(np.abs(a[i]))
        if a[i, j] < 0:
            a[i] *= -1.0
            b[i] *= -1.0
    return a, b


def _assemble(x, a, b, method, fs, info):
    comps = a[:, :, None] * b[:, None, :]
    residual = x - comps.sum(axis=0)
    allc = np.concatenate([comps, residual[None]], axis=0)
    for arr in (allc, a, b):
        arr.setflags(write=False)
    return ComponentSet(allc, a, b, method, fs, info)


def _centered(x, center):
    if center:
        return x - x.mean(axis=1, keepdims=True)
    return x


def _eig_desc(xc):
    t = xc.shape[1]
    cov = xc @ xc.T / (t - 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def _pca(x, cfg):
    xc = _centered(x, cfg.center)
    w, v = _eig_desc(xc)
    keep = w > EIG_FLOOR * max(w[0], 0.0) if w[0] > 0 else np.zeros_like(w, dtype=bool)
    a = v.T.copy()
    b = a @ xc
    # negligible directions keep their slot as an all-zero component
    b[~keep] = 0.0
    a, b = _canonical_sign(a, b)
    return a, b, {"eigenvalues": w.tolist(), "n_kept": int(keep.sum())}


def _svd(x, cfg):
    c, t = x.shape
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    m = min(c, t)
    a = u[:, :m].T.copy()
    b = s[:m, None] * vt[:m]
    a, b = _canonical_sign(a, b)
    return a, b, {"singular_values": s[:m].tolist()}


def _sym_decorrelate(w):
    s, u = np.linalg.eigh(w @ w.T)
    s = np.clip(s, np.finfo(float).tiny, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ w


def fastica(z, cfg: DecompConfig, rng):
    """Symmetric FastICA on whitened data ``z`` of shape ``(K, T)``.

    Returns the orthogonal unmixing matrix, iteration count and final delta.
    Raises :class:`ConvergenceError` when ``ica_max_iter`` is exhausted.
    """
    k, t = z.shape
    w = _sym_decorrelate(rng.standard_normal((k, k)))
    delta = np.inf
    for it in range(1, int(cfg.ica_max_iter) + 1):
        u = w @ z
        if cfg.ica_nonlinearity == "tanh":
            g = np.tanh(u)
            gp = 1.0 - g * g
        else:
            g = u**3
            gp = 3.0 * u * u
        w_new = _sym_decorrelate(g @ z.T / t - gp.mean(axis=1)[:, None] * w)
        delta = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0)))
        w = w_new
        if delta < cfg.ica_tol:
            return w, it, delta
    err = ConvergenceError(
        f"FastICA did not converge in {cfg.ica_max_iter} iterations (last delta {delta:.3g})",
        delta,
        cfg.ica_max_iter,
    )
    err.unmixing = w
    raise err


def _ica(x, cfg, seed):
    c, t = x.shape
    xc = _centered(x, cfg.center)
    w_eig, v = _eig_desc(xc)
    if w_eig[0] <= 0:
        return np.zeros((c, c)), np.zeros((c, t)), {"n_iter": 0, "delta": 0.0, "converged": True}
    keep = w_eig > EIG_FLOOR * w_eig[0]
    e = v[:, keep]
    d = w_eig[keep]
    z = (e / np.sqrt(d)).T @ xc
    # each restart draws a fresh initial unmixing matrix
    converged = True
    for attempt in range(int(cfg.ica_restarts) + 1):
        try:
            unmix, n_iter, delta = fastica(z, cfg, make_rng(seed, 0x1CA, attempt) if attempt else make_rng(seed, 0x1CA))
            break
        except ConvergenceError as exc:
            if attempt < cfg.ica_restarts:
                continue
            if cfg.ica_strict:
                raise
            # lenient mode keeps the last iterate; the residual still closes the sum
            warnings.warn(str(exc), RuntimeWarning, stacklevel=3)
            unmix, n_iter, delta, converged = exc.unmixing, exc.n_iter, exc.delta, False
    s = unmix @ z
    mixing = (e * np.sqrt(d)) @ unmix.T
    k = s.shape[0]
    a = np.zeros((c, c))
    b = np.zeros((c, t))
    a[:k] = mixing.T
    b[:k] = s
    energy = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    order = np.argsort(-energy, kind="stable")
    a, b = a[order].copy(), b[order].copy()
    a, b = _canonical_sign(a, b)
    return a, b, {"n_iter": int(n_iter), "delta": float(delta), "converged": converged, "restarts": attempt}


def decompose(x, cfg: DecompConfig = DecompConfig(), seed=0) -> ComponentSet:
    """Factor one trial into rank-1 components plus residual.

    Parameters
    ----------
    x : Trial or ndarray
        Trial of shape ``(C, T)``.
    cfg : DecompConfig
        Backend selection and FastICA settings.
    seed : int
        Seeds the FastICA initial unmixing matrix; ignored by PCA/SVD.
    """
    if not isinstance(x, Trial):
        x = Trial(np.asarray(x, dtype=np.float64), 1.0)
    data = np.array(x.data, dtype=np.float64)
    c, t = data.shape
    if t <= c:
        warnings.warn(f"decomposing a trial with T={t} <= C={c}; factors will be poorly determined", stacklevel=2)
    if cfg.method is Method.PCA:
        a, b, info = _pca(data, cfg)
    elif cfg.method is Method.SVD:
        a, b, info = _svd(data, cfg)
    else:
        a, b, info = _ica(data, cfg, seed)
    info = {"method": cfg.method.value, **info}
    return _assemble(data, a, b, cfg.method, x.fs, info)


def reconstruct(cs: ComponentSet, weights) -> Trial:
    """Weighted component sum ``sum_i w_i C_i``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (cs.N,):
        raise ValidationError(f"expected {cs.N} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite")
    return Trial(np.tensordot(w, cs.components, axes=1), cs.fs)


def decompose_many(data, cfg: DecompConfig, seed, fs=1.0):
    """Decompose a stack ``(n, C, T)``; trial ``j`` uses a seed derived from ``(seed, j)``.

    Returns the component stack ``(n, N, C, T)`` and per-trial info dicts.
    """
    out = []
    infos = []
    for j, x in enumerate(np.asarray(data)):
        cs = decompose(Trial(x, fs), cfg, seed=trial_seed(seed, j))
        out.append(cs.components)
        infos.append(cs.info)
    return np.stack(out), infos


def trial_seed(seed, index):
    return int(make_rng(seed, 0xDEC, index).integers(0, 2**63))
