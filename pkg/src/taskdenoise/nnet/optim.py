"""AdamW with AMSGrad, cosine decay, global-norm clipping and max-norm rows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError, ValidationError
from .model import ModelParams, is_weight_matrix

DEFAULT_MAX_NORM = 2.0


@dataclass
class OptimizerState:
    """Per-parameter moments for one optimizer instance.

    ``vmax`` is the running elementwise maximum of the second moment.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    vmax: dict = field(default_factory=dict)

    def copy(self):
        return OptimizerState(
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            {k: a.copy() for k, a in self.vmax.items()},
        )


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads, threshold):
    """Rescale ``grads`` so their global L2 norm is at most ``threshold``.

    Returns the clipped bundle and the pre-clip norm.
    """
    if not threshold > 0:
        raise ValidationError("clip threshold must be positive")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {k}")
    norm = global_norm(grads)
    if norm <= threshold:
        return dict(grads), norm
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}, norm


def max_norm_project(params: ModelParams, rho=DEFAULT_MAX_NORM, names=None):
    """Shrink every weight-matrix row whose L2 norm exceeds ``rho``; biases untouched."""
    if not rho > 0:
        raise ValidationError("rho must be positive")
    updates = {}
    for k, w in params.tensors.items():
        if names is not None and k not in names:
            continue
        if not is_weight_matrix(k) or w.ndim != 2:
            continue
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        if np.any(norms > rho):
            updates[k] = w * np.minimum(1.0, rho / np.maximum(norms, 1e-300))
    return params.replace_tensors(updates) if updates else params


def adamw_step(params: ModelParams, grads, state: OptimizerState, lr, rho=DEFAULT_MAX_NORM):
    """One decoupled-weight-decay AMSGrad step over the parameters in ``grads``.

    Returns new ``(params, state)``; inputs are not modified. The updated
    weight matrices are then projected onto the max-norm ball.
    """
    st = state.copy()
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    bc1 = 1.0 - b1**st.step
    bc2 = 1.0 - b2**st.step
    updates = {}
    for k in sorted(grads):
        g = grads[k]
        w = params.tensors[k]
        if k not in st.m:
            st.m[k] = np.zeros_like(w)
            st.v[k] = np.zeros_like(w)
            st.vmax[k] = np.zeros_like(w)
        st.m[k] = b1 * st.m[k] + (1.0 - b1) * g
        st.v[k] = b2 * st.v[k] + (1.0 - b2) * g * g
        st.vmax[k] = np.maximum(st.vmax[k], st.v[k])
        denom = np.sqrt(st.vmax[k]) / math.sqrt(bc2) + st.eps
        new = w * (1.0 - lr * st.weight_decay) - (lr / bc1) * st.m[k] / denom
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"non-finite update for {k}")
        updates[k] = new
    out = params.replace_tensors(updates)
    return max_norm_project(out, rho, names=updates.keys()), st


def cosine_lr(t, total_steps, lr0, alpha=0.9):
    """Cosine decay of the fraction ``alpha`` of ``lr0``; floor is ``(1 - alpha) * lr0``."""
    if total_steps <= 0:
        return lr0
    frac = min(max(t / total_steps, 0.0), 1.0)
    return lr0 * ((1.0 - alpha) + alpha * 0.5 * (1.0 + math.cos(math.pi * frac)))
