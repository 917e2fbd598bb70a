"""Column projection and an Adam update with decoupled weight decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError


def project_gamma_columns(Gamma):
    """Rescale every column of ``Gamma`` to unit Euclidean norm."""
    Gamma = np.asarray(Gamma, dtype=np.float64)
    norms = np.linalg.norm(Gamma, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        bad = int(np.flatnonzero((norms == 0) | ~np.isfinite(norms))[0])
        raise NumericalError(f"cannot normalize column {bad} of Gamma (norm {norms[bad]})")
    return Gamma / norms


@dataclass
class AdamConfig:
    learning_rate: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float = math.inf


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self):
        return {"step": self.step,
                "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    @classmethod
    def from_dict(cls, doc):
        return cls(int(doc["step"]),
                   {k: np.asarray(v, dtype=np.float64) for k, v in doc["m"].items()},
                   {k: np.asarray(v, dtype=np.float64) for k, v in doc["v"].items()})


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}, total
    return dict(grads), total


def adam_step(params, grads, state, config, lr=None):
    """One descent step on ``params`` (dict of arrays); returns new params.

    ``grads`` are gradients of the loss to minimize. Clipping uses the global
    norm over all blocks; weight decay is decoupled from the moment estimates.
    ``state`` is updated in place.
    """
    lr = config.learning_rate if lr is None else lr
    grads, _ = clip_by_global_norm(grads, config.grad_clip_norm)
    state.step += 1
    c1 = 1.0 - config.beta1 ** state.step
    c2 = 1.0 - config.beta2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new = p - lr * config.weight_decay * p
        out[name] = new - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return out
