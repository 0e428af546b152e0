"""Warmup-cosine schedule, global-norm clipping and AdamW."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup 0 -> peak, then cosine decay to 0 at ``total_steps``.

    Steps past ``total_steps`` clamp to the final value.
    """
    step = min(max(step, 0), total_steps)
    if warmup_steps > 0 and step <= warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak_lr
    progress = (step - warmup_steps) / span
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: list[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> tuple[float, float]:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``.

    Returns (pre-clip norm, applied scale).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        bad = [p.name for p in params if p.grad is not None and not np.isfinite(p.grad).all()]
        raise NonFiniteGradientError(f"non-finite gradient norm; offending parameters: {bad}")
    scale = 1.0
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm, scale


@dataclass
class AdamWState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    Only parameters whose id is in ``decay`` are decayed. Parameters with
    ``requires_grad`` off are never touched.
    """

    def __init__(self, params: list[Tensor], betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay: set[int] | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = set(decay) if decay is not None else {id(p) for p in self.params if p.ndim == 2}
        self.state = AdamWState()

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NonFiniteGradientError(f"non-finite gradient in parameter {p.name!r}")
        st = self.state
        st.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.t
        c2 = 1.0 - b2 ** st.t
        for p in self.params:
            key = id(p)
            g = p.grad
            m = st.m.get(key)
            if m is None:
                m = st.m[key] = np.zeros_like(p.data)
                st.v[key] = np.zeros_like(p.data)
            v = st.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if key in self.decay and self.weight_decay:
                p.data *= p.dtype.type(1.0 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.dtype, copy=False)
