"""Ternary weight quantization with a learnable per-layer scale.

Latent full-precision weights are kept for the optimizer; the forward pass
sees ``alpha * sign_tau(W)`` with ``tau = 0.5 * std(W)`` recomputed on every
call. Gradients flow straight through the sign function.
"""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass

import numpy as np

from .tensor import Tensor, linear, no_grad

ALPHA_MIN = 1e-6


class QuantizationError(RuntimeError):
    pass


def compute_threshold(w: np.ndarray) -> float:
    """Half the population standard deviation of all entries."""
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("empty weight matrix")
    return 0.5 * float(np.std(w, dtype=np.float64))


def ternary_sign(w: np.ndarray, tau: float, binary: bool = False) -> np.ndarray:
    """Map weights to {-1, 0, +1}: +1 above tau, -1 below -tau, 0 in between.

    ``binary`` removes the zero code: everything in [-tau, tau] takes the sign
    of the weight, with exact zeros going to +1.
    """
    if tau < 0:
        raise ValueError(f"threshold must be non-negative, got {tau}")
    w = np.asarray(w)
    if binary:
        return np.where(w >= 0, 1, -1).astype(np.int8)
    out = np.zeros(w.shape, dtype=np.int8)
    out[w > tau] = 1
    out[w < -tau] = -1
    return out


def init_alpha(w: np.ndarray) -> float:
    """Mean magnitude of the weights that survive the threshold."""
    tau = compute_threshold(w)
    mag = np.abs(np.asarray(w, dtype=np.float64))
    keep = mag > tau
    if not keep.any():
        return 1.0
    return max(float(mag[keep].mean()), ALPHA_MIN)


@dataclass
class QuantStats:
    layer_id: str
    sparsity: float
    fraction_pos: float
    fraction_neg: float
    tau: float
    alpha: float

    HEADER = ("layer_id", "sparsity", "fraction_pos", "fraction_neg", "tau", "alpha")

    def row(self) -> list:
        return list(astuple(self))

    @classmethod
    def from_signs(cls, layer_id: str, signs: np.ndarray, tau: float, alpha: float) -> QuantStats:
        n = signs.size
        pos = int(np.count_nonzero(signs == 1))
        neg = int(np.count_nonzero(signs == -1))
        zero = n - pos - neg
        return cls(layer_id, zero / n, pos / n, neg / n, float(tau), float(alpha))


def write_stats_csv(path, stats: list[QuantStats], extra: dict | None = None, append: bool = False):
    extra = extra or {}
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append or fh.tell() == 0:
            writer.writerow([*extra.keys(), *QuantStats.HEADER])
        for s in stats:
            writer.writerow([*extra.values(), *s.row()])


class TernaryLinear:
    """Projection layer whose forward uses ternary-quantized weights.

    ``weight`` is (out, in). With ``quantize_enabled`` off the layer is an
    ordinary linear map over the latent weights. ``ste_alpha_factor`` selects
    whether the straight-through gradient of W carries the alpha factor.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 std: float = 0.02, quantize: bool = True, binary: bool = False,
                 learnable_alpha: bool = True, ste_alpha_factor: bool = True,
                 name: str = "", weight: np.ndarray | None = None):
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        if weight is None:
            weight = truncated_normal(rng, (out_features, in_features), std)
        self.weight = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.alpha = Tensor([init_alpha(self.weight.data)], requires_grad=learnable_alpha,
                            name=f"{name}.alpha")
        self.quantize_enabled = quantize
        self.binary = binary
        self.ste_alpha_factor = ste_alpha_factor
        self.last_tau: float | None = None
        self.last_signs: np.ndarray | None = None
        # set by freeze_signs(): sign pattern and reference weights for gradient checks
        self._frozen: tuple[np.ndarray, np.ndarray] | None = None
        # set when loaded from a packed checkpoint
        self.packed = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_features, self.in_features)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.alpha]

    def freeze_signs(self) -> None:
        """Hold the current sign pattern fixed for finite-difference checks.

        While frozen the effective weight is ``alpha * (S + (W - W_ref))``: at
        ``W == W_ref`` it equals the quantized weight, and its exact derivative
        is the straight-through estimate.
        """
        tau = compute_threshold(self.weight.data)
        signs = ternary_sign(self.weight.data, tau, self.binary)
        self._frozen = (signs, self.weight.data.copy())
        self.last_tau, self.last_signs = tau, signs

    def unfreeze(self) -> None:
        self._frozen = None

    def quantize(self) -> Tensor:
        """Effective weight tensor W_q, recording tau and signs."""
        if not self.quantize_enabled:
            return self.weight
        alpha = float(self.alpha.data[0])
        if not alpha > 0:
            raise QuantizationError(f"{self.name}: alpha must be positive, got {alpha}")
        w = self.weight.data
        if self._frozen is not None:
            signs, ref = self._frozen
            if self.ste_alpha_factor:
                direction = signs.astype(w.dtype) + (w - ref)
                wq = self.alpha.data[0] * direction
            else:
                direction = signs.astype(w.dtype)
                wq = self.alpha.data[0] * direction + (w - ref)
        else:
            tau = compute_threshold(w)
            signs = ternary_sign(w, tau, self.binary)
            self.last_tau, self.last_signs = tau, signs
            direction = signs.astype(w.dtype)
            wq = self.alpha.data[0] * direction
        layer = self

        def bw(g):
            return ste_backward(g, layer, direction)

        return Tensor._result(wq, (self.weight, self.alpha), "ternary_quantize", bw)

    def __call__(self, x: Tensor) -> Tensor:
        if self.packed is not None:
            from .packing import packed_linear
            return packed_linear(x, self.packed)
        return linear(x, self.quantize())

    def dense_weight(self) -> np.ndarray:
        """Materialised forward weight (no graph)."""
        with no_grad():
            return self.quantize().data.copy()

    def stats(self) -> QuantStats:
        return layer_stats(self)


def ste_backward(upstream: np.ndarray, layer: TernaryLinear,
                 direction: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through gradients (dL/dW, dL/dalpha) from dL/dW_q.

    ``direction`` is the matrix alpha multiplies in the forward (the sign
    matrix in normal use); it defaults to the layer's cached signs.
    """
    if direction is None:
        if layer.last_signs is None:
            raise QuantizationError(f"{layer.name}: backward without a matching forward")
        direction = layer.last_signs.astype(upstream.dtype)
    if direction.shape != upstream.shape:
        raise QuantizationError(
            f"{layer.name}: stale sign cache {direction.shape} vs gradient {upstream.shape}")
    alpha = layer.alpha.data[0]
    grad_w = upstream * alpha if layer.ste_alpha_factor else upstream.copy()
    grad_alpha = np.array([np.sum(upstream * direction, dtype=np.float64)], dtype=upstream.dtype)
    return grad_w, grad_alpha


def layer_stats(layer: TernaryLinear) -> QuantStats:
    if layer.last_signs is None:
        raise QuantizationError(f"{layer.name}: no cached signs; run a quantized forward first")
    return QuantStats.from_signs(layer.name, layer.last_signs, layer.last_tau,
                                 float(layer.alpha.data[0]))


def clamp_alpha(layer: TernaryLinear) -> None:
    np.maximum(layer.alpha.data, ALPHA_MIN, out=layer.alpha.data)


def truncated_normal(rng: np.random.Generator, shape, std: float, cutoff: float = 3.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within ``cutoff`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > cutoff
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > cutoff
    return out * std
