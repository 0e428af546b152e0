"""Decoder-only transformer with ternary projections.

Pre-norm residual blocks: ``x + SiLU(O(attn(norm(x))))`` followed by
``x + down(GELU(up(norm(x))))``. Attention is causal multi-head with rotary
position embeddings on queries and keys. Embedding and output projection stay
full precision unless ``quantize_embeddings`` is set.
"""

from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .quant import TernaryLinear, truncated_normal
from .tensor import Tensor, no_grad


class PlainLinear:
    """Full-precision projection without bias; weight is (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 std: float = 0.02, name: str = ""):
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        self.weight = Tensor(truncated_normal(rng, (out_features, in_features), std),
                             requires_grad=True, name=f"{name}.weight")

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def quantize(self) -> Tensor:
        return self.weight

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight)


class RMSNorm:
    def __init__(self, dim: int, eps: float, name: str = ""):
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gain")

    def parameters(self) -> list[Tensor]:
        return [self.gain]

    def __call__(self, x: Tensor) -> Tensor:
        return T.rmsnorm(x, self.gain, self.eps)


class LayerNorm:
    def __init__(self, dim: int, eps: float, name: str = ""):
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> list[Tensor]:
        return [self.gain, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, self.eps)


def make_norm(cfg: ModelConfig, name: str):
    cls = RMSNorm if cfg.norm == "rmsnorm" else LayerNorm
    return cls(cfg.d_model, cfg.rmsnorm_eps, name)


def _projection(cfg: ModelConfig, rng, n_in: int, n_out: int, name: str, plain: bool,
                quantize: bool):
    if plain:
        return PlainLinear(n_in, n_out, rng, cfg.init_std, name)
    return TernaryLinear(n_in, n_out, rng, cfg.init_std, quantize=quantize,
                         binary=cfg.binary_mode, learnable_alpha=cfg.learnable_alpha,
                         ste_alpha_factor=cfg.ste_alpha_factor, name=name)


class TransformerBlock:
    PROJECTIONS = ("q", "k", "v", "o", "up", "down")

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, index: int, plain: bool = False):
        self.cfg = cfg
        d, di = cfg.d_model, cfg.d_intermediate
        pre = f"blocks.{index}"
        self.norm1 = make_norm(cfg, f"{pre}.norm1")
        self.q = _projection(cfg, rng, d, d, f"{pre}.attn.q", plain, cfg.quantize)
        self.k = _projection(cfg, rng, d, d, f"{pre}.attn.k", plain, cfg.quantize)
        self.v = _projection(cfg, rng, d, d, f"{pre}.attn.v", plain, cfg.quantize)
        self.o = _projection(cfg, rng, d, d, f"{pre}.attn.o", plain, cfg.quantize)
        self.norm2 = make_norm(cfg, f"{pre}.norm2")
        self.up = _projection(cfg, rng, d, di, f"{pre}.mlp.up", plain, cfg.quantize)
        self.down = _projection(cfg, rng, di, d, f"{pre}.mlp.down", plain, cfg.quantize)

    def projections(self) -> list:
        return [getattr(self, p) for p in self.PROJECTIONS]

    def parameters(self) -> list[Tensor]:
        out = list(self.norm1.parameters())
        for p in self.projections()[:4]:
            out += p.parameters()
        out += self.norm2.parameters()
        for p in self.projections()[4:]:
            out += p.parameters()
        return out

    def attention(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h, hd = self.cfg.n_heads, self.cfg.head_dim

        def heads(z: Tensor) -> Tensor:
            return z.reshape(b, t, h, hd).transpose(0, 2, 1, 3)

        pos = np.arange(t)
        q = T.rope(heads(self.q(x)), pos, self.cfg.rope_theta)
        k = T.rope(heads(self.k(x)), pos, self.cfg.rope_theta)
        v = heads(self.v(x))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        att = T.softmax(scores, T.causal_mask(t))
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        out = self.o(out)
        if self.cfg.attn_activation_enabled:
            out = T.silu(out)
        return out

    def mlp(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] > self.cfg.context_len:
            raise ValueError(f"sequence length {x.shape[1]} exceeds context_len={self.cfg.context_len}")
        x = x + self.attention(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class LanguageModel:
    """Token embedding -> blocks -> final norm -> output projection.

    ``plain=True`` builds the same network from ordinary full-precision
    linear layers (no alpha parameters), consuming the init RNG identically.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, plain: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.plain = plain
        self.inference_only = False  # set by packed checkpoint loading
        rng = np.random.default_rng(seed)
        d, v = cfg.d_model, cfg.vocab_size
        qe = cfg.quantize_embeddings and not plain
        if qe:
            self.embed = _projection(cfg, rng, d, v, "embed", False, cfg.quantize)
        else:
            self.embed = PlainLinear(d, v, rng, cfg.init_std, "embed")
        self.blocks = [TransformerBlock(cfg, rng, i, plain) for i in range(cfg.n_layers)]
        self.norm_f = make_norm(cfg, "norm_f")
        if qe:
            self.output = _projection(cfg, rng, d, v, "output", False, cfg.quantize)
        else:
            self.output = PlainLinear(d, v, rng, cfg.init_std, "output")

    # -- parameters ------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        out = list(self.embed.parameters())
        for blk in self.blocks:
            out += blk.parameters()
        out += self.norm_f.parameters()
        out += self.output.parameters()
        return out

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for p in self.parameters():
            yield p.name, p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def ternary_layers(self) -> list[TernaryLinear]:
        layers = []
        if isinstance(self.embed, TernaryLinear):
            layers.append(self.embed)
        for blk in self.blocks:
            layers += [p for p in blk.projections() if isinstance(p, TernaryLinear)]
        if isinstance(self.output, TernaryLinear):
            layers.append(self.output)
        return layers

    def quantized_layers(self) -> list[TernaryLinear]:
        return [layer for layer in self.ternary_layers() if layer.quantize_enabled]

    def decay_parameters(self) -> set[int]:
        """ids of the latent block projection weights (the only decayed tensors)."""
        return {id(p.weight) for blk in self.blocks for p in blk.projections()}

    def freeze_signs(self) -> None:
        for layer in self.quantized_layers():
            layer.freeze_signs()

    def unfreeze(self) -> None:
        for layer in self.ternary_layers():
            layer.unfreeze()

    # -- forward ---------------------------------------------------------
    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError(f"expected (seq,) or (batch, seq) token ids, got shape {ids.shape}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            bad = ids[(ids < 0) | (ids >= self.cfg.vocab_size)][0]
            raise ValueError(f"token id {bad} outside vocabulary of size {self.cfg.vocab_size}")
        if ids.shape[1] > self.cfg.context_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds context_len={self.cfg.context_len}")
        return ids

    def hidden(self, tokens) -> Tensor:
        """Final-normed hidden states, (batch, seq, d_model)."""
        ids = self._check_tokens(tokens)
        if isinstance(self.embed, TernaryLinear) and self.embed.packed is not None:
            x = Tensor(self.embed.packed.dense(self.embed.weight.dtype)[ids])
        else:
            x = T.embedding(self.embed.quantize(), ids)
        for blk in self.blocks:
            x = blk(x)
        return self.norm_f(x)

    def __call__(self, tokens) -> Tensor:
        single = np.asarray(tokens).ndim == 1
        logits = self.output(self.hidden(tokens))
        if single:
            logits = logits.reshape(logits.shape[1:])
        return logits

    forward = __call__


def lm_loss(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Label-smoothed next-token cross-entropy, averaged over positions."""
    v = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if int(np.prod(logits.shape[:-1])) != targets.size:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} length mismatch")
    return T.cross_entropy(logits.reshape(-1, v), targets.reshape(-1), smoothing)


def eval_windows(stream, window: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Non-overlapping windows (the last one possibly short) covering every next-token target."""
    stream = np.asarray(stream, dtype=np.int64)
    if len(stream) < 2:
        raise ValueError("perplexity needs a token stream of length >= 2")
    out = []
    for s in range(0, len(stream) - 1, window):
        x = stream[s:s + window]
        y = stream[s + 1:s + window + 1]
        out.append((x[: len(y)], y))
    return out


def mean_nll(model: LanguageModel, stream, window: int | None = None, batch: int = 16) -> float:
    """Mean next-token negative log-likelihood without label smoothing."""
    window = window or model.cfg.context_len
    wins = eval_windows(stream, window)
    total, count = 0.0, 0
    full = [w for w in wins if len(w[0]) == window]
    rest = [w for w in wins if len(w[0]) != window]
    with no_grad():
        for i in range(0, len(full), batch):
            xs = np.stack([w[0] for w in full[i:i + batch]])
            ys = np.stack([w[1] for w in full[i:i + batch]])
            loss = lm_loss(model(xs), ys, 0.0)
            total += float(loss.data[0]) * ys.size
            count += ys.size
        for x, y in rest:
            loss = lm_loss(model(x[None]), y[None], 0.0)
            total += float(loss.data[0]) * y.size
            count += y.size
    return total / count


def perplexity(model: LanguageModel, stream, window: int | None = None) -> float:
    return math.exp(mean_nll(model, stream, window))


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every parameter ``LanguageModel(cfg)`` creates, without allocating."""
    d, di, v = cfg.d_model, cfg.d_intermediate, cfg.vocab_size
    out: dict[str, tuple[int, ...]] = {}

    def proj(name, n_in, n_out, ternary):
        out[f"{name}.weight"] = (n_out, n_in)
        if ternary:
            out[f"{name}.alpha"] = (1,)

    def norm(name):
        out[f"{name}.gain"] = (d,)
        if cfg.norm == "layernorm":
            out[f"{name}.bias"] = (d,)

    proj("embed", d, v, cfg.quantize_embeddings)
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}"
        norm(f"{pre}.norm1")
        for p in ("q", "k", "v", "o"):
            proj(f"{pre}.attn.{p}", d, d, True)
        norm(f"{pre}.norm2")
        proj(f"{pre}.mlp.up", d, di, True)
        proj(f"{pre}.mlp.down", di, d, True)
    norm("norm_f")
    proj("output", d, v, cfg.quantize_embeddings)
    return out
