"""Autoregressive generation with temperature and nucleus (top-p) sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import LanguageModel
from .tensor import no_grad


def nucleus(probs, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest probability-sorted prefix with cumulative mass >= p.

    Ties are broken by ascending token id. Returns (token ids, renormalised
    probabilities) in sorted order.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"nucleus mass p must be in (0, 1], got {p}")
    probs = np.asarray(probs, dtype=np.float64)
    ids = np.arange(probs.size)
    order = np.lexsort((ids, -probs))
    sorted_p = probs[order]
    cum = np.cumsum(sorted_p)
    hit = np.nonzero(cum >= p * cum[-1])[0]
    k = int(hit[0]) + 1 if hit.size else probs.size
    keep = order[:k]
    kept = sorted_p[:k]
    return keep, kept / kept.sum()


def sample_nucleus(probs, p: float, rng: np.random.Generator) -> int:
    ids, q = nucleus(probs, p)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(q), u, side="right"))
    return int(ids[min(idx, len(ids) - 1)])


def softmax_temperature(logits, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class TraceStep:
    token: int
    nucleus_ids: list[int] = field(default_factory=list)


def generate(model: LanguageModel, prompt, max_new: int, p: float = 0.9,
             temperature: float = 0.8, seed: int = 0, stop_id: int | None = None,
             trace: list[TraceStep] | None = None) -> list[int]:
    """Extend ``prompt`` by up to ``max_new`` sampled tokens.

    The context is truncated to the model's last ``context_len`` tokens at
    each step. When ``trace`` is a list, each step appends the chosen token
    with the nucleus it was drawn from.
    """
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"nucleus mass p must be in (0, 1], got {p}")
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    rng = np.random.default_rng(seed)
    ctx = model.cfg.context_len
    with no_grad():
        for _ in range(max_new):
            logits = model(np.array(tokens[-ctx:], dtype=np.int64)).data[-1]
            probs = softmax_temperature(logits, temperature)
            ids, q = nucleus(probs, p)
            u = rng.random()
            idx = min(int(np.searchsorted(np.cumsum(q), u, side="right")), len(ids) - 1)
            tok = int(ids[idx])
            if trace is not None:
                trace.append(TraceStep(tok, [int(i) for i in ids]))
            tokens.append(tok)
            if stop_id is not None and tok == stop_id:
                break
    return tokens
