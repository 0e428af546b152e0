"""Quantization diagnostics: sparsity profiles, weight histograms, ablations, benchmarks."""

from __future__ import annotations

import copy
import csv
import json
import math
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, config_diff
from .inference import dense_model, pack_model, storage_report
from .model import LanguageModel
from .optim import NonFiniteGradientError
from .quant import QuantStats, compute_threshold, layer_stats, ternary_sign
from .tensor import no_grad


class AnalysisError(RuntimeError):
    pass


# -- sparsity ---------------------------------------------------------------

@dataclass
class SparsityProfile:
    layers: list[QuantStats]
    blocks: list[QuantStats]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", *QuantStats.HEADER])
            for s in self.layers:
                w.writerow(["layer", *s.row()])
            for s in self.blocks:
                w.writerow(["block", *s.row()])


def _weighted(layer_id: str, stats: list[QuantStats], counts: list[int]) -> QuantStats:
    n = sum(counts)

    def avg(attr):
        return sum(getattr(s, attr) * c for s, c in zip(stats, counts)) / n

    return QuantStats(layer_id, avg("sparsity"), avg("fraction_pos"), avg("fraction_neg"),
                      avg("tau"), avg("alpha"))


def sparsity_profile(model: LanguageModel) -> SparsityProfile:
    """Per-layer zero fractions in depth order plus weight-count-weighted block aggregates."""
    layers = model.quantized_layers()
    if not layers:
        raise AnalysisError("model has no quantized layers")
    stats = [layer_stats(layer) for layer in layers]
    by_block: dict[str, tuple[list, list]] = {}
    for layer, s in zip(layers, stats):
        parts = layer.name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        group = by_block.setdefault(key, ([], []))
        group[0].append(s)
        group[1].append(layer.weight.data.size)
    blocks = [_weighted(k, v[0], v[1]) for k, v in by_block.items()]
    return SparsityProfile(stats, blocks)


def embedding_probe(model: LanguageModel) -> QuantStats:
    """What-if sparsity of the (full-precision) embedding table under the ternary rule.

    Works on a copy of the weights; the model is untouched.
    """
    w = model.embed.weight.data.copy()
    tau = compute_threshold(w)
    signs = ternary_sign(w, tau)
    mag = np.abs(w[signs != 0])
    alpha = float(mag.mean()) if mag.size else 1.0
    return QuantStats.from_signs("embed(probe)", signs, tau, alpha)


# -- weight distributions ----------------------------------------------------

def layer_histogram(w: np.ndarray, alpha: float, bins: int = 101) -> tuple[np.ndarray, np.ndarray]:
    """Counts over ``bins`` uniform bins on [-3 alpha, 3 alpha]; outliers land in the edge bins."""
    edges = np.linspace(-3.0 * alpha, 3.0 * alpha, bins + 1)
    flat = np.clip(np.asarray(w, dtype=np.float64).reshape(-1), edges[0], edges[-1])
    counts, _ = np.histogram(flat, bins=edges)
    return counts, edges


def weight_histogram(model: LanguageModel, bins: int = 101) -> list[tuple[str, float, float, int]]:
    """Rows (layer, bin_left, bin_right, count) for the latent weights of every ternary layer."""
    rows = []
    for layer in model.ternary_layers():
        alpha = float(layer.alpha.data[0])
        counts, edges = layer_histogram(layer.weight.data, alpha, bins)
        rows += [(layer.name, float(edges[i]), float(edges[i + 1]), int(counts[i]))
                 for i in range(bins)]
    return rows


def trimodality(rows: list[tuple[str, float, float, int]], width: float = 0.1) -> float:
    """Fraction of histogram mass in bins centred within ``width * alpha`` of -alpha, 0 or +alpha.

    alpha for each layer is recovered from its histogram range (3 alpha).
    """
    by_layer: dict[str, list] = {}
    for name, lo, hi, count in rows:
        by_layer.setdefault(name, []).append((lo, hi, count))
    near = total = 0
    for bins in by_layer.values():
        alpha = bins[-1][1] / 3.0
        for lo, hi, count in bins:
            c = 0.5 * (lo + hi)
            if min(abs(c + alpha), abs(c), abs(c - alpha)) <= width * alpha:
                near += count
            total += count
    return near / total if total else math.nan


# -- ablations ---------------------------------------------------------------

ABLATIONS: dict[str, dict[str, str]] = {
    "full": {},
    "no_learnable_alpha": {"model.learnable_alpha": "false"},
    "layernorm": {"model.norm": "layernorm"},
    "no_label_smoothing": {"train.label_smoothing": "0.0"},
    "binary": {"model.binary_mode": "true"},
    "quantized_embeddings": {"model.quantize_embeddings": "true"},
}


@dataclass
class AblationResult:
    name: str
    final_val_ppl: float
    final_train_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    zero_fraction: float = math.nan
    diverged: bool = False
    message: str = ""

    @property
    def final_val_loss(self) -> float:
        return math.log(self.final_val_ppl) if self.final_val_ppl > 0 else math.nan


def ablation_configs(base: RunConfig, names=None) -> dict[str, RunConfig]:
    """Variant configs, each differing from ``base`` in exactly one key."""
    out = {}
    for name in names or ABLATIONS:
        cfg = copy.deepcopy(base).apply(ABLATIONS[name])
        diff = config_diff(base, cfg)
        if len(diff) != (0 if name == "full" else 1):
            raise AnalysisError(f"ablation {name!r} changes {sorted(diff)}; expected exactly one key")
        out[name] = cfg
    return out


def run_ablations(base: RunConfig, train_ids, val_ids, names=None, out_dir=None) -> list[AblationResult]:
    """Train every variant with the same seed, data and step budget."""
    from .train import DivergenceError, train

    results = []
    for name, cfg in ablation_configs(base, names).items():
        model = LanguageModel(cfg.model, seed=cfg.train.seed)
        try:
            res = train(model, train_ids, val_ids, cfg.train)
        except (DivergenceError, NonFiniteGradientError, FloatingPointError) as exc:
            results.append(AblationResult(name, math.nan, math.nan, diverged=True, message=str(exc)))
            continue
        last = res.quant_stats[max(res.quant_stats)]
        counts = [layer.weight.data.size for layer in model.quantized_layers()]
        zero = (sum(s.sparsity * c for s, c in zip(last, counts)) / sum(counts)) if counts else math.nan
        results.append(AblationResult(name, res.final_val_ppl, res.steps[-1][2],
                                      res.epoch_mean_losses(), zero))
    if out_dir is not None:
        write_ablations_csv(results, f"{out_dir}/ablations.csv")
    return results


def write_ablations_csv(results: list[AblationResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "final_val_ppl", "final_val_loss", "final_train_loss", "zero_fraction",
                    "diverged", "epoch_losses"])
        for r in results:
            w.writerow([r.name, r.final_val_ppl, r.final_val_loss, r.final_train_loss, r.zero_fraction,
                        int(r.diverged), ";".join(f"{x:.6f}" for x in r.epoch_losses)])


# -- efficiency --------------------------------------------------------------

BENCH_KEYS = ("config", "path", "median_ms_per_token", "iqr_ms", "bytes_fp32", "bytes_packed", "ratio")


def _time_forward(model: LanguageModel, tokens: np.ndarray, repeats: int) -> np.ndarray:
    times = []
    with no_grad():
        model(tokens)  # warm-up, also builds packed indices
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(tokens)
            times.append(time.perf_counter() - t0)
    return np.array(times) * 1000.0 / len(tokens)


def _peak_bytes(model: LanguageModel, tokens: np.ndarray) -> int:
    with no_grad():
        tracemalloc.start()
        try:
            model(tokens)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
    return peak


def _weight_bytes(model: LanguageModel) -> int:
    total = 0
    for name, p in model.named_parameters():
        if name.endswith(".alpha"):
            continue
        total += p.data.size * 4
    for layer in model.ternary_layers():
        if layer.packed is not None:
            total += layer.packed.nbytes + 4 - layer.weight.data.size * 4
    return total


def efficiency_bench(configs: dict[str, object], repeats: int = 10, seq_len: int | None = None,
                     seed: int = 0) -> list[dict]:
    """Per-token forward latency (batch 1) of the dense and packed paths.

    ``configs`` maps a label to a ModelConfig or a LanguageModel. Reports
    median and interquartile range over ``repeats`` timed forwards, a peak
    working-set estimate (weights plus traced forward allocations) and the
    storage accounting.
    """
    if repeats < 10:
        raise ValueError("repeats must be >= 10")
    rows = []
    for label, obj in configs.items():
        model = obj if isinstance(obj, LanguageModel) else LanguageModel(obj, seed=seed)
        n = seq_len or model.cfg.context_len
        tokens = np.random.default_rng(seed).integers(0, model.cfg.vocab_size, n)
        report = storage_report(model)
        fp, pk = report.total()
        for path, variant in (("dense", dense_model(model)), ("packed", pack_model(model))):
            per_tok = _time_forward(variant, tokens, repeats)
            q1, med, q3 = np.percentile(per_tok, [25, 50, 75])
            rows.append({
                "config": label,
                "path": path,
                "median_ms_per_token": float(med),
                "iqr_ms": float(q3 - q1),
                "bytes_fp32": fp,
                "bytes_packed": pk,
                "ratio": fp / pk,
                "peak_working_set_bytes": _weight_bytes(variant) + _peak_bytes(variant, tokens),
                "seq_len": n,
                "repeats": repeats,
            })
    return rows


def write_bench(rows: list[dict], json_path, csv_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump(rows, fh, indent=2)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


BENCH_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": list(BENCH_KEYS),
        "properties": {
            "config": {"type": "string"},
            "path": {"enum": ["dense", "packed"]},
            "median_ms_per_token": {"type": "number", "minimum": 0},
            "iqr_ms": {"type": "number", "minimum": 0},
            "bytes_fp32": {"type": "integer", "minimum": 0},
            "bytes_packed": {"type": "integer", "minimum": 0},
            "ratio": {"type": "number", "exclusiveMinimum": 0},
        },
    },
}


def ablation_table(results: list[AblationResult]) -> str:
    lines = [f"{'configuration':<24}{'val ppl':>10}{'val loss':>10}{'zero frac':>11}"]
    for r in results:
        ppl = "diverged" if r.diverged else f"{r.final_val_ppl:.3f}"
        lines.append(f"{r.name:<24}{ppl:>10}{r.final_val_loss:>10.4f}{r.zero_fraction:>11.4f}")
    return "\n".join(lines)

