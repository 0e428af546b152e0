"""Packed/dense inference copies of a model and storage accounting."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .model import LanguageModel, parameter_shapes
from .packing import pack
from .quant import compute_threshold, ternary_sign


def pack_model(model: LanguageModel) -> LanguageModel:
    """Copy of ``model`` whose quantized layers run through packed_matmul."""
    out = copy.deepcopy(model)
    for layer in out.quantized_layers():
        if layer.packed is None:
            w = layer.weight.data
            signs = ternary_sign(w, compute_threshold(w), layer.binary)
            layer.packed = pack(signs, float(layer.alpha.data[0]))
    out.inference_only = True
    return out


def dense_model(model: LanguageModel) -> LanguageModel:
    """Copy of ``model`` with each quantized layer replaced by its materialised alpha * S."""
    out = copy.deepcopy(model)
    for layer in out.quantized_layers():
        wq = layer.packed.dense(layer.weight.dtype) if layer.packed is not None else layer.dense_weight()
        layer.weight.data[...] = wq
        layer.packed = None
        layer.quantize_enabled = False
    return out


@dataclass
class StorageRow:
    name: str
    section: str
    params: int
    quantized: bool
    fp32_bytes: int
    packed_bytes: int


@dataclass
class StorageReport:
    rows: list[StorageRow] = field(default_factory=list)

    def total(self, section: str | None = None, quantized: bool | None = None) -> tuple[int, int]:
        sel = [r for r in self.rows
               if (section is None or r.section == section)
               and (quantized is None or r.quantized == quantized)]
        return sum(r.fp32_bytes for r in sel), sum(r.packed_bytes for r in sel)

    @staticmethod
    def _ratio(pair: tuple[int, int]) -> float:
        fp, pk = pair
        return fp / pk if pk else float("nan")

    @property
    def overall_ratio(self) -> float:
        return self._ratio(self.total())

    @property
    def quantized_ratio(self) -> float:
        return self._ratio(self.total(quantized=True))

    def summary(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for sec in ("embeddings", "transformer"):
            fp, pk = self.total(sec)
            out[f"{sec}_fp32_bytes"] = fp
            out[f"{sec}_packed_bytes"] = pk
        fp, pk = self.total()
        out.update(total_fp32_bytes=fp, total_packed_bytes=pk, overall_ratio=self.overall_ratio,
                   quantized_layer_ratio=self.quantized_ratio)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "section", "params", "quantized", "fp32_bytes", "packed_bytes"])
            for r in self.rows:
                w.writerow([r.name, r.section, r.params, int(r.quantized), r.fp32_bytes, r.packed_bytes])

    def format(self) -> str:
        s = self.summary()
        mb = 1024 * 1024
        lines = [
            f"embeddings   fp32 {s['embeddings_fp32_bytes'] / mb:10.3f} MiB  "
            f"packed {s['embeddings_packed_bytes'] / mb:10.3f} MiB",
            f"transformer  fp32 {s['transformer_fp32_bytes'] / mb:10.3f} MiB  "
            f"packed {s['transformer_packed_bytes'] / mb:10.3f} MiB",
            f"total        fp32 {s['total_fp32_bytes'] / mb:10.3f} MiB  "
            f"packed {s['total_packed_bytes'] / mb:10.3f} MiB",
            f"overall ratio {s['overall_ratio']:.3f}x, quantized layers {s['quantized_layer_ratio']:.3f}x",
        ]
        return "\n".join(lines)


def packed_layer_bytes(n_weights: int) -> int:
    """2-bit codes plus one fp32 alpha."""
    return -(-n_weights // 4) + 4


def storage_report(model_or_cfg: LanguageModel | ModelConfig) -> StorageReport:
    """Byte accounting of fp32 vs packed storage, computed from parameter counts.

    fp32 stores 4 bytes per weight (alpha excluded: it does not exist in the
    full-precision baseline); packed stores quantized layers as 2-bit codes
    plus an fp32 alpha and everything else as fp32.
    """
    if isinstance(model_or_cfg, LanguageModel):
        cfg = model_or_cfg.cfg
        quantized = {layer.weight.name for layer in model_or_cfg.quantized_layers()}
    else:
        cfg = model_or_cfg
        quantized = None
    shapes = parameter_shapes(cfg)
    report = StorageReport()
    for name, shape in shapes.items():
        if name.endswith(".alpha"):
            continue
        n = int(np.prod(shape))
        if quantized is None:
            is_q = cfg.quantize and name[: -len(".weight")] + ".alpha" in shapes
        else:
            is_q = name in quantized
        section = "embeddings" if name.split(".")[0] in ("embed", "output") else "transformer"
        report.rows.append(StorageRow(name, section, n, is_q, 4 * n,
                                      packed_layer_bytes(n) if is_q else 4 * n))
    return report

