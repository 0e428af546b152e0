"""Ternary training loop and frozen-backbone classifier fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import make_batches, steps_per_epoch
from .model import LanguageModel, lm_loss, perplexity
from .optim import AdamW, clip_grad_norm, lr_at
from .quant import QuantStats, clamp_alpha, layer_stats
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float, reason: str):
        super().__init__(f"training diverged at step {step} (loss={loss}): {reason}")
        self.step = step
        self.loss = loss


@dataclass
class TrainResult:
    steps: list[tuple[int, float, float, float]] = field(default_factory=list)
    epochs: list[tuple[int, float, float]] = field(default_factory=list)
    quant_stats: dict[int, list[QuantStats]] = field(default_factory=dict)
    histograms: dict[int, list[tuple[str, float, float, int]]] = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [s[2] for s in self.steps]

    def epoch_mean_losses(self) -> list[float]:
        return [e[2] for e in self.epochs]

    @property
    def final_val_ppl(self) -> float:
        return self.epochs[-1][1] if self.epochs else math.nan


def total_steps(cfg: TrainConfig, n_train: int) -> int:
    return cfg.total_steps or cfg.epochs * steps_per_epoch(n_train, cfg.batch_size, cfg.seq_len)


def requantize(model: LanguageModel) -> None:
    """Refresh every layer's cached tau and signs from the current latent weights."""
    with no_grad():
        for layer in model.quantized_layers():
            layer.quantize()


class _CsvSink:
    def __init__(self, out_dir: Path | None):
        self.files = {}
        self.out_dir = out_dir

    def write(self, name: str, header: Sequence[str], rows) -> None:
        if self.out_dir is None:
            return
        fh = self.files.get(name)
        if fh is None:
            fh = self.files[name] = open(self.out_dir / name, "w", newline="")
            csv.writer(fh).writerow(header)
        csv.writer(fh).writerows(rows)
        fh.flush()

    def close(self) -> None:
        for fh in self.files.values():
            fh.close()


def _epoch_report(model: LanguageModel, val_ids, cfg: TrainConfig, epoch: int,
                  result: TrainResult, sink: _CsvSink) -> float:
    from .analysis import weight_histogram

    val_ppl = perplexity(model, val_ids, cfg.seq_len) if val_ids is not None else math.nan
    requantize(model)
    stats = [layer_stats(layer) for layer in model.quantized_layers()]
    result.quant_stats[epoch] = stats
    sink.write("quant_stats.csv", ("epoch", *QuantStats.HEADER), [(epoch, *s.row()) for s in stats])
    hist = weight_histogram(model, cfg.histogram_bins)
    result.histograms[epoch] = hist
    sink.write("histograms.csv", ("epoch", "layer", "bin_left", "bin_right", "count"),
               [(epoch, *row) for row in hist])
    return val_ppl


def train(model: LanguageModel, train_ids, val_ids, cfg: TrainConfig, out_dir=None,
          checkpoint_fn: Callable[[int], None] | None = None) -> TrainResult:
    """Run the minibatch loop: requantize, forward, STE backward, clip, AdamW.

    Writes train_log.csv, val_log.csv, quant_stats.csv and histograms.csv into
    ``out_dir`` when given. ``checkpoint_fn(step)`` is called every
    ``checkpoint_interval`` steps.
    """
    cfg.validate()
    train_ids = np.asarray(train_ids, dtype=np.int64)
    n_total = total_steps(cfg, len(train_ids))
    params = model.parameters()
    opt = AdamW(params, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay,
                decay=model.decay_parameters())
    sink = _CsvSink(Path(out_dir) if out_dir is not None else None)
    result = TrainResult()
    step = 0
    initial_loss = None
    high_run = 0
    try:
        _epoch_report(model, None, cfg, 0, result, sink)
        for epoch in range(1, cfg.epochs + 1):
            if step >= n_total:
                break
            losses = []
            for x, y in make_batches(train_ids, cfg.batch_size, cfg.seq_len, cfg.seed, epoch):
                if step >= n_total:
                    break
                step += 1
                lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps, n_total)
                model.zero_grad()
                loss = lm_loss(model(x), y, cfg.label_smoothing)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(step, value, "non-finite loss")
                if initial_loss is None:
                    initial_loss = value
                high_run = high_run + 1 if value > cfg.divergence_factor * initial_loss else 0
                if high_run >= cfg.divergence_patience:
                    raise DivergenceError(step, value, f"loss above {cfg.divergence_factor}x initial "
                                                       f"for {high_run} steps")
                loss.backward()
                norm, _ = clip_grad_norm(params, cfg.grad_clip_norm)
                opt.step(lr)
                for layer in model.ternary_layers():
                    clamp_alpha(layer)
                result.steps.append((step, lr, value, norm))
                sink.write("train_log.csv", ("step", "lr", "loss", "grad_norm"), [(step, lr, value, norm)])
                losses.append(value)
                if checkpoint_fn and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                    checkpoint_fn(step)
            val_ppl = _epoch_report(model, val_ids, cfg, epoch, result, sink)
            mean_loss = float(np.mean(losses)) if losses else math.nan
            result.epochs.append((epoch, val_ppl, mean_loss))
            sink.write("val_log.csv", ("epoch", "val_ppl", "train_loss_mean"), [(epoch, val_ppl, mean_loss)])
            log.info("epoch %d: train loss %.4f, val ppl %.3f", epoch, mean_loss, val_ppl)
    finally:
        sink.close()
    return result


# ---------------------------------------------------------------------------
# classifier head on a frozen backbone
# ---------------------------------------------------------------------------

class ClassifierHead:
    """hidden = tanh(W1 h + b1); logits = W2 hidden + b2."""

    def __init__(self, d_in: int, hidden: int, n_classes: int, seed: int = 0, std: float = 0.02):
        rng = np.random.default_rng(seed)
        self.w1 = Tensor(rng.standard_normal((hidden, d_in)) * std, requires_grad=True, name="head.w1")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name="head.b1")
        self.w2 = Tensor(rng.standard_normal((n_classes, hidden)) * std, requires_grad=True, name="head.w2")
        self.b2 = Tensor(np.zeros(n_classes), requires_grad=True, name="head.b2")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, pooled: Tensor) -> Tensor:
        h = T.tanh(T.linear(pooled, self.w1) + self.b1)
        return T.linear(h, self.w2) + self.b2


def pool_last(model: LanguageModel, sequences: Sequence, pad_id: int = 0, batch: int = 32) -> np.ndarray:
    """Final hidden state at the last non-pad position of each sequence."""
    ctx = model.cfg.context_len
    seqs = [np.asarray(s, dtype=np.int64)[-ctx:] for s in sequences]
    if any(len(s) == 0 for s in seqs):
        raise ValueError("empty sequence in fine-tuning data")
    out = []
    with no_grad():
        for i in range(0, len(seqs), batch):
            chunk = seqs[i:i + batch]
            width = max(len(s) for s in chunk)
            ids = np.full((len(chunk), width), pad_id, dtype=np.int64)
            for j, s in enumerate(chunk):
                ids[j, : len(s)] = s
            h = model.hidden(ids).data
            last = np.array([len(s) - 1 for s in chunk])
            out.append(h[np.arange(len(chunk)), last])
    return np.concatenate(out, axis=0)


def classification_metrics(y_true, y_pred, n_classes: int) -> dict[str, float]:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    acc = float(np.mean(y_true == y_pred))
    present = np.unique(y_true)
    if len(present) < 2:
        warnings.warn("only one class present in labels; macro-F1 is degenerate", RuntimeWarning,
                      stacklevel=2)
    f1s = []
    for c in present:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return {"accuracy": acc, "macro_f1": float(np.mean(f1s))}


@dataclass
class HeadConfig:
    n_classes: int = 2
    hidden: int = 0  # 0 -> d_model
    epochs: int = 200
    lr: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0
    pad_id: int = 0


def finetune_classifier(model: LanguageModel, examples: Sequence[tuple[Sequence[int], int]],
                        head_cfg: HeadConfig | None = None) -> tuple[ClassifierHead, dict[str, float]]:
    """Train only a tanh classifier head on pooled features of a frozen backbone."""
    head_cfg = head_cfg or HeadConfig()
    if not examples:
        raise ValueError("fine-tuning dataset is empty")
    labels = np.array([lab for _, lab in examples], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= head_cfg.n_classes:
        raise ValueError(f"labels must lie in 0..{head_cfg.n_classes - 1}")
    feats = pool_last(model, [s for s, _ in examples], head_cfg.pad_id)
    d = feats.shape[1]
    head = ClassifierHead(d, head_cfg.hidden or d, head_cfg.n_classes, head_cfg.seed)
    opt = AdamW(head.parameters(), (0.9, 0.95), weight_decay=head_cfg.weight_decay,
                decay={id(head.w1), id(head.w2)})
    x = Tensor(feats)
    for _ in range(head_cfg.epochs):
        for p in head.parameters():
            p.zero_grad()
        loss = T.cross_entropy(head(x), labels)
        loss.backward()
        opt.step(head_cfg.lr)
    with no_grad():
        pred = head(x).data.argmax(axis=-1)
    metrics = classification_metrics(labels, pred, head_cfg.n_classes)
    metrics["final_loss"] = float(loss.item())
    return head, metrics


def predict(model: LanguageModel, head: ClassifierHead, sequences, pad_id: int = 0) -> np.ndarray:
    feats = pool_last(model, sequences, pad_id)
    with no_grad():
        return head(Tensor(feats)).data.argmax(axis=-1)
