import csv
import math
import warnings

import numpy as np
import pytest

from conftest import tiny_model_config, tiny_run_config
from tritrain.data import (Vocab, VocabError, make_batches, read_labeled, sentiment_task,
                           split_stream, steps_per_epoch, synthetic_corpus, unigram_perplexity,
                           window_starts)
from tritrain.model import LanguageModel, lm_loss
from tritrain.optim import AdamW, NonFiniteGradientError, clip_grad_norm, global_grad_norm, lr_at
from tritrain.tensor import Tensor
from tritrain.train import (DivergenceError, HeadConfig, classification_metrics,
                            finetune_classifier, predict, total_steps, train)

ADAM_ONE_STEP = 0.99900000001  # 1 - 1e-3 / (1 + 1e-8)


def param(values, grad):
    p = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, dtype=np.float64)
    p.grad[...] = grad
    return p


# -- schedule ---------------------------------------------------------------

def test_lr_schedule_points():
    assert lr_at(0, 1e-3, 1000, 5000) == 0.0
    assert lr_at(1000, 1e-3, 1000, 5000) == 1e-3
    assert abs(lr_at(3000, 1e-3, 1000, 5000) - 5e-4) < 1e-12
    assert lr_at(5000, 1e-3, 1000, 5000) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(9999, 1e-3, 1000, 5000) == lr_at(5000, 1e-3, 1000, 5000)


def test_lr_cosine_monotone():
    lrs = [lr_at(s, 1e-3, 100, 1000) for s in range(100, 1001)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    warm = [lr_at(s, 1e-3, 100, 1000) for s in range(0, 101)]
    assert all(b > a for a, b in zip(warm, warm[1:]))


# -- AdamW ------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_noop():
    p = param([1.0, -2.0], 0.0)
    AdamW([p], weight_decay=0.0).step(1e-3)
    assert p.data.tolist() == [1.0, -2.0]


def test_adamw_one_step_oracle():
    p = param([1.0], 1.0)
    AdamW([p], (0.9, 0.95), 1e-8, 0.0).step(1e-3)
    assert abs(p.data[0] - ADAM_ONE_STEP) < 1e-15


def test_adamw_scalar_recursion_oracle():
    r = np.random.default_rng(0)
    grads = r.standard_normal(20)
    p = param([0.5], 0.0)
    opt = AdamW([p], (0.9, 0.95), 1e-8, 0.1, decay={id(p)})
    theta, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        p.grad[0] = g
        opt.step(1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        theta *= 1 - 1e-2 * 0.1
        theta -= 1e-2 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
    assert abs(p.data[0] - theta) < 1e-12


def test_adamw_decoupled_decay_only():
    p = param([2.0], 0.0)
    AdamW([p], weight_decay=0.5, decay={id(p)}).step(0.1)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_adamw_nonfinite_names_parameter():
    p = param([1.0], np.nan)
    p.name = "blocks.0.attn.q.weight"
    with pytest.raises(NonFiniteGradientError, match="blocks.0.attn.q.weight"):
        AdamW([p]).step(1e-3)


def test_model_decay_policy():
    model = LanguageModel(tiny_model_config(), seed=0)
    decayed = {n for n, p in model.named_parameters() if id(p) in model.decay_parameters()}
    assert decayed == {n for n, _ in model.named_parameters()
                       if n.startswith("blocks.") and n.endswith(".weight")}


# -- clipping ---------------------------------------------------------------

def test_clip_noop_and_halving():
    p = param([0.3, 0.4], [0.3, 0.4])
    assert clip_grad_norm([p], 1.0) == (pytest.approx(0.5), 1.0)
    q = param([0.0, 0.0], [1.2, 1.6])
    norm, scale = clip_grad_norm([q], 1.0)
    assert norm == pytest.approx(2.0) and scale == pytest.approx(0.5)
    assert abs(global_grad_norm([q]) - 1.0) < 1e-9


def test_clip_random_recompute(rng):
    for _ in range(20):
        ps = [param(np.zeros(s), rng.standard_normal(s) * rng.uniform(0.01, 3)) for s in (5, 7, 3)]
        pre = global_grad_norm(ps)
        clip_grad_norm(ps, 1.0)
        assert abs(global_grad_norm(ps) - min(pre, 1.0)) < 1e-6


def test_clip_nonfinite():
    with pytest.raises(NonFiniteGradientError):
        clip_grad_norm([param([1.0], np.inf)], 1.0)
    with pytest.raises(ValueError):
        clip_grad_norm([param([1.0], 1.0)], 0.0)


# -- data -------------------------------------------------------------------

def test_vocab_bijective_and_deterministic():
    v = Vocab.from_text("hello world")
    assert v.symbols[:2] == ["<pad>", "<unk>"] and len(v) == 2 + len(set("hello world"))
    assert v.decode(v.encode("hello")) == "hello"
    assert Vocab.from_text("dlrow olleh") == v
    assert Vocab.loads(v.dumps()) == v


def test_vocab_unknown_chars():
    v = Vocab.from_text("abc")
    assert v.encode("abz")[-1] == v.unk_id
    with pytest.raises(VocabError, match="'z'"):
        v.encode("abz", strict=True)


def test_batches_example():
    stream = np.arange(5)  # a b c d e
    batches = list(make_batches(stream, 8, 2, seed=0))
    pairs = sorted((tuple(x), tuple(y)) for xb, yb in batches for x, y in zip(xb, yb))
    assert pairs == [((0, 1), (1, 2)), ((2, 3), (3, 4))]


def test_batches_deterministic_and_reshuffled():
    stream = np.arange(1000)
    a = [x.tolist() for x, _ in make_batches(stream, 4, 10, seed=3, epoch=1)]
    b = [x.tolist() for x, _ in make_batches(stream, 4, 10, seed=3, epoch=1)]
    c = [x.tolist() for x, _ in make_batches(stream, 4, 10, seed=3, epoch=2)]
    assert a == b and a != c


def test_batches_cover_stream_once():
    stream = np.arange(1003)
    counts = np.zeros(1003, dtype=int)
    for x, y in make_batches(stream, 7, 10, seed=1):
        assert np.array_equal(y, x + 1)
        counts[x.ravel()] += 1
    n_windows = (1003 - 1) // 10
    assert counts[: n_windows * 10].tolist() == [1] * (n_windows * 10)
    assert not counts[n_windows * 10:].any()


def test_batches_errors_and_counts():
    with pytest.raises(ValueError):
        list(make_batches(np.arange(5), 2, 5, 0))
    assert len(window_starts(101, 10)) == 10
    assert steps_per_epoch(101, 3, 10) == 4


def test_split_stream_tail_is_validation():
    tr, va = split_stream(np.arange(100), 0.1)
    assert tr.tolist() == list(range(90)) and va.tolist() == list(range(90, 100))


def test_unigram_perplexity_counts():
    assert unigram_perplexity("abab") == pytest.approx(2.0)
    assert unigram_perplexity("aaaa") == pytest.approx(1.0)


def test_synthetic_corpus_deterministic():
    a = synthetic_corpus(5000, 1)
    assert len(a) == 5000 and a == synthetic_corpus(5000, 1) and a != synthetic_corpus(5000, 2)


def test_labeled_file(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text("1\tgood day\n\n0\tbad day\n")
    assert read_labeled(p) == [("good day", 1), ("bad day", 0)]
    p.write_text("x\tbad\n")
    with pytest.raises(ValueError):
        read_labeled(p)


# -- training loop ----------------------------------------------------------

def _run(small_corpus, **train_kw):
    text, vocab = small_corpus
    cfg = tiny_run_config(len(vocab), **train_kw)
    tr, va = split_stream(vocab.encode(text), cfg.train.val_fraction)
    model = LanguageModel(cfg.model, seed=cfg.train.seed)
    return model, train(model, tr, va, cfg.train), cfg


def test_zero_lr_step_leaves_parameters(small_corpus):
    text, vocab = small_corpus
    cfg = tiny_run_config(len(vocab), peak_lr=0.0, total_steps=1)
    model = LanguageModel(cfg.model, seed=0)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    tr, va = split_stream(vocab.encode(text), 0.1)
    x, y = next(make_batches(tr, cfg.train.batch_size, cfg.train.seq_len, 0, 1))
    initial = lm_loss(LanguageModel(cfg.model, seed=0)(x), y, 0.1).item()
    res = train(model, tr, va, cfg.train)
    assert res.losses == [pytest.approx(initial, rel=1e-6)]
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n]), n


def test_training_is_deterministic(small_corpus):
    _, a, _ = _run(small_corpus, total_steps=15)
    model_b, b, _ = _run(small_corpus, total_steps=15)
    assert a.losses == b.losses
    assert len(a.losses) == 15


def test_training_reduces_loss_and_keeps_alpha_positive(small_corpus):
    model, res, cfg = _run(small_corpus, epochs=2)
    means = res.epoch_mean_losses()
    assert means[1] < means[0]
    assert all(float(layer.alpha.data[0]) > 0 for layer in model.ternary_layers())
    assert all(np.isfinite(res.losses))
    assert set(res.quant_stats) == {0, 1, 2} and set(res.histograms) == {0, 1, 2}
    assert res.steps[-1][0] == total_steps(cfg.train, int(len(small_corpus[0]) * 0.9))


def test_clipped_norm_bound(small_corpus):
    text, vocab = small_corpus
    cfg = tiny_run_config(len(vocab))
    model = LanguageModel(cfg.model, seed=0)
    x, y = next(make_batches(vocab.encode(text), 8, 32, 0, 1))
    lm_loss(model(x), y, 0.1).backward()
    clip_grad_norm(model.parameters(), 1e-3)
    assert global_grad_norm(model.parameters()) <= 1e-3 + 1e-6


def test_training_writes_logs(small_corpus, tmp_path):
    text, vocab = small_corpus
    cfg = tiny_run_config(len(vocab), total_steps=12, checkpoint_interval=5)
    tr, va = split_stream(vocab.encode(text), 0.1)
    calls = []
    train(LanguageModel(cfg.model), tr, va, cfg.train, out_dir=tmp_path, checkpoint_fn=calls.append)
    assert calls == [5, 10]
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert rows[0] == ["step", "lr", "loss", "grad_norm"] and len(rows) == 13
    hist = list(csv.reader(open(tmp_path / "histograms.csv")))
    assert hist[0] == ["epoch", "layer", "bin_left", "bin_right", "count"]
    q = list(csv.reader(open(tmp_path / "quant_stats.csv")))
    assert q[0][1:] == ["layer_id", "sparsity", "fraction_pos", "fraction_neg", "tau", "alpha"]
    assert (tmp_path / "val_log.csv").exists()


def test_divergence_guard(small_corpus):
    text, vocab = small_corpus
    cfg = tiny_run_config(len(vocab), peak_lr=50.0, warmup_steps=0, total_steps=60,
                          divergence_patience=3, grad_clip_norm=1e6, divergence_factor=1.5)
    tr, va = split_stream(vocab.encode(text), 0.1)
    with pytest.raises((DivergenceError, NonFiniteGradientError)):
        train(LanguageModel(cfg.model, seed=0), tr, va, cfg.train)


# -- classifier head --------------------------------------------------------

def _pattern_task(vocab, n=60):
    r = np.random.default_rng(0)
    out = []
    for i in range(n):
        label = i % 2
        core = "aaaa" if label else "zzzz"
        noise = "".join(r.choice(list("mnop"), size=3))
        out.append((vocab.encode(noise + core), label))
    return out


def test_finetune_separable_task_and_frozen_backbone():
    vocab = Vocab.from_text("aaaazzzzmnop")
    model = LanguageModel(tiny_model_config(vocab_size=len(vocab)), seed=0)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    examples = _pattern_task(vocab)
    head, metrics = finetune_classifier(model, examples, HeadConfig(epochs=300, lr=1e-2))
    assert metrics["accuracy"] >= 0.95
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n])
    assert predict(model, head, [s for s, _ in examples]).tolist() == [y for _, y in examples]


def test_finetune_single_class_and_empty():
    vocab = Vocab.from_text("ab")
    model = LanguageModel(tiny_model_config(vocab_size=len(vocab)), seed=0)
    with pytest.warns(RuntimeWarning, match="one class"):
        _, metrics = finetune_classifier(model, [(vocab.encode("ab"), 0)] * 4, HeadConfig(epochs=5))
    assert metrics["accuracy"] == 1.0
    with pytest.raises(ValueError, match="empty"):
        finetune_classifier(model, [], HeadConfig())


def test_classification_metrics():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        m = classification_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert m["accuracy"] == 0.75
    assert m["macro_f1"] == pytest.approx((2 / 3 + 0.8) / 2)


def test_sentiment_task_is_balanced_and_deterministic():
    a = sentiment_task(200, 0)
    assert a == sentiment_task(200, 0)
    assert 60 < sum(y for _, y in a) < 140
