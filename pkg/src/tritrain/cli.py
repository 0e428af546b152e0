"""Command-line entry point: ``tritrain <subcommand> ...``.

Every subcommand writes its artifacts under ``--out`` with fixed file names
and exits nonzero on error (2 for a missing input file, 3 for a diverged
training run). Log verbosity comes from the TRITRAIN_LOG environment
variable (DEBUG, INFO, WARNING...).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (ablation_configs, ablation_table, efficiency_bench, embedding_probe,
                       run_ablations, sparsity_profile, trimodality, weight_histogram,
                       write_bench)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, RunConfig, TrainConfig, parse_overrides
from .data import (Vocab, VocabError, corpus_hash, read_corpus, read_labeled, sentiment_task,
                   split_stream)
from .generate import generate
from .inference import pack_model, storage_report
from .model import LanguageModel, mean_nll
from .optim import NonFiniteGradientError
from .packing import PackingError
from .quant import QuantizationError
from .train import DivergenceError, HeadConfig, finetune_classifier, requantize, train

log = logging.getLogger("tritrain")

EXIT_ERROR, EXIT_MISSING, EXIT_DIVERGED = 1, 2, 3
CHECKPOINT = "checkpoint.tlm"
LOCK = ".lock"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


def _stale(lock: Path) -> bool:
    """True when the lock names a process that no longer exists."""
    try:
        pid = int(lock.read_text().strip())
    except (OSError, ValueError):
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return True
    except PermissionError:
        return False
    return False


@contextlib.contextmanager
def out_dir_lock(out: Path):
    """Exclusive ownership of ``out`` for the lifetime of the command."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        if not _stale(lock):
            raise CliError(f"{out} is in use by another invocation (remove {lock} if stale)") from None
        log.warning("reclaiming stale lock %s", lock)
        lock.unlink(missing_ok=True)
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"{out} is in use by another invocation") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}", EXIT_MISSING)
    return p


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(_existing(args.config, "config file")) if args.config else RunConfig()
    cfg.apply(parse_overrides(args.set))
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _load_corpus(args, cfg: RunConfig | None = None) -> tuple[str, Vocab]:
    text = read_corpus(_existing(args.corpus, "corpus"))
    if len(text) < 2:
        raise CliError(f"corpus {args.corpus} is empty")
    vocab = Vocab.from_text(text)
    if cfg is not None:
        cfg.model.vocab_size = len(vocab)
    return text, vocab


def _load_checkpoint(path):
    return load_checkpoint(_existing(path, "checkpoint"))


def write_manifest(path: Path, cfg: RunConfig, corpus: str, text: str, seed: int, out: Path) -> None:
    lines = [
        f"tool.version={__version__}",
        f"corpus.path={Path(corpus).resolve()}",
        f"corpus.sha256={corpus_hash(text)}",
        f"seed={seed}",
        f"out={out.resolve()}",
        cfg.dumps().rstrip("\n"),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# -- subcommands -------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    text, vocab = _load_corpus(args, cfg)
    cfg.validate()
    ids = vocab.encode(text)
    train_ids, val_ids = split_stream(ids, cfg.train.val_fraction)
    with out_dir_lock(Path(args.out)) as out:
        write_manifest(out / "manifest.txt", cfg, args.corpus, text, cfg.train.seed, out)
        model = LanguageModel(cfg.model, seed=cfg.train.seed)

        def checkpoint(step: int) -> None:
            save_checkpoint(model, out / CHECKPOINT, vocab=vocab, config=cfg)
            log.info("step %d: checkpoint written", step)

        try:
            result = train(model, train_ids, val_ids, cfg.train, out_dir=out, checkpoint_fn=checkpoint)
        except (DivergenceError, NonFiniteGradientError) as exc:
            raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
        save_checkpoint(model, out / CHECKPOINT, vocab=vocab, config=cfg)
    print(f"steps={len(result.steps)} final_val_ppl={result.final_val_ppl:.6f}")
    return 0


def cmd_eval(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    text = read_corpus(_existing(args.corpus, "corpus"))
    if ck.vocab is None:
        raise CliError("checkpoint carries no vocabulary")
    missing = ck.vocab.unknown_chars(text)
    if missing:
        raise CliError(f"corpus alphabet does not match the checkpoint vocabulary; unknown characters: "
                       f"{missing!r}")
    ids = ck.vocab.encode(text)
    if args.split == "val":
        _, ids = split_stream(ids, ck.config.train.val_fraction)
    window = args.window or ck.config.train.seq_len
    nll = mean_nll(ck.model, ids, window)
    ppl = float(np.exp(nll))
    print(f"val_ppl={ppl:.6f}")
    if args.out:
        with out_dir_lock(Path(args.out)) as out:
            _json(out / "eval.json", {"checkpoint": str(args.checkpoint), "split": args.split,
                                      "window": window, "tokens": int(len(ids) - 1),
                                      "mean_nll": nll, "val_ppl": ppl})
    return 0


def cmd_generate(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    if ck.vocab is None:
        raise CliError("checkpoint carries no vocabulary")
    prompt = ck.vocab.encode(args.prompt, strict=True)
    trace = [] if args.trace else None
    tokens = generate(ck.model, prompt, args.max_new, p=args.p, temperature=args.temp,
                      seed=args.seed, trace=trace)
    sys.stdout.write(ck.vocab.decode(tokens) + "\n")
    if trace is not None:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for step in trace:
                fh.write(json.dumps(asdict(step)) + "\n")
    return 0


def cmd_finetune(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    if ck.vocab is None:
        raise CliError("checkpoint carries no vocabulary")
    if args.data:
        pairs = read_labeled(_existing(args.data, "labelled data"))
    else:
        # the built-in task may use characters the corpus lacked; those map to <unk>
        pairs = sentiment_task(args.n_examples, args.seed)
    examples = [(ck.vocab.encode(t, strict=bool(args.data)), y) for t, y in pairs]
    n_classes = max((y for _, y in examples), default=1) + 1
    head_cfg = HeadConfig(n_classes=max(2, n_classes), hidden=args.hidden, epochs=args.epochs,
                          lr=args.lr, seed=args.seed, pad_id=ck.vocab.pad_id)
    _, metrics = finetune_classifier(ck.model, examples, head_cfg)
    print(" ".join(f"{k}={v:.6f}" for k, v in metrics.items()))
    with out_dir_lock(Path(args.out)) as out:
        _json(out / "finetune.json", {"head": asdict(head_cfg), "n_examples": len(examples), **metrics})
    return 0


def _model_for_analysis(args) -> LanguageModel:
    if args.checkpoint:
        return _load_checkpoint(args.checkpoint).model
    cfg = _load_config(args)
    return LanguageModel(cfg.model, seed=cfg.train.seed)


def cmd_analyze(args) -> int:
    model = _model_for_analysis(args)
    requantize(model)
    profile = sparsity_profile(model)
    hist = weight_histogram(model, args.bins)
    with out_dir_lock(Path(args.out)) as out:
        profile.write_csv(out / "sparsity.csv")
        with open(out / "histograms.csv", "w", encoding="utf-8") as fh:
            fh.write("layer,bin_left,bin_right,count\n")
            for row in hist:
                fh.write(",".join(map(str, row)) + "\n")
        summary = {"trimodality": trimodality(hist),
                   "blocks": {b.layer_id: b.sparsity for b in profile.blocks}}
        if not model.cfg.quantize_embeddings:
            summary["embedding_probe_sparsity"] = embedding_probe(model).sparsity
        _json(out / "analysis.json", summary)
    for s in profile.layers:
        print(f"{s.layer_id:<24} sparsity={s.sparsity:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    text, vocab = _load_corpus(args, cfg)
    cfg.validate()
    ablation_configs(cfg, args.only)  # isolation check before any training
    train_ids, val_ids = split_stream(vocab.encode(text), cfg.train.val_fraction)
    with out_dir_lock(Path(args.out)) as out:
        write_manifest(out / "manifest.txt", cfg, args.corpus, text, cfg.train.seed, out)
        results = run_ablations(cfg, train_ids, val_ids, args.only, out_dir=out)
    print(ablation_table(results))
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        models = {Path(args.checkpoint).stem: _load_checkpoint(args.checkpoint).model}
    else:
        cfg = _load_config(args)
        models = {"config": cfg.model}
    rows = efficiency_bench(models, repeats=args.repeats, seq_len=args.seq_len,
                            seed=args.seed or 0)
    with out_dir_lock(Path(args.out)) as out:
        write_bench(rows, out / "bench.json", out / "bench.csv")
    for r in rows:
        print(f"{r['config']} {r['path']:<6} {r['median_ms_per_token']:.4f} ms/tok "
              f"(IQR {r['iqr_ms']:.4f}) ratio={r['ratio']:.3f}")
    return 0


def cmd_pack(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    if not ck.model.quantized_layers():
        raise CliError("checkpoint has no quantized layers to pack")
    packed = pack_model(ck.model)
    report = storage_report(ck.model)
    with out_dir_lock(Path(args.out)) as out:
        save_checkpoint(packed, out / CHECKPOINT, packed=True, vocab=ck.vocab, config=ck.config)
        report.write_csv(out / "storage.csv")
    print(report.format())
    return 0


# -- parser ------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file (default: built-in defaults)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override one config key, e.g. --set train.peak_lr=1e-3 (repeatable)")
    p.add_argument("--seed", type=int, default=None,
                   help="seed for initialisation, shuffling and sampling (default: train.seed=0)")


def build_parser() -> argparse.ArgumentParser:
    t, m = TrainConfig(), ModelConfig()
    parser = argparse.ArgumentParser(
        prog="tritrain", formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        description="Ternary quantization-aware training of small decoder-only transformers.",
        epilog=(f"training defaults: peak_lr={t.peak_lr:g}, warmup={t.warmup_steps}, "
                f"weight_decay={t.weight_decay:g}, betas=({t.beta1}, {t.beta2}), "
                f"grad_clip={t.grad_clip_norm}, label_smoothing={t.label_smoothing}, "
                f"batch={t.batch_size}, seq_len={t.seq_len}; model defaults: layers={m.n_layers}, "
                f"d_model={m.d_model}, heads={m.n_heads}, d_intermediate={m.d_intermediate}"))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train", help="train a model on a character corpus", formatter_class=fmt)
    _config_flags(p)
    p.add_argument("--corpus", required=True, help="utf-8 text file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("val", "all"), default="val",
                   help="evaluate the validation tail or the whole corpus")
    p.add_argument("--window", type=int, default=None, help="window length (default: train.seq_len)")
    p.add_argument("--out", default=None, help="directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample text with nucleus sampling", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=200)
    p.add_argument("--p", type=float, default=0.9, help="nucleus mass")
    p.add_argument("--temp", type=float, default=0.8, help="sampling temperature")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", default=None, metavar="PATH",
                   help="write one JSON line per step with the token and its nucleus")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("finetune", help="train a classifier head on a frozen backbone",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None,
                   help="label<TAB>text file (default: built-in toy sentiment task)")
    p.add_argument("--n-examples", type=int, default=200, help="size of the toy task")
    p.add_argument("--hidden", type=int, default=0, help="head hidden width (0: d_model)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("analyze", help="sparsity profile and weight histograms", formatter_class=fmt)
    p.add_argument("--checkpoint", default=None, help="analyse a checkpoint (default: fresh init)")
    _config_flags(p)
    p.add_argument("--bins", type=int, default=101)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="train the ablation grid", formatter_class=fmt)
    _config_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--only", nargs="+", default=None, metavar="NAME",
                   help="subset of: full no_learnable_alpha layernorm no_label_smoothing binary "
                        "quantized_embeddings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="dense vs packed latency and storage", formatter_class=fmt)
    p.add_argument("--checkpoint", default=None, help="benchmark a checkpoint (default: --config)")
    _config_flags(p)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seq-len", type=int, default=None, help="tokens per forward (default: context)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pack", help="convert a checkpoint to 2-bit packed form", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TRITRAIN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, CheckpointError, VocabError, PackingError, QuantizationError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
