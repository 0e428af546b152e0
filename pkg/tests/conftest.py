import numpy as np
import pytest

from tritrain.config import ModelConfig, RunConfig
from tritrain.data import Vocab, synthetic_corpus
from tritrain.tensor import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, d_model=16, n_heads=2, d_intermediate=32, vocab_size=11, context_len=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_run_config(vocab_size: int, **train) -> RunConfig:
    cfg = RunConfig(model=ModelConfig(n_layers=2, d_model=32, n_heads=2, d_intermediate=64,
                                      vocab_size=vocab_size, context_len=32))
    t = dict(seq_len=32, batch_size=8, epochs=2, warmup_steps=10)
    t.update(train)
    cfg.apply({f"train.{k}": str(v) for k, v in t.items()})
    return cfg


@pytest.fixture(scope="session")
def small_corpus():
    text = synthetic_corpus(20_000, seed=0)
    return text, Vocab.from_text(text)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed in the terminal summary whatever the capture mode
CRITERIA: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    CRITERIA[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
