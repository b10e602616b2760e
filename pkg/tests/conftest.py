import numpy as np
import pytest

from aligncl.data import EncodedData, SynthSpec, Vocab, generate_synthetic
from aligncl.model import ModelConfig, MultiExitModel

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


TINY_SPEC = SynthSpec(n_classes=3, n_train=48, n_eval=24, vocab_size=20, signal_tokens=2,
                      seq_len=6, noise_rate=0.3, seed=5)


def tiny_config(vocab_size=23, **kw) -> ModelConfig:
    base = dict(vocab_size=vocab_size, n_classes=3, d_model=16, n_layers=3, n_heads=2, d_ff=24,
                d_exit=8, exit_heads=2, max_seq_len=10, dropout=0.1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    train, evl = generate_synthetic(TINY_SPEC)
    vocab = Vocab.build(train)
    return (EncodedData.from_records(train, vocab, 10), EncodedData.from_records(evl, vocab, 10),
            vocab)


@pytest.fixture
def tiny_model(tiny_dataset):
    return MultiExitModel(tiny_config(len(tiny_dataset[2])), seed=0)
