import numpy as np
import pytest

from snnlm.approximators import fit_default_banks
from snnlm.conversion import convert
from snnlm.corpus import synthetic_corpus
from snnlm.model import LanguageModel, ModelConfig, encode_text, split_corpus, train_ann, windows
from snnlm.tensor import Rng

SWEEP_SEEDS = range(10)
SWEEP_BITS = (4, 6, 8)

# one entry per acceptance criterion: (number, passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def put(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)

    return put


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def banks():
    return fit_default_banks(Rng(0))


@pytest.fixture(scope="session")
def corpus_split():
    data = encode_text(synthetic_corpus(100_000, 0))
    return split_corpus(data, 0.1)


@pytest.fixture(scope="session")
def eval_stream(corpus_split):
    """1024 held-out tokens as 16 windows of 64."""
    X, _ = windows(corpus_split[1], 64)
    return X[:16]


@pytest.fixture(scope="session")
def toy_run(corpus_split):
    """The reference run: 2 layers, d_model 64, 8 bits, 3 epochs."""
    train, held = corpus_split
    model = LanguageModel.init(ModelConfig(), Rng(0).child("init"))
    report = train_ann(model, train, 3, 0.05, Rng(0).child("train"), eval_data=held)
    return model, report


@pytest.fixture(scope="session")
def toy_snn(toy_run, banks):
    return convert(toy_run[0], banks)


@pytest.fixture(scope="session")
def toy_audit(toy_run, toy_snn, eval_stream):
    from snnlm.conversion import audit_equivalence

    return audit_equivalence(toy_run[0], toy_snn, eval_stream)


@pytest.fixture(scope="session")
def bits_sweep(corpus_split, eval_stream, banks):
    """One-epoch models for every (seed, bits) pair: argmax agreement and max logit gap on the eval stream."""
    from snnlm.model import ann_forward, snn_forward

    train, held = corpus_split
    out = {}
    for seed in SWEEP_SEEDS:
        for bits in SWEEP_BITS:
            root = Rng(seed)
            model = LanguageModel.init(ModelConfig(bits=bits), root.child("init"))
            train_ann(model, train, 1, 0.05, root.child("train"), eval_data=held)
            snn = convert(model, banks)
            a = ann_forward(model, eval_stream)
            s = snn_forward(snn, eval_stream).logits
            out[seed, bits] = {
                "agreement": float(np.mean(np.argmax(a, -1) == np.argmax(s, -1))),
                "logit_gap": float(np.abs(a - s).max()),
            }
    return out

