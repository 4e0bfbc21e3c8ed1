import numpy as np
import pytest

from ktm.data import Tokenizer
from ktm.encoder import MergeEncoder
from ktm.model import ModelConfig, attach_lora, init_params


def central_difference(f, arrays, h=1e-4, max_elements=None, rng=None):
    """Finite-difference gradient of scalar ``f()`` w.r.t. each array (perturbed in place).

    Returns ``[(array_index, flat_index, estimate), ...]``; with
    ``max_elements`` only a random subset of entries per array is probed.
    """
    out = []
    for ai, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            out.append((ai, int(i), (fp - fm) / (2 * h)))
    return out


def max_relative_error(analytic, numeric, floor=1e-3):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@pytest.fixture(scope="session")
def tok():
    return Tokenizer()


@pytest.fixture
def tiny_config(tok):
    return ModelConfig(vocab_size=tok.vocab_size, embed_dim=16, n_layers=2, n_heads=2, max_seq_len=64)


@pytest.fixture
def tiny_model(tiny_config):
    rng = np.random.default_rng(0)
    params = init_params(tiny_config, rng)
    adapters = attach_lora(params, rng, rank=4, alpha=16.0, dropout_p=0.05)
    return params, adapters


@pytest.fixture
def tiny_encoder(tiny_config):
    return MergeEncoder(4, tiny_config.embed_dim, np.random.default_rng(1))


# -- acceptance criterion ledger ---------------------------------------------------

_CRITERIA: dict = {}
N_CRITERIA = 11


class CriterionRecorder:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list = []

    def check(self, ok: bool, detail: str) -> bool:
        self.checks.append((bool(ok), detail))
        return bool(ok)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for ok, _ in self.checks)

    def line(self) -> str:
        detail = "; ".join(d for _, d in self.checks)
        return f"criterion {self.number:>2} {'PASS' if self.passed else 'FAIL'}  {self.title}: {detail}"


@pytest.fixture
def criterion():
    """``criterion(n, title)`` returns a recorder whose checks feed the summary."""
    def make(number, title):
        rec = _CRITERIA.setdefault(number, CriterionRecorder(number, title))
        return rec
    return make


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    # a criterion that never ran (deselected, crashed in setup) counts as a failure
    for n in range(1, N_CRITERIA + 1):
        rec = _CRITERIA.get(n)
        terminalreporter.write_line(rec.line() if rec else f"criterion {n:>2} FAIL  not run")
