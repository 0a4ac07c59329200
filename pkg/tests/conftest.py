import numpy as np
import pytest

from vlmdrive import tensor as T
from vlmdrive.config import ModelConfig
from vlmdrive.tensor import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def analytic_grads(build, inputs: list[Tensor]) -> list[np.ndarray]:
    """Backprop the scalar returned by ``build()`` and collect grads of ``inputs``."""
    for t in inputs:
        t.zero_grad()
    with T.Tape() as tape:
        loss = build()
        tape.backward(loss)
    return [t.grad.copy() for t in inputs]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(num_classes=4, dim=16, heads=4, hidden=24, t=3, n=6, s=5,
                       d_global=10, d_local=12, d_text=9, k=2, k_hat=1, dropout=0.0)


# acceptance summary ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
