import numpy as np
import pytest

from ppf import autodiff as ad

ACCEPTANCE = []


def record(criterion: str, ok: bool, detail: str = ""):
    """Log one acceptance line (shown in the terminal summary) and assert it."""
    ACCEPTANCE.append((criterion, bool(ok), detail))
    assert ok, f"{criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}")


def numeric_grad(f, arrays, i, h=1e-5):
    """Central differences of scalar ``f(*tensors)`` w.r.t. ``arrays[i]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = np.zeros_like(base[i])
    with ad.no_grad():
        for idx in np.ndindex(base[i].shape):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[i][idx] += h
            minus[i][idx] -= h
            fp = float(f(*[ad.Tensor(a) for a in plus]).data)
            fm = float(f(*[ad.Tensor(a) for a in minus]).data)
            out[idx] = (fp - fm) / (2 * h)
    return out


def analytic_grads(f, arrays):
    ts = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with ad.new_tape():
        out = f(*ts)
        ad.backward(out)
    return [t.grad if t.grad is not None else np.zeros(t.shape) for t in ts]


def grad_error(f, arrays, h=1e-5, atol=1e-7):
    """Largest violation ratio of |analytic - numeric| <= max(atol, 1e-4 * scale).

    Returns the worst ``|diff| / max(atol, max(|a|, |n|))``; pass when < 1e-4.
    """
    worst = 0.0
    for i, g in enumerate(analytic_grads(f, arrays)):
        n = numeric_grad(f, arrays, i, h)
        scale = np.maximum(np.maximum(np.abs(g), np.abs(n)), atol / 1e-4)
        worst = max(worst, float((np.abs(g - n) / scale).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
