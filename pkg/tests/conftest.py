import numpy as np
import pytest
import torch

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def fd_gradient(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        g[i] = (float(f(up)) - float(f(down))) / (2 * h)
    return g


def autograd_gradient(f, x: np.ndarray) -> np.ndarray:
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    f(t).backward()
    return t.grad.numpy()


def directional_check(loss_fn, tensors, rng: np.random.Generator, h: float = FD_STEP) -> float:
    """Relative error between autograd and central differences along a random direction.

    ``tensors`` are leaf tensors (parameters or inputs) that ``loss_fn()`` reads.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    dirs = [torch.as_tensor(rng.standard_normal(tuple(t.shape)), dtype=torch.float64) for t in tensors]
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)
    with torch.no_grad():
        for t, d in zip(tensors, dirs):
            t.add_(h * d)
        up = float(loss_fn())
        for t, d in zip(tensors, dirs):
            t.sub_(2 * h * d)
        down = float(loss_fn())
        for t, d in zip(tensors, dirs):
            t.add_(h * d)
    numeric = (up - down) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one "criterion N: PASS|FAIL ..." line per acceptance check, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
