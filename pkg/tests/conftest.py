import numpy as np
import pytest

from mtomnet.tensor import Tape, Tensor


def numeric_grad(f, arrays, h=1e-6, five_point=False):
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place.

    ``five_point`` uses the fourth-order stencil; with h around 1e-3 it
    resolves gradients far below the round-off floor of the 2-point rule.
    """
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = {}
            for s in ((-2, -1, 1, 2) if five_point else (-1, 1)):
                flat[i] = orig + s * h
                vals[s] = f()
            flat[i] = orig
            if five_point:
                gflat[i] = (vals[-2] - 8 * vals[-1] + 8 * vals[1] - vals[2]) / (12 * h)
            else:
                gflat[i] = (vals[1] - vals[-1]) / (2 * h)
        out.append(g)
    return out


def tape_grad(f, tensors):
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        y = f()
    tape.backward(y)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def max_rel_err(a, n):
    a, n = np.asarray(a, float), np.asarray(n, float)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / den))


def grad_error(f, tensors, h=1e-6, five_point=False):
    """Max relative error of tape gradients of scalar ``f()`` against the oracle."""
    analytic = tape_grad(f, tensors)
    numeric = numeric_grad(lambda: float(f().data), [t.data for t in tensors], h, five_point)
    return max(max_rel_err(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, dtype=np.float64)


def random_cues(rng, mode, batch=2, steps=None, size=24):
    """Random but well-formed model inputs for either dataset mode."""
    from mtomnet.model import Cues

    steps = steps or (5 if mode == "tbd" else 4)
    dim = 3 if mode == "boss" else 2
    cues = Cues(
        frames=rng.uniform(size=(batch, steps, 3, size, size)),
        boxes=rng.uniform(size=(batch, steps, 27, 5)),
        gaze=rng.normal(size=(batch, steps, 2, dim)),
        pose=rng.normal(size=(batch, steps, 2, 17, dim)),
    )
    if mode == "boss":
        ocr = rng.uniform(size=(27, 27))
        ocr = ocr + ocr.T
        cues.ocr = np.broadcast_to(ocr / ocr.sum(1, keepdims=True), (batch, steps, 27, 27)).copy()
    else:
        cues.ego = rng.uniform(size=(batch, steps, 2, 3, size, size))
    return cues


# acceptance criteria report: test_acceptance appends (criterion, passed, detail)
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
