import numpy as np
import pytest


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def fcn_grad_check(model, feats, head, seed=0, step=1e-6):
    """Analytic vs central-difference gradient of ``head`` through ``model``."""
    from ris_muxer.fcn import fcn_gradient
    from ris_muxer.numerics import finite_difference_gradient

    bundle = fcn_gradient(model, feats, head, mode="train", seed=seed)
    analytic = np.concatenate([g.reshape(-1) for g in bundle.grads])
    x0 = model.flat_params()
    probe = model.copy()

    def f(x):
        probe.load_flat(x)
        return fcn_gradient(probe, feats, head, mode="train", seed=seed).value

    numeric = finite_difference_gradient(f, x0, step)
    return analytic, numeric


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Print and remember one acceptance verdict line."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print("\n" + line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
