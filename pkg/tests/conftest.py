"""Shared oracles: slow reference implementations the fast code must match."""

import numpy as np

DTYPE = np.float64

# One line per acceptance criterion, filled by test_acceptance.py and
# echoed after the run so the verdicts are visible without -s.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def conv2d_reference(x, weights, biases, stride, padding):
    """Nested-loop cross-correlation, the oracle for Conv2d.forward."""
    oc, ic, kh, kw = weights.shape
    c, h, w = x.shape
    assert c == ic
    if padding > 0:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((oc, oh, ow), dtype=DTYPE)
    for o in range(oc):
        for i in range(oh):
            for j in range(ow):
                patch = x[:, i * stride:i * stride + kh,
                          j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * weights[o]) + biases[o]
    return out


def maxpool2d_reference(x, window, stride):
    """Nested-loop window maximum, the oracle for MaxPool2d.forward."""
    c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((c, oh, ow), dtype=DTYPE)
    for k in range(c):
        for i in range(oh):
            for j in range(ow):
                out[k, i, j] = x[k, i * stride:i * stride + window,
                                 j * stride:j * stride + window].max()
    return out


def numeric_gradient(f, x, step=1e-3):
    """Central-difference gradient of scalar f at x, elementwise."""
    grad = np.zeros_like(x, dtype=DTYPE)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f()
        x[idx] = orig - step
        lo = f()
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * step)
        it.iternext()
    return grad


def relative_error(analytic, numeric):
    """max |a - n| / max(1, |a|, |n|), elementwise, reduced to a scalar."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
