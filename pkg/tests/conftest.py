"""Shared fixtures and numeric helpers for the test suite."""

import contextlib

import numpy as np
import pytest

from intrinsic.image import ImageF

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Collect one pass/fail line per acceptance criterion.

    A fixture rather than a plain helper so the line lands in the list
    owned by the conftest instance pytest registered its hooks on; the
    lines are echoed after the run summary, where they stay visible
    even though passing tests have their stdout captured.
    """

    def _record(label: str, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"{label}: {'PASS' if ok else 'FAIL'} ({detail})")

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def assert_close(actual, desired, rtol, context=""):
    """Elementwise closeness with a floored scale.

    The bound is rtol * max(inf-norms, 1e-8), so comparisons stay
    meaningful near zero without demanding absolute precision from
    quantities that are legitimately tiny.
    """
    actual = np.asarray(actual, dtype=np.float64)
    desired = np.asarray(desired, dtype=np.float64)
    scale = max(np.abs(actual).max(initial=0.0), np.abs(desired).max(initial=0.0), 1e-8)
    gap = np.abs(actual - desired).max(initial=0.0)
    assert gap <= rtol * scale, (
        f"{context} max |diff| {gap:.3e} exceeds {rtol:.1e} * scale {scale:.3e}"
    )


def numeric_grad(f, arr, eps=1e-6, max_entries=None, rng=None):
    """Central-difference gradient of scalar f() with respect to arr.

    Mutates arr in place entry by entry and restores it. When
    max_entries is given, a random subset of entries is probed and the
    returned mask says which; compare only those against the analytic
    gradient.
    """
    flat = arr.reshape(-1)
    indices = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=max_entries, replace=False)
    grad = np.zeros_like(flat)
    mask = np.zeros(flat.size, dtype=bool)
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = f()
        flat[idx] = orig - eps
        fm = f()
        flat[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
        mask[idx] = True
    return grad.reshape(arr.shape), mask.reshape(arr.shape)


@contextlib.contextmanager
def frozen_buffers(net):
    """Restore batch-norm running statistics on exit.

    Training-mode forwards update them, which would contaminate
    repeated loss evaluations in finite-difference probes.
    """
    saved = [(arr, arr.copy()) for _name, arr in net.buffers()]
    try:
        yield
    finally:
        for arr, copy in saved:
            arr[...] = copy


_SEPARATED_COLORS = np.array(
    [
        [0.95, 0.95, 0.95],
        [0.04, 0.04, 0.04],
        [0.85, 0.08, 0.08],
        [0.08, 0.75, 0.10],
        [0.10, 0.12, 0.85],
        [0.80, 0.78, 0.06],
        [0.75, 0.08, 0.72],
        [0.06, 0.70, 0.68],
    ]
)


def separated_guide(height, width, n_regions, rng):
    """Piecewise-constant guide whose region colors sit far apart.

    The palette entries differ by many bandwidths in LUV, so the
    bilateral affinity between regions is effectively zero under both
    solver backends; this is the regime where grid quantization cannot
    move the answer.
    """
    n_regions = min(n_regions, len(_SEPARATED_COLORS))
    sites = np.stack(
        [rng.uniform(0, height, n_regions), rng.uniform(0, width, n_regions)], axis=1
    )
    yy, xx = np.mgrid[0:height, 0:width]
    d2 = (yy[:, :, None] - sites[:, 0]) ** 2 + (xx[:, :, None] - sites[:, 1]) ** 2
    labels = d2.argmin(axis=2)
    palette = _SEPARATED_COLORS[rng.permutation(len(_SEPARATED_COLORS))[:n_regions]]
    return ImageF(palette[labels])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
