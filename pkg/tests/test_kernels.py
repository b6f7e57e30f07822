"""Low-level convolution kernels: parity between backends and
agreement with finite differences."""

import numpy as np
import pytest

from intrinsic._kernels import numpy_backend, compiled_available

try:
    from intrinsic._kernels import conv_cy
except ImportError:
    conv_cy = None

from tests.conftest import assert_close


def _case(rng, n=2, cin=3, cout=4, size=8, k=3, stride=1):
    pad = k // 2
    x = rng.standard_normal((n, cin, size, size))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w = rng.standard_normal((cout, cin, k, k))
    out = numpy_backend.conv2d_forward(xp, w, stride)
    gy = rng.standard_normal(out.shape)
    return xp, w, gy, stride, k


@pytest.mark.parametrize("stride", [1, 2])
def test_forward_matches_brute_force(rng, stride):
    xp, w, _gy, _s, k = _case(rng, stride=stride)
    out = numpy_backend.conv2d_forward(xp, w, stride)
    n, cout = out.shape[0], out.shape[1]
    for bn in range(n):
        for oc in range(cout):
            for y in range(out.shape[2]):
                for x in range(out.shape[3]):
                    patch = xp[bn, :, y * stride : y * stride + k, x * stride : x * stride + k]
                    assert_close(out[bn, oc, y, x], (patch * w[oc]).sum(), 1e-12)


@pytest.mark.skipif(not compiled_available(), reason="compiled extension not built")
@pytest.mark.parametrize("stride", [1, 2])
def test_backend_parity(rng, stride):
    xp, w, gy, stride, k = _case(rng, cin=5, cout=7, size=11, stride=stride)
    assert_close(
        conv_cy.conv2d_forward(xp, w, stride),
        numpy_backend.conv2d_forward(xp, w, stride),
        1e-12,
        "forward",
    )
    assert_close(
        conv_cy.conv2d_grad_weight(gy, xp, stride, k, k),
        numpy_backend.conv2d_grad_weight(gy, xp, stride, k, k),
        1e-12,
        "grad_weight",
    )
    assert_close(
        conv_cy.conv2d_grad_input_padded(gy, w, stride, xp.shape[2], xp.shape[3]),
        numpy_backend.conv2d_grad_input_padded(gy, w, stride, xp.shape[2], xp.shape[3]),
        1e-12,
        "grad_input",
    )


@pytest.mark.parametrize("stride", [1, 2])
def test_gradients_match_finite_differences(rng, stride):
    xp, w, gy, stride, k = _case(rng, n=1, cin=2, cout=3, size=6, stride=stride)

    def loss():
        return float((numpy_backend.conv2d_forward(xp, w, stride) * gy).sum())

    gw = numpy_backend.conv2d_grad_weight(gy, xp, stride, k, k)
    eps = 1e-6
    for idx in np.ndindex(*w.shape):
        orig = w[idx]
        w[idx] = orig + eps
        fp = loss()
        w[idx] = orig - eps
        fm = loss()
        w[idx] = orig
        assert_close(gw[idx], (fp - fm) / (2 * eps), 1e-5)

    gx = numpy_backend.conv2d_grad_input_padded(gy, w, stride, xp.shape[2], xp.shape[3])
    flat = xp.reshape(-1)
    probe = np.random.default_rng(5).choice(flat.size, 40, replace=False)
    for idx in probe:
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = loss()
        flat[idx] = orig - eps
        fm = loss()
        flat[idx] = orig
        assert_close(gx.reshape(-1)[idx], (fp - fm) / (2 * eps), 1e-5)


def test_overlapping_windows_accumulate(rng):
    # stride 1 with a 3x3 kernel means each padded input pixel feeds up
    # to nine output pixels; the input gradient must sum all of them.
    xp = np.zeros((1, 1, 5, 5))
    w = np.ones((1, 1, 3, 3))
    gy = np.ones((1, 1, 3, 3))
    gx = numpy_backend.conv2d_grad_input_padded(gy, w, 1, 5, 5)
    assert gx[0, 0, 2, 2] == 9.0
    assert gx[0, 0, 0, 0] == 1.0
    assert gx[0, 0, 2, 0] == 3.0


def test_backend_env_rejects_unknown(monkeypatch):
    import importlib
    import intrinsic._kernels as kernels
    from intrinsic.errors import ConfigError

    monkeypatch.setenv("INTRINSIC_KERNELS", "cuda")
    with pytest.raises(ConfigError):
        importlib.reload(kernels)
    monkeypatch.delenv("INTRINSIC_KERNELS")
    importlib.reload(kernels)
    assert kernels.BACKEND in ("numpy", "compiled")
