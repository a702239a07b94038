import numpy as np
import pytest

from retseg import _pykernels, kernels

pytestmark = pytest.mark.skipif("c" not in kernels.available(), reason="compiled kernels not built")

CONV_CASES = [
    # cout, cin/groups, k, stride, padding, groups
    (8, 1, 3, 2, 1, 8),
    (8, 2, 3, 1, 1, 4),
    (6, 8, 1, 1, 0, 1),
    (4, 8, 3, 1, 1, 1),
    (5, 8, 3, 2, 0, 1),
]


@pytest.mark.parametrize("cout, cg, k, s, p, g", CONV_CASES)
def test_conv_parity(cout, cg, k, s, p, g, rng):
    x = rng.standard_normal((2, 8, 9, 7))
    w = rng.standard_normal((cout, cg, k, k))
    c, py = kernels._ckernels, _pykernels
    y = py.conv2d_forward(x, w, s, p, g)
    np.testing.assert_allclose(c.conv2d_forward(x, w, s, p, g), y, rtol=1e-12, atol=1e-12)
    gy = rng.standard_normal(y.shape)
    np.testing.assert_allclose(
        c.conv2d_backward_input(gy, w, x.shape, s, p, g), py.conv2d_backward_input(gy, w, x.shape, s, p, g), atol=1e-12
    )
    np.testing.assert_allclose(
        c.conv2d_backward_weight(x, gy, w.shape, s, p, g), py.conv2d_backward_weight(x, gy, w.shape, s, p, g), atol=1e-11
    )


def test_upsample_parity(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    np.testing.assert_allclose(kernels._ckernels.upsample2x_forward(x), _pykernels.upsample2x_forward(x), atol=1e-14)
    g = rng.standard_normal((2, 3, 10, 12))
    np.testing.assert_allclose(kernels._ckernels.upsample2x_backward(g), _pykernels.upsample2x_backward(g), atol=1e-13)


def test_decay_mask_parity(rng):
    coords = rng.integers(0, 12, (30, 2)).astype(np.int64)
    np.testing.assert_allclose(kernels._ckernels.decay_mask(coords, 0.96875), _pykernels.decay_mask(coords, 0.96875), rtol=1e-15)


def test_use_switches_backend():
    prev = kernels.BACKEND
    try:
        kernels.use("python")
        assert kernels.BACKEND == "python"
        kernels.use("auto")
        assert kernels.BACKEND == "c"
        with pytest.raises(ValueError):
            kernels.use("fortran")
    finally:
        kernels.use(prev)
