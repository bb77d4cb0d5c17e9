import os
import subprocess
import sys

import numpy as np
import pytest

from voxequiv import kernels
from voxequiv._accel import HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def direct_conv(x, w, b, stride):
    """Loop-over-taps reference convolution with one voxel of zero padding."""
    n, c, size = x.shape[:3]
    o = kernels.conv_out_size(size, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], o, o, o)) + b[None, :, None, None, None]
    for i in range(3):
        for j in range(3):
            for k in range(3):
                patch = xp[:, :, i:i + stride * o:stride, j:j + stride * o:stride, k:k + stride * o:stride]
                out += np.einsum("ncxyz,dc->ndxyz", patch, w[:, :, i, j, k])
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_forward_matches_direct(stride):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((2, 3, 8, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    ref = direct_conv(x, w, b, stride)
    assert np.allclose(kernels.conv3d_forward.numpy_impl(x, w, b, stride), ref, atol=1e-12)
    if HAVE_NUMBA:
        assert np.allclose(kernels.conv3d_forward.numba_impl(x, w, b, stride), ref, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_is_adjoint(stride):
    rng = np.random.default_rng(10 + stride)
    x = rng.standard_normal((2, 3, 8, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    o = kernels.conv_out_size(8, stride)
    g = rng.standard_normal((2, 4, o, o, o))
    gx, gw, gb = kernels.conv3d_backward.numpy_impl(x, w, g, stride)
    zero = np.zeros(4)
    # <conv(x, w), g> is bilinear, so its gradients are exact inner products
    y = kernels.conv3d_forward.numpy_impl(x, w, zero, stride)
    assert np.isclose(np.sum(gx * x), np.sum(y * g))
    assert np.isclose(np.sum(gw * w), np.sum(y * g))
    assert np.allclose(gb, g.sum(axis=(0, 2, 3, 4)))
    if HAVE_NUMBA:
        for a, b_ in zip((gx, gw, gb), kernels.conv3d_backward.numba_impl(x, w, g, stride)):
            assert np.allclose(a, b_, atol=1e-11)


def test_trilinear_exact_at_nodes_and_zero_outside():
    rng = np.random.default_rng(0)
    grid = rng.standard_normal((2, 5, 5, 5))
    nodes = np.array([[0, 0, 0], [4, 4, 4], [1, 2, 3]], dtype=float)
    out = kernels.trilinear_sample.numpy_impl(grid, nodes)
    assert np.allclose(out[:, 2], grid[:, 1, 2, 3])
    far = kernels.trilinear_sample.numpy_impl(grid, np.array([[-2.0, 0, 0], [10.0, 1, 1]]))
    assert np.all(far == 0)
    mid = kernels.trilinear_sample.numpy_impl(grid, np.array([[0.5, 0.0, 0.0]]))
    assert np.allclose(mid[:, 0], 0.5 * (grid[:, 0, 0, 0] + grid[:, 1, 0, 0]))


@needs_numba
def test_trilinear_paths_agree():
    rng = np.random.default_rng(1)
    grid = rng.standard_normal((3, 9, 9, 9))
    pts = rng.uniform(-1.5, 9.5, (500, 3))
    assert np.allclose(kernels.trilinear_sample.numpy_impl(grid, pts),
                       kernels.trilinear_sample.numba_impl(grid, pts), atol=1e-13)


def test_disable_flag_selects_numpy():
    code = "from voxequiv import _accel; print(_accel.USE_NUMBA)"
    env = dict(os.environ, VOXEQUIV_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
