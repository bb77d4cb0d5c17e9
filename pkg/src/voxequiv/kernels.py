"""Hot numeric kernels: 3D convolution, Gaussian splatting, trilinear sampling.

Every kernel has a pure-numpy implementation and a numba implementation with
the same signature. The public names dispatch between them at call time (see
:mod:`voxequiv._accel`); the two paths agree to floating-point rounding.

Array conventions
-----------------
Convolution tensors are ``(N, C, L, L, L)``; kernels are ``(C_out, C_in, 3, 3,
3)`` with zero padding of one voxel. Grid coordinates are in voxel units with
voxel ``i`` centred at ``i``.
"""

import numpy as np

from ._accel import dispatch, njit


def conv_out_size(size, stride):
    return (size - 1) // stride + 1


# ---------------------------------------------------------------- convolution


def _conv3d_forward_numpy(x, w, b, stride):
    n, cin, size = x.shape[0], x.shape[1], x.shape[2]
    cout = w.shape[0]
    o = conv_out_size(size, stride)
    span = stride * (o - 1) + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((cout, n, o, o, o))
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                patch = xp[:, :, a:a + span:stride, bb:bb + span:stride, c:c + span:stride]
                out += np.tensordot(w[:, :, a, bb, c], patch, axes=([1], [1]))
    out += b[:, None, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def _conv3d_backward_numpy(x, w, gout, stride):
    size = x.shape[2]
    o = gout.shape[2]
    span = stride * (o - 1) + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                sl = (slice(None), slice(None),
                      slice(a, a + span, stride), slice(bb, bb + span, stride), slice(c, c + span, stride))
                patch = xp[sl]
                gw[:, :, a, bb, c] = np.tensordot(gout, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                gxp[sl] += np.tensordot(w[:, :, a, bb, c], gout, axes=([0], [1])).transpose(1, 0, 2, 3, 4)
    gb = gout.sum(axis=(0, 2, 3, 4))
    gx = np.ascontiguousarray(gxp[:, :, 1:size + 1, 1:size + 1, 1:size + 1])
    return gx, gw, gb


@njit
def _im2col(x, s, stride, o):
    # rows (ci, a, b, c), columns (i, j, k) for sample s; zero padding of one voxel
    cin, size = x.shape[1], x.shape[2]
    cols = np.zeros((cin * 27, o * o * o))
    for ci in range(cin):
        for a in range(3):
            for bb in range(3):
                for c in range(3):
                    row = ((ci * 3 + a) * 3 + bb) * 3 + c
                    for i in range(o):
                        xi = i * stride + a - 1
                        if xi < 0 or xi >= size:
                            continue
                        for j in range(o):
                            xj = j * stride + bb - 1
                            if xj < 0 or xj >= size:
                                continue
                            base = (i * o + j) * o
                            for k in range(o):
                                xk = k * stride + c - 1
                                if 0 <= xk < size:
                                    cols[row, base + k] = x[s, ci, xi, xj, xk]
    return cols


@njit
def _col2im_add(cols, gx, s, stride, o):
    cin, size = gx.shape[1], gx.shape[2]
    for ci in range(cin):
        for a in range(3):
            for bb in range(3):
                for c in range(3):
                    row = ((ci * 3 + a) * 3 + bb) * 3 + c
                    for i in range(o):
                        xi = i * stride + a - 1
                        if xi < 0 or xi >= size:
                            continue
                        for j in range(o):
                            xj = j * stride + bb - 1
                            if xj < 0 or xj >= size:
                                continue
                            base = (i * o + j) * o
                            for k in range(o):
                                xk = k * stride + c - 1
                                if 0 <= xk < size:
                                    gx[s, ci, xi, xj, xk] += cols[row, base + k]


@njit
def _conv3d_forward_numba(x, w, b, stride):
    n, cin, size = x.shape[0], x.shape[1], x.shape[2]
    cout = w.shape[0]
    o = (size - 1) // stride + 1
    wmat = np.ascontiguousarray(w).reshape(cout, cin * 27)
    out = np.empty((n, cout, o, o, o))
    for s in range(n):
        res = wmat @ _im2col(x, s, stride, o)
        for co in range(cout):
            out[s, co] = (res[co] + b[co]).reshape(o, o, o)
    return out


@njit
def _conv3d_backward_numba(x, w, gout, stride):
    n, cin = x.shape[0], x.shape[1]
    cout = w.shape[0]
    o = gout.shape[2]
    o3 = o * o * o
    wmat_t = np.ascontiguousarray(np.ascontiguousarray(w).reshape(cout, cin * 27).T)
    gx = np.zeros_like(x)
    gw = np.zeros((cout, cin * 27))
    gb = np.zeros(cout)
    for s in range(n):
        gmat = np.ascontiguousarray(gout[s]).reshape(cout, o3)
        for co in range(cout):
            gb[co] += gmat[co].sum()
        cols = _im2col(x, s, stride, o)
        gw += gmat @ cols.T
        _col2im_add(wmat_t @ gmat, gx, s, stride, o)
    return gx, gw.reshape(w.shape), gb


conv3d_forward = dispatch(_conv3d_forward_numba, _conv3d_forward_numpy)
conv3d_forward.__doc__ = """3x3x3 convolution, zero padding 1, given stride. Returns (N, C_out, O, O, O)."""

conv3d_backward = dispatch(_conv3d_backward_numba, _conv3d_backward_numpy)
conv3d_backward.__doc__ = """Gradients ``(d_input, d_weight, d_bias)`` of :func:`conv3d_forward`."""


# ------------------------------------------------------------ Gaussian splat


def _splat_gaussians_numpy(coords, channels, n_channels, size, width):
    out = np.zeros((n_channels, size, size, size))
    axis = np.arange(size, dtype=np.float64)
    inv = 1.0 / (2.0 * width * width)
    for p, ch in zip(coords, channels):
        ex = np.exp(-((axis - p[0]) ** 2) * inv)
        ey = np.exp(-((axis - p[1]) ** 2) * inv)
        ez = np.exp(-((axis - p[2]) ** 2) * inv)
        out[ch] += ex[:, None, None] * ey[None, :, None] * ez[None, None, :]
    return out


@njit
def _splat_gaussians_numba(coords, channels, n_channels, size, width):
    out = np.zeros((n_channels, size, size, size))
    inv = 1.0 / (2.0 * width * width)
    ex = np.empty(size)
    ey = np.empty(size)
    ez = np.empty(size)
    for a in range(coords.shape[0]):
        for t in range(size):
            ex[t] = np.exp(-((t - coords[a, 0]) ** 2) * inv)
            ey[t] = np.exp(-((t - coords[a, 1]) ** 2) * inv)
            ez[t] = np.exp(-((t - coords[a, 2]) ** 2) * inv)
        ch = channels[a]
        for i in range(size):
            for j in range(size):
                exy = ex[i] * ey[j]
                for k in range(size):
                    out[ch, i, j, k] += exy * ez[k]
    return out


splat_gaussians = dispatch(_splat_gaussians_numba, _splat_gaussians_numpy)
splat_gaussians.__doc__ = """Unclamped per-channel sum of unit Gaussians.

coords are ``(n, 3)`` voxel-unit positions, channels ``(n,)`` int indices and
width is in voxel units.
"""


# -------------------------------------------------------- trilinear sampling


def _trilinear_sample_numpy(grid, points):
    size = grid.shape[1]
    base = np.floor(points).astype(np.int64)
    frac = points - base
    out = np.zeros((grid.shape[0], points.shape[0]))
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        ix = base[:, 0] + dx
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            iy = base[:, 1] + dy
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                iz = base[:, 2] + dz
                ok = (ix >= 0) & (ix < size) & (iy >= 0) & (iy < size) & (iz >= 0) & (iz < size)
                wt = np.where(ok, wx * wy * wz, 0.0)
                vals = grid[:, np.clip(ix, 0, size - 1), np.clip(iy, 0, size - 1), np.clip(iz, 0, size - 1)]
                out += vals * wt
    return out


@njit
def _trilinear_sample_numba(grid, points):
    nc, size = grid.shape[0], grid.shape[1]
    m = points.shape[0]
    out = np.zeros((nc, m))
    for p in range(m):
        fx = np.floor(points[p, 0])
        fy = np.floor(points[p, 1])
        fz = np.floor(points[p, 2])
        bx, by, bz = int(fx), int(fy), int(fz)
        tx, ty, tz = points[p, 0] - fx, points[p, 1] - fy, points[p, 2] - fz
        for dx in range(2):
            ix = bx + dx
            if ix < 0 or ix >= size:
                continue
            wx = tx if dx else 1.0 - tx
            for dy in range(2):
                iy = by + dy
                if iy < 0 or iy >= size:
                    continue
                wy = ty if dy else 1.0 - ty
                for dz in range(2):
                    iz = bz + dz
                    if iz < 0 or iz >= size:
                        continue
                    wz = tz if dz else 1.0 - tz
                    wt = wx * wy * wz
                    for c in range(nc):
                        out[c, p] += wt * grid[c, ix, iy, iz]
    return out


trilinear_sample = dispatch(_trilinear_sample_numba, _trilinear_sample_numpy)
trilinear_sample.__doc__ = """Sample a ``(C, L, L, L)`` grid at ``(M, 3)`` voxel coordinates, zero outside."""
