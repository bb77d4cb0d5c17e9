"""Rotations of point sets and of voxel grids.

Grids are rotated about their centre voxel coordinate ``(l - 1) / 2``. The 24
rotations of the cube act on such grids as exact index permutations; every
other rotation is applied by trilinear resampling with zero padding.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SpecError
from .kernels import trilinear_sample

EXACT = "exact_permutation"
TRILINEAR = "trilinear"


def _signed_permutation(m, tol=1e-12):
    """Return the snapped integer matrix if ``m`` is a signed permutation, else None."""
    snapped = np.round(m)
    if np.max(np.abs(m - snapped)) > tol:
        return None
    if not (np.all(np.sum(np.abs(snapped), axis=0) == 1) and np.all(np.sum(np.abs(snapped), axis=1) == 1)):
        return None
    return snapped + 0.0  # drop negative zeros


@dataclass(frozen=True, eq=False)
class RotationOp:
    """A proper rotation (orthogonal, det +1) with its grid action.

    Construct through :func:`rot_axis_angle`, :func:`sample_haar_rotation`,
    :func:`octahedral_group` or :meth:`from_matrix`.
    """

    matrix: np.ndarray
    grid_action: str = TRILINEAR
    axis: tuple | None = None
    angle: float | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-12:
            raise SpecError("rotation matrix is not orthogonal")
        if abs(np.linalg.det(m) - 1.0) > 1e-12:
            raise SpecError("rotation matrix must have det +1 (reflections are excluded)")
        if self.grid_action not in (EXACT, TRILINEAR):
            raise SpecError(f"unknown grid action {self.grid_action!r}")
        if self.grid_action == EXACT:
            snapped = _signed_permutation(m)
            if snapped is None:
                raise SpecError("exact grid action needs a signed permutation matrix")
            m = snapped
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_matrix(cls, matrix, **kwargs) -> "RotationOp":
        """Wrap a matrix, choosing the exact grid action whenever it is representable."""
        m = np.asarray(matrix, dtype=np.float64)
        action = EXACT if _signed_permutation(m) is not None else TRILINEAR
        return cls(m, action, **kwargs)

    @property
    def is_exact(self) -> bool:
        return self.grid_action == EXACT

    def inverse(self) -> "RotationOp":
        return RotationOp(self.matrix.T.copy(), self.grid_action)

    def __matmul__(self, other: "RotationOp") -> "RotationOp":
        return RotationOp.from_matrix(self.matrix @ other.matrix)

    def key(self) -> tuple:
        """Hashable identity for exact rotations (integer matrix entries)."""
        return tuple(int(v) for v in np.round(self.matrix).ravel())

    def __repr__(self):
        rows = ", ".join("[" + ", ".join(f"{v:.6g}" for v in row) + "]" for row in self.matrix)
        return f"RotationOp([{rows}], {self.grid_action})"


@dataclass(frozen=True)
class Translation:
    offset: tuple

    def __post_init__(self):
        off = tuple(float(v) for v in self.offset)
        if len(off) != 3 or not all(np.isfinite(off)):
            raise SpecError("translation offset must be three finite numbers")
        object.__setattr__(self, "offset", off)

    def apply(self, mol):
        return mol.translated(self.offset)


def identity() -> RotationOp:
    return RotationOp(np.eye(3), EXACT)


def rot_axis_angle(axis, angle: float) -> RotationOp:
    """Rodrigues rotation by ``angle`` radians about ``axis``.

    The grid action is exact whenever the resulting matrix is a signed
    permutation (quarter turns about coordinate axes, the 3-fold body
    diagonals, ...), trilinear otherwise.
    """
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if not np.isfinite(n) or n == 0.0:
        raise SpecError("rotation axis must be non-zero")
    k = a / n
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    m = np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)
    return RotationOp.from_matrix(m, axis=tuple(k), angle=float(angle))


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def sample_haar_rotation(rng: np.random.Generator) -> RotationOp:
    """Haar-uniform rotation from a normalised 4-vector of standard normals."""
    while True:
        q = rng.standard_normal(4)
        if np.linalg.norm(q) > 1e-12:
            break
    return RotationOp(quaternion_to_matrix(q), TRILINEAR)


@functools.lru_cache(maxsize=1)
def _octahedral_matrices():
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, col in enumerate(perm):
                m[row, col] = signs[row]
            if np.linalg.det(m) > 0:
                mats.append(m)
    # identity first, then a fixed lexicographic order
    mats.sort(key=lambda m: (not np.array_equal(m, np.eye(3)), tuple(-m.ravel())))
    return tuple(mats)


def octahedral_group() -> list:
    """The 24 proper rotations of the cube, identity first."""
    return [RotationOp(m, EXACT) for m in _octahedral_matrices()]


def z_rotations(degrees=(0, 90, 180, 270, 360)) -> list:
    return [rot_axis_angle((0.0, 0.0, 1.0), np.deg2rad(d)) for d in degrees]


def cyclic_z_group() -> list:
    """The 4-element subgroup of quarter turns about z."""
    return z_rotations((0, 90, 180, 270))


# ------------------------------------------------------------------ points


def rotate_points(rot: RotationOp, mol, center="grid_center"):
    """Apply ``p -> R (p - c) + c`` to every atom.

    ``center`` is ``"grid_center"`` (the origin of the grid frame),
    ``"centroid"``, or an explicit 3-vector.
    """
    if isinstance(center, str):
        if center == "grid_center":
            c = np.zeros(3)
        elif center == "centroid":
            c = mol.centroid()
        else:
            raise SpecError(f"unknown rotation centre {center!r}")
    else:
        c = np.asarray(center, dtype=np.float64)
    return mol.with_positions((mol.positions - c) @ rot.matrix.T + c)


# ------------------------------------------------------------------- grids


def _grid_array(g):
    data = g if isinstance(g, np.ndarray) else g.data
    if data.ndim != 4 or not (data.shape[1] == data.shape[2] == data.shape[3]):
        raise ShapeError(f"expected a cubic (c, l, l, l) grid, got shape {data.shape}")
    return data


def _permute_exact(data, m):
    # output[j] = input[R^T (j - c) + c]; R^T is a signed permutation, so each
    # input spatial axis a feeds output axis perm[a], flipped when the sign is -1
    perm = [int(np.flatnonzero(m[:, a])[0]) for a in range(3)]
    flips = [1 + a for a in range(3) if m[perm[a], a] < 0]
    h = np.flip(data, axis=tuple(flips)) if flips else data
    axes = [0, 0, 0]
    for a in range(3):
        axes[perm[a]] = a
    return np.ascontiguousarray(np.transpose(h, [0] + [1 + a for a in axes]))


def rotate_array(data: np.ndarray, rot: RotationOp) -> np.ndarray:
    data = _grid_array(data)
    if rot.is_exact:
        return _permute_exact(data, rot.matrix)
    size = data.shape[1]
    c = (size - 1) / 2.0
    idx = np.indices((size, size, size), dtype=np.float64).reshape(3, -1).T - c
    src = idx @ rot.matrix + c  # rows of R^T (j - c)
    out = trilinear_sample(np.ascontiguousarray(data), np.ascontiguousarray(src))
    return out.reshape(data.shape)


def rotate_grid(g, rot: RotationOp):
    """Rotate a VoxelGrid (or bare ``(c, l, l, l)`` array) about the grid centre."""
    if isinstance(g, np.ndarray):
        return rotate_array(g, rot)
    return g.replace_data(rotate_array(g.data, rot))
