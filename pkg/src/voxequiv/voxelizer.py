"""Molecule <-> voxel density conversion and Gaussian noising.

The grid frame puts the grid centre at the origin: voxel ``i`` along an axis
is centred at ``(i - (l - 1) / 2) * resolution`` Angstrom.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ExtentError, ShapeError, SpecError
from .kernels import splat_gaussians
from .mol_io import ELEMENTS, Molecule, normalize_element

DENSITY_FORMULA = "min(1, sum_a exp(-|v - p_a|^2 / (2 w^2))) per element channel"

_MAGIC = b"VOXGRID1"
_HEADER = struct.Struct("<8sIIdd")


@dataclass(frozen=True)
class GridSpec:
    edge_voxels: int = 32
    resolution: float = 0.25
    channels: tuple = ELEMENTS
    gaussian_width: float = 0.5

    def __post_init__(self):
        channels = tuple(normalize_element(c) for c in self.channels)
        object.__setattr__(self, "channels", channels)
        if self.edge_voxels < 8:
            raise SpecError("edge_voxels must be >= 8")
        if self.resolution <= 0:
            raise SpecError("resolution must be positive")
        if self.gaussian_width <= 0:
            raise SpecError("gaussian_width must be positive")
        if not channels or len(set(channels)) != len(channels):
            raise SpecError("channels must be non-empty and unique")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def shape(self) -> tuple:
        l = self.edge_voxels
        return (self.n_channels, l, l, l)

    @property
    def center_index(self) -> float:
        return (self.edge_voxels - 1) / 2.0

    @property
    def max_radius(self) -> float:
        """Largest centre distance (Angstrom) an atom may have."""
        return self.edge_voxels * self.resolution / 2.0 - 3.0 * self.gaussian_width

    def to_voxel(self, positions) -> np.ndarray:
        return np.asarray(positions, dtype=np.float64) / self.resolution + self.center_index

    def to_angstrom(self, voxel_coords) -> np.ndarray:
        return (np.asarray(voxel_coords, dtype=np.float64) - self.center_index) * self.resolution

    def voxel_centers(self) -> np.ndarray:
        """Axis coordinates (Angstrom) of the voxel centres."""
        return self.to_angstrom(np.arange(self.edge_voxels))

    def to_dict(self) -> dict:
        return {"edge_voxels": self.edge_voxels, "resolution": self.resolution,
                "channels": list(self.channels), "gaussian_width": self.gaussian_width}


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A ``(c, l, l, l)`` density tensor tied to its :class:`GridSpec`.

    ``noise_sigma`` is None for clean grids, which must lie in [0, 1].
    """

    spec: GridSpec
    data: np.ndarray
    noise_sigma: float | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.spec.shape:
            raise ShapeError(f"grid data shape {data.shape} does not match spec {self.spec.shape}")
        object.__setattr__(self, "data", data)

    def replace_data(self, data, noise_sigma=dataclasses.MISSING) -> "VoxelGrid":
        sigma = self.noise_sigma if noise_sigma is dataclasses.MISSING else noise_sigma
        return VoxelGrid(self.spec, data, sigma)

    def is_clean(self) -> bool:
        return self.noise_sigma is None


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.9

    def __post_init__(self):
        if not self.sigma >= 0:
            raise SpecError("noise sigma must be >= 0")


def check_extent(mol: Molecule, spec: GridSpec) -> None:
    r = np.linalg.norm(mol.positions, axis=1)
    worst = int(np.argmax(r))
    if r[worst] > spec.max_radius:
        raise ExtentError(
            f"atom {worst} ({mol.elements[worst]}) lies {r[worst]:.3f} A from the grid centre; "
            f"the limit is {spec.max_radius:.3f} A", atom_index=worst)


def voxelize(mol: Molecule, spec: GridSpec, center: bool = False) -> VoxelGrid:
    """Render ``mol`` as clamped per-element Gaussian densities.

    Coordinates are read in the grid frame (origin at the grid centre); pass
    ``center=True`` to shift the centroid to the origin first.

    Raises
    ------
    ExtentError
        When an atom falls outside the inscribed sphere minus a ``3 w`` margin.
    """
    if center:
        mol = mol.centered()
    check_extent(mol, spec)
    try:
        channels = np.array([spec.channels.index(e) for e in mol.elements], dtype=np.int64)
    except ValueError:
        missing = sorted(set(mol.elements) - set(spec.channels))
        raise SpecError(f"elements {missing} have no channel in this grid spec") from None
    coords = np.ascontiguousarray(spec.to_voxel(mol.positions))
    width = spec.gaussian_width / spec.resolution
    dens = splat_gaussians(coords, channels, spec.n_channels, spec.edge_voxels, width)
    np.minimum(dens, 1.0, out=dens)
    return VoxelGrid(spec, dens)


def add_gaussian_noise(g: VoxelGrid, noise, rng: np.random.Generator) -> VoxelGrid:
    """Add i.i.d. ``N(0, sigma^2)`` to every voxel; ``sigma = 0`` returns an exact copy."""
    sigma = noise.sigma if isinstance(noise, NoiseModel) else float(noise)
    if sigma == 0:
        return g.replace_data(g.data.copy())
    data = g.data + sigma * rng.standard_normal(g.data.shape)
    prev = g.noise_sigma or 0.0
    return g.replace_data(data, noise_sigma=float(np.hypot(prev, sigma)))


# ------------------------------------------------------------ peak finding


@dataclass
class PeakParams:
    threshold: float = 0.3
    min_separation: float = 2.0
    refine_iters: int = 50


@dataclass
class PeakResult:
    """Atoms recovered from a density grid.

    ``empty`` is set when no channel has a peak above threshold, in which case
    ``molecule`` is None. ``fallback`` counts peaks whose least-squares
    refinement did not converge and used the parabolic estimate instead.
    """

    elements: tuple = ()
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    peak_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fallback: int = 0

    @property
    def empty(self) -> bool:
        return len(self.elements) == 0

    @property
    def molecule(self) -> Molecule | None:
        if self.empty:
            return None
        return Molecule(self.elements, self.positions)

    def __len__(self):
        return len(self.elements)


def _local_maxima(channel, threshold):
    footprint = np.ones((3, 3, 3), dtype=bool)
    mx = ndimage.maximum_filter(channel, footprint=footprint, mode="constant", cval=-np.inf)
    idx = np.argwhere((channel == mx) & (channel >= threshold))
    vals = channel[tuple(idx.T)]
    return idx, vals


def _merge(idx, vals, min_sep):
    order = sorted(range(len(vals)), key=lambda k: (-vals[k], tuple(idx[k])))
    kept = []
    for k in order:
        if all(np.linalg.norm(idx[k] - idx[q]) >= min_sep for q in kept):
            kept.append(k)
    return kept


def _parabolic(channel, v):
    size = channel.shape[0]
    out = v.astype(np.float64)
    for ax in range(3):
        lo, hi = v.copy(), v.copy()
        lo[ax] -= 1
        hi[ax] += 1
        if lo[ax] < 0 or hi[ax] >= size:
            continue
        f0, fm, fp = channel[tuple(v)], channel[tuple(lo)], channel[tuple(hi)]
        denom = fm - 2.0 * f0 + fp
        if denom < 0:
            out[ax] += 0.5 * (fm - fp) / denom
    return out


def _refine(channel, v, width, iters):
    """Gauss-Newton fit of a unit-amplitude Gaussian of fixed width on a 5^3 patch.

    Returns ``(position, converged)`` in voxel units.
    """
    size = channel.shape[0]
    lo = np.maximum(v - 2, 0)
    hi = np.minimum(v + 3, size)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    patch = channel[sl].ravel()
    pts = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1)
    pts = pts.reshape(-1, 3).astype(np.float64)
    inv = 1.0 / (width * width)
    p = v.astype(np.float64)
    for _ in range(iters):
        d = pts - p
        model = np.exp(-0.5 * inv * np.einsum("ij,ij->i", d, d))
        resid = patch - model
        jac = (model * inv)[:, None] * d  # d model / d p
        jtj = jac.T @ jac
        try:
            step = np.linalg.solve(jtj, jac.T @ resid)
        except np.linalg.LinAlgError:
            return p, False
        p = p + step
        if not np.all(np.isfinite(p)) or np.max(np.abs(p - v)) > 1.5:
            return p, False
        if np.max(np.abs(step)) < 1e-10:
            return p, True
    return p, False


def find_peaks(g, spec: GridSpec | None = None, params: PeakParams | None = None) -> PeakResult:
    """Recover atoms from a (denoised) density grid.

    Per channel: 26-neighbourhood local maxima at or above ``threshold`` are
    merged greedily (largest first) when closer than ``min_separation``
    voxels, then each position is refined to sub-voxel accuracy.
    """
    if spec is None:
        spec = g.spec
    params = params or PeakParams()
    data = g.data if isinstance(g, VoxelGrid) else np.asarray(g)
    width = spec.gaussian_width / spec.resolution
    elements, positions, values = [], [], []
    fallback = 0
    for ch, el in enumerate(spec.channels):
        channel = data[ch]
        idx, vals = _local_maxima(channel, params.threshold)
        if len(vals) == 0:
            continue
        for k in _merge(idx, vals, params.min_separation):
            p, ok = _refine(channel, idx[k], width, params.refine_iters)
            if not ok:
                fallback += 1
                p = _parabolic(channel, idx[k])
            elements.append(el)
            positions.append(spec.to_angstrom(p))
            values.append(vals[k])
    if fallback:
        warnings.warn(f"{fallback} peak(s) fell back to the parabolic estimate", RuntimeWarning)
    if not elements:
        return PeakResult()
    return PeakResult(tuple(elements), np.array(positions), np.array(values), fallback)


# ----------------------------------------------------------- serialization


def write_grid(path, g: VoxelGrid) -> Path:
    """Binary grid: 32-byte little-endian header then float64 data; JSON sidecar."""
    path = Path(path)
    spec = g.spec
    header = _HEADER.pack(_MAGIC, spec.n_channels, spec.edge_voxels, spec.resolution, spec.gaussian_width)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(g.data, dtype="<f8").tobytes())
    sidecar = {
        "format": "voxequiv-grid-1",
        "header_bytes": _HEADER.size,
        "dtype": "<f8",
        "order": "C (channel, x, y, z)",
        "grid": spec.to_dict(),
        "noise_sigma": g.noise_sigma,
        "density_formula": DENSITY_FORMULA,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def read_grid(path) -> VoxelGrid:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ShapeError("grid file shorter than its header")
    magic, c, l, res, width = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ShapeError("not a voxequiv grid file")
    sidecar_path = Path(str(path) + ".json")
    channels = ELEMENTS[:c]
    sigma = None
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text())
        channels = tuple(meta["grid"]["channels"])
        sigma = meta.get("noise_sigma")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != c * l ** 3:
        raise ShapeError(f"expected {c * l ** 3} values, found {data.size}")
    spec = GridSpec(l, res, channels, width)
    return VoxelGrid(spec, data.reshape(c, l, l, l).astype(np.float64), sigma)
