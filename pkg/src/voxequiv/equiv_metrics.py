"""Equivariance measurements for denoisers.

Three quantities are computed here:

* the reconstruction-equivariance error ``|R(x0_hat) - xn_hat|^2 / D`` between
  the rotated reconstruction of a noisy grid and the reconstruction of the
  rotated noisy grid;
* the split of the rotation-augmented MSE into a prediction term and a
  variance (equivariance) term, which is an exact bias-variance identity;
* cosine similarities between latent embeddings of rotated copies.

Noise conventions
-----------------
``matched_rotated`` reuses the same noise draw, grid-rotated alongside the
input, so an exactly equivariant model scores exactly zero. ``fresh`` draws
an independent field for the rotated input. Every output records which one
was used.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .denoisers import IdentityDenoiser
from .errors import ConventionError, SpecError
from .geom3 import RotationOp, octahedral_group, rot_axis_angle, rotate_array, rotate_points
from .voxelizer import GridSpec, voxelize

MATCHED = "matched_rotated"
FRESH = "fresh"
NOISE_CONVENTIONS = (MATCHED, FRESH)


def _check_convention(noise_convention, rot: RotationOp):
    if noise_convention not in NOISE_CONVENTIONS:
        raise SpecError(f"unknown noise convention {noise_convention!r}")
    if noise_convention == MATCHED and not rot.is_exact:
        raise ConventionError("matched_rotated noise needs an exact grid action; use 'fresh' for this rotation")


def _noisy_pair(clean, rot, sigma, rng, noise_convention):
    """Noisy unrotated grid and noisy rotated grid under the chosen convention."""
    eps = sigma * rng.standard_normal(clean.shape)
    if noise_convention == MATCHED:
        eps_rot = rotate_array(eps, rot)
    else:
        eps_rot = sigma * rng.standard_normal(clean.shape)
    return clean + eps, eps_rot


def recon_equivariance_error(d, mol, rot: RotationOp, sigma: float, rng, spec: GridSpec,
                             noise_convention: str = MATCHED) -> float:
    """Mean squared voxel gap between ``R(d(x + eps))`` and ``d(R x + eps')``.

    ``R x`` is the voxelized rotated molecule, so for exact rotations it
    equals the rotated grid. ``eps'`` is ``R(eps)`` or a fresh draw,
    depending on ``noise_convention``.
    """
    _check_convention(noise_convention, rot)
    clean = voxelize(mol, spec).data
    y0, eps_rot = _noisy_pair(clean, rot, sigma, rng, noise_convention)
    yn = voxelize(rotate_points(rot, mol), spec).data + eps_rot
    x0 = d._denoise(y0, sigma)
    xn = d._denoise(yn, sigma)
    diff = rotate_array(x0, rot) - xn
    return float(np.mean(diff * diff))


def equivariance_errors(d, dataset, rotations, sigma, rng, spec, noise_convention=MATCHED) -> np.ndarray:
    """``(n_molecules, n_rotations)`` matrix of reconstruction-equivariance errors."""
    out = np.empty((len(dataset), len(rotations)))
    for i, mol in enumerate(dataset):
        for j, rot in enumerate(rotations):
            out[i, j] = recon_equivariance_error(d, mol, rot, sigma, rng, spec, noise_convention)
    return out


def baseline_recon_error(d, dataset, sigma: float, rng, spec: GridSpec) -> float:
    """Mean ``|d(x + eps) - x|^2 / D`` over the dataset."""
    errs = []
    for mol in dataset:
        clean = voxelize(mol, spec).data
        rec = d._denoise(clean + sigma * rng.standard_normal(clean.shape), sigma)
        errs.append(np.mean((rec - clean) ** 2))
    return float(np.mean(errs))


# ------------------------------------------------------------ decomposition


@dataclass
class DecompositionReport:
    """Rotation-augmented loss split into prediction and variance terms.

    ``residual = total - (prediction + equivariance)`` vanishes up to rounding
    for squared error. ``per_molecule`` rows hold the three terms per input.
    """

    total_loss: float
    prediction_error: float
    equivariance_error: float
    residual: float
    per_molecule: list = field(default_factory=list)
    rotation_set: str = ""
    loss: str = "mse"

    @property
    def relative_residual(self) -> float:
        return abs(self.residual) / self.total_loss if self.total_loss > 0 else abs(self.residual)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["molecule", "total", "prediction", "equivariance", "residual"])
            for row in self.per_molecule:
                w.writerow([row["molecule"], repr(float(row["total"])), repr(float(row["prediction"])),
                            repr(float(row["equivariance"])), repr(float(row["residual"]))])
        return path

    def write_json(self, path) -> Path:
        summary = {k: v for k, v in self.to_dict().items() if k != "per_molecule"}
        summary["relative_residual"] = self.relative_residual
        Path(path).write_text(json.dumps(summary, indent=2) + "\n")
        return Path(path)


def _describe(rotations) -> str:
    n = len(rotations)
    keys = {r.key() for r in rotations}
    if n == 24 and keys == {r.key() for r in octahedral_group()}:
        return "octahedral(24)"
    return f"custom({n})"


def decompose_outputs(z, y) -> tuple:
    """Split ``mean_R |z_R - y|^2 / D`` for back-rotated outputs ``z`` of shape ``(n_R, D)``.

    Returns ``(total, prediction, equivariance)`` where prediction is the
    error of the rotation mean and equivariance the coordinate-averaged
    variance across rotations.
    """
    z = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    total = float(np.mean((z - y) ** 2))
    mean = z.mean(axis=0)
    prediction = float(np.mean((mean - y) ** 2))
    equivariance = float(np.mean(z.var(axis=0)))
    return total, prediction, equivariance


def back_rotated_outputs(d, clean, rotations, sigma, rng) -> np.ndarray:
    """``z_R = R^-1 d(R(x + eps))`` for one shared noise draw ``eps``."""
    y = clean + sigma * rng.standard_normal(clean.shape)
    return np.stack([rotate_array(d._denoise(rotate_array(y, rot), sigma), rot.inverse())
                     for rot in rotations])


def mse_loss_decomposition(d, dataset, rotation_set, sigma: float, rng, spec: GridSpec) -> DecompositionReport:
    """Augmented MSE against the clean grid, split into prediction plus variance.

    One noise draw per molecule is rotated with the input, so every rotated
    copy sees an identically distributed input. Requires exact grid actions.
    """
    if not rotation_set:
        raise SpecError("rotation_set must be non-empty")
    for rot in rotation_set:
        if not rot.is_exact:
            raise ConventionError("the loss split needs exact grid actions")
    rows = []
    for i, mol in enumerate(dataset):
        clean = voxelize(mol, spec).data
        z = back_rotated_outputs(d, clean, rotation_set, sigma, rng)
        total, pred, eq = decompose_outputs(z, clean)
        rows.append({"molecule": mol.name or str(i), "total": total, "prediction": pred,
                     "equivariance": eq, "residual": total - (pred + eq)})
    total = float(np.mean([r["total"] for r in rows]))
    pred = float(np.mean([r["prediction"] for r in rows]))
    eq = float(np.mean([r["equivariance"] for r in rows]))
    return DecompositionReport(total, pred, eq, total - (pred + eq), rows, _describe(rotation_set))


def _huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_loss_decomposition(d, dataset, rotation_set, sigma, rng, spec, delta: float = 0.1) -> DecompositionReport:
    """Second-order split for a per-voxel Huber loss (diagnostic only).

    ``prediction`` is the Huber loss of the rotation mean and ``equivariance``
    is ``0.5 * mean(l''(mean - y) * Var_R z)``, the curvature-weighted
    variance. ``residual`` is the Taylor remainder and need not vanish.
    """
    if not rotation_set:
        raise SpecError("rotation_set must be non-empty")
    rows = []
    for i, mol in enumerate(dataset):
        clean = voxelize(mol, spec).data.reshape(-1)
        z = back_rotated_outputs(d, clean.reshape(voxelize(mol, spec).data.shape),
                                 rotation_set, sigma, rng).reshape(len(rotation_set), -1)
        mean = z.mean(axis=0)
        total = float(np.mean(_huber(z - clean, delta)))
        pred = float(np.mean(_huber(mean - clean, delta)))
        curvature = (np.abs(mean - clean) <= delta).astype(np.float64)
        eq = float(0.5 * np.mean(curvature * z.var(axis=0)))
        rows.append({"molecule": mol.name or str(i), "total": total, "prediction": pred,
                     "equivariance": eq, "residual": total - (pred + eq)})
    total = float(np.mean([r["total"] for r in rows]))
    pred = float(np.mean([r["prediction"] for r in rows]))
    eq = float(np.mean([r["equivariance"] for r in rows]))
    return DecompositionReport(total, pred, eq, total - (pred + eq), rows, _describe(rotation_set),
                               loss=f"huber(delta={delta})")


# ---------------------------------------------------------- latent cosines


@dataclass
class CosineMatrix:
    matrix: np.ndarray
    angles: list
    axis: tuple
    noise: list
    undefined: np.ndarray

    @property
    def mean_off_diagonal(self) -> float:
        n = len(self.angles)
        mask = ~np.eye(n, dtype=bool) & ~self.undefined
        return float(self.matrix[mask].mean()) if mask.any() else float("nan")


def latent_cosine_matrix(d, mol, angles, axis, sigma: float, rng, spec: GridSpec) -> CosineMatrix:
    """Cosine similarity between embeddings of ``mol`` rotated by each angle (degrees).

    For angles with an exact grid action the noisy grid is permuted, so the
    single noise draw is shared; other angles voxelize the rotated molecule
    with fresh noise (``noise`` records which, per angle).
    Cells with a zero embedding are NaN and flagged in ``undefined``;
    bitwise-identical embeddings score exactly 1.
    """
    clean = voxelize(mol, spec).data
    eps = sigma * rng.standard_normal(clean.shape)
    embs, noise = [], []
    for angle in angles:
        rot = rot_axis_angle(axis, np.deg2rad(angle))
        if rot.is_exact:
            # permuting the noisy grid avoids the voxelizer's last-bit rounding
            y, label = rotate_array(clean + eps, rot), MATCHED
        else:
            y = voxelize(rotate_points(rot, mol), spec).data + sigma * rng.standard_normal(clean.shape)
            label = FRESH
        embs.append(np.asarray(d._embed(y), dtype=np.float64))
        noise.append(label)
    norms = np.array([np.linalg.norm(e) for e in embs])
    n = len(angles)
    m = np.full((n, n), np.nan)
    undefined = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i, n):
            if norms[i] == 0 or norms[j] == 0:
                undefined[i, j] = undefined[j, i] = True
                continue
            if i == j or np.array_equal(embs[i], embs[j]):
                c = 1.0  # identical embeddings, without the rounding of the quotient
            else:
                c = float(np.clip(embs[i] @ embs[j] / (norms[i] * norms[j]), -1.0, 1.0))
            m[i, j] = m[j, i] = c
    return CosineMatrix(m, list(angles), tuple(axis), noise, undefined)


# ------------------------------------------------------------ angle curves


@dataclass
class EquivCurve:
    """Mean reconstruction-equivariance error per (axis, angle).

    ``floor`` holds the same measurement for the identity map, which is
    nonzero only through interpolation of non-exact rotations.
    """

    rows: list
    baseline: float
    noise_convention: str

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "angle", "mean", "std", "floor", "baseline", "noise"])
            for r in self.rows:
                w.writerow(["".join(str(int(a)) for a in r["axis"]), r["angle"], repr(r["mean"]), repr(r["std"]),
                            repr(r["floor"]), repr(self.baseline), self.noise_convention])
        return path

    def at(self, axis, angle) -> dict:
        for r in self.rows:
            if tuple(r["axis"]) == tuple(axis) and np.isclose(r["angle"], angle):
                return r
        raise KeyError((axis, angle))


AXES = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def equivariance_curve(d, dataset, angles, sigma: float, seed: int, spec: GridSpec, axes=AXES,
                       noise_convention: str = MATCHED) -> EquivCurve:
    """Angle sweep (degrees) of the reconstruction-equivariance error.

    Exact angles use the chosen convention. Other angles always use fresh
    noise, since a noise field cannot be interpolated without changing its
    law. The same seed drives every cell so curves are comparable across
    models.
    """
    ident = IdentityDenoiser()
    rows = []
    for axis in axes:
        for angle in angles:
            rot = rot_axis_angle(axis, np.deg2rad(angle))
            conv = noise_convention if rot.is_exact else FRESH
            errs, floors = [], []
            for i, mol in enumerate(dataset):
                errs.append(recon_equivariance_error(d, mol, rot, sigma, np.random.default_rng([seed, i]), spec, conv))
                floors.append(recon_equivariance_error(ident, mol, rot, 0.0, np.random.default_rng([seed, i]),
                                                       spec, conv))
            rows.append({"axis": tuple(axis), "angle": float(angle), "mean": float(np.mean(errs)),
                         "std": float(np.std(errs)), "floor": float(np.mean(floors)), "noise": conv})
    baseline = baseline_recon_error(d, dataset, sigma, np.random.default_rng([seed, 10**6]), spec)
    return EquivCurve(rows, baseline, noise_convention)


def interpolation_floor(dataset, rot: RotationOp, spec: GridSpec) -> float:
    """Mean squared gap between ``voxelize(R m)`` and the trilinear-resampled grid."""
    rng = np.random.default_rng(0)
    return float(np.mean([recon_equivariance_error(IdentityDenoiser(), m, rot, 0.0, rng, spec, FRESH)
                          for m in dataset]))


__all__ = [
    "MATCHED", "FRESH", "recon_equivariance_error", "equivariance_errors", "baseline_recon_error",
    "DecompositionReport", "decompose_outputs", "back_rotated_outputs", "mse_loss_decomposition",
    "huber_loss_decomposition", "CosineMatrix", "latent_cosine_matrix", "EquivCurve",
    "equivariance_curve", "interpolation_floor",
]
