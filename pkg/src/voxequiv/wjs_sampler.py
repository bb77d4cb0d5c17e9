"""Walk-jump sampling: underdamped Langevin walk on noisy grids, one-shot jump.

The walk integrates

    dv = -gamma v dt + u s(y) dt + sqrt(2 gamma u) dB,     dy = v dt

with ``s`` the score of the sigma-smoothed density, using the BAOAB
splitting (half kick, half drift, exact Ornstein-Uhlenbeck velocity update,
half drift, half kick). The stationary law of ``y`` is the smoothed density
and that of ``v`` is ``N(0, u)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .denoisers import Denoiser, ScoreField
from .errors import DivergenceError, SpecError
from .geom3 import rotate_array, rotate_points, z_rotations
from .mol_io import Molecule, write_molecule
from .voxelizer import GridSpec, PeakParams, PeakResult, find_peaks, voxelize

INTEGRATOR = "BAOAB"
STEP_INTERPRETATION = "steps are Langevin walk steps; a jump is taken at every save point"


@dataclass
class WalkParams:
    gamma: float = 1.0
    u: float = 1.0
    dt: float = 0.25
    steps: int = 100
    save_every: int = 10
    sigma: float = 0.9

    def __post_init__(self):
        if self.gamma <= 0 or self.u <= 0 or self.dt <= 0:
            raise SpecError("gamma, u and dt must be positive")
        if self.steps < 1 or self.save_every < 1:
            raise SpecError("steps and save_every must be >= 1")
        if self.sigma <= 0:
            raise SpecError("sigma must be positive")

    @property
    def n_saves(self) -> int:
        return self.steps // self.save_every


@dataclass
class ChainState:
    y: np.ndarray
    v: np.ndarray
    step: int = 0
    stream: tuple = ()

    def __post_init__(self):
        if self.y.shape != self.v.shape:
            raise SpecError("position and velocity must share a shape")


def langevin_walk(score, init: ChainState, params: WalkParams, rng, noise_transform=None,
                  thermal: bool = True, friction: bool = True) -> list:
    """Run ``params.steps`` BAOAB steps; return the states saved every ``save_every`` steps.

    ``noise_transform`` maps each standard-normal draw before use (the
    matched-rotated protocol passes a grid rotation). ``thermal=False`` zeroes
    the Brownian term and ``friction=False`` removes the friction; both are
    hooks for deterministic checks.
    """
    y = np.array(init.y, dtype=np.float64)
    v = np.array(init.v, dtype=np.float64)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(v))):
        raise DivergenceError("non-finite initial state", step=init.step)
    dt, u = params.dt, params.u
    gamma = params.gamma if friction else 0.0
    decay = math.exp(-gamma * dt)
    kick = math.sqrt(u * (1.0 - decay * decay)) if thermal else 0.0
    force = u * score(y)
    saved = []
    for step in range(init.step + 1, init.step + params.steps + 1):
        v += 0.5 * dt * force
        y += 0.5 * dt * v
        if kick:
            xi = rng.standard_normal(y.shape)
            if noise_transform is not None:
                xi = noise_transform(xi)
            v *= decay
            v += kick * xi
        else:
            v *= decay
        y += 0.5 * dt * v
        force = u * score(y)
        v += 0.5 * dt * force
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(v))):
            raise DivergenceError(
                f"walk diverged at step {step} (max |y| before failure {np.nanmax(np.abs(y)):.3g})", step=step)
        if (step - init.step) % params.save_every == 0:
            saved.append(ChainState(y.copy(), v.copy(), step, init.stream))
    return saved


def jump_denoise(d: Denoiser, y, sigma, spec: GridSpec, peak_params: PeakParams | None = None) -> PeakResult:
    """Denoise once and read atoms off the density peaks."""
    data = y.data if hasattr(y, "spec") else np.asarray(y)
    return find_peaks(d._denoise(data, sigma), spec, peak_params)


# ------------------------------------------------------------ seeded runs


@dataclass
class SeedProtocol:
    """Seeded generation layout.

    ``chains`` is the number of chains per rotation. :meth:`paper` gives the
    one-chain-per-rotation layout (five chains per seed in total).
    """

    seed_molecule: Molecule
    rotations: list = field(default_factory=z_rotations)
    chains: int = 5
    matched_noise: bool = True

    def __post_init__(self):
        if self.chains < 1:
            raise SpecError("chains must be >= 1")
        if not self.rotations:
            raise SpecError("rotations must be non-empty")

    @classmethod
    def paper(cls, seed_molecule: Molecule) -> "SeedProtocol":
        return cls(seed_molecule, z_rotations(), chains=1)


@dataclass
class GeneratedMolecule:
    arm: str
    rotation_index: int
    chain: int
    step: int
    result: PeakResult
    seed_index: int = 0

    @property
    def molecule(self):
        return self.result.molecule


@dataclass
class GenerationRun:
    molecules: list
    manifest: dict

    def by_arm(self, arm: str) -> list:
        return [g for g in self.molecules if g.arm == arm]

    def write_jsonl(self, path) -> Path:
        """One record per generated molecule: provenance plus an XYZ payload."""
        path = Path(path)
        with open(path, "w") as fh:
            for g in self.molecules:
                mol = g.molecule
                rec = {"arm": g.arm, "seed_index": g.seed_index, "rotation_index": g.rotation_index,
                       "chain": g.chain, "step": g.step, "empty": g.result.empty,
                       "xyz": write_molecule(mol) if mol is not None else None}
                fh.write(json.dumps(rec) + "\n")
        Path(str(path) + ".manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return path


def chain_rng(master_seed: int, seed_index: int, rotation_index: int, chain: int):
    """Private stream per chain so serial and parallel runs agree."""
    return np.random.default_rng([master_seed, seed_index, rotation_index, chain])


def seeded_generate(d: Denoiser, protocol: SeedProtocol, params: WalkParams, spec: GridSpec,
                    master_seed: int = 0, seed_index: int = 0, arms=("rotated", "unrotated"),
                    peak_params: PeakParams | None = None) -> GenerationRun:
    """Run both arms of the rotated-seed experiment for one seed molecule.

    ``rotated`` arm: for rotation ``R`` and chain ``c``, start at
    ``voxelize(R seed) + R eps`` and walk with ``R``-rotated Brownian
    increments. ``unrotated`` arm: same streams, unrotated seed and noise.
    With an exactly equivariant denoiser every rotated-arm state is the
    ``R``-rotated image of its unrotated partner. When ``matched_noise`` is
    off, or ``R`` has no exact grid action, the rotated arm uses the raw
    (unrotated) draws.
    """
    seed = protocol.seed_molecule
    base_grid = voxelize(seed, spec).data
    score = ScoreField(d, params.sigma)
    out = []
    for r_idx, rot in enumerate(protocol.rotations):
        rotated_grid = voxelize(rotate_points(rot, seed), spec).data
        transform = None
        if protocol.matched_noise and rot.is_exact:
            def transform(a, rot=rot):
                return rotate_array(a, rot)
        for chain in range(protocol.chains):
            for arm in arms:
                rng = chain_rng(master_seed, seed_index, r_idx, chain)
                eps = params.sigma * rng.standard_normal(base_grid.shape)
                if arm == "rotated":
                    y0 = rotated_grid + (transform(eps) if transform else eps)
                    nt = transform
                elif arm == "unrotated":
                    y0 = base_grid + eps
                    nt = None
                else:
                    raise SpecError(f"unknown arm {arm!r}")
                init = ChainState(y0, np.zeros_like(y0), 0, (master_seed, seed_index, r_idx, chain))
                try:
                    states = langevin_walk(score, init, params, rng, noise_transform=nt)
                except DivergenceError as exc:
                    raise DivergenceError(f"{exc} [arm={arm} seed={seed_index} rotation={r_idx} chain={chain}]",
                                          step=exc.step) from exc
                for st in states:
                    res = jump_denoise(d, st.y, params.sigma, spec, peak_params)
                    out.append(GeneratedMolecule(arm, r_idx, chain, st.step, res, seed_index))
    manifest = {
        "walk": asdict(params),
        "integrator": INTEGRATOR,
        "step_interpretation": STEP_INTERPRETATION,
        "chains_per_rotation": protocol.chains,
        "rotations": [r.matrix.tolist() for r in protocol.rotations],
        "matched_noise": protocol.matched_noise,
        "master_seed": master_seed,
        "grid": spec.to_dict(),
        "denoiser": d.kind,
    }
    return GenerationRun(out, manifest)


def generate_for_seeds(d: Denoiser, seeds, params: WalkParams, spec: GridSpec, master_seed: int = 0,
                       chains: int = 5, rotations=None, matched_noise: bool = True,
                       peak_params: PeakParams | None = None) -> GenerationRun:
    """Seeded generation over many seed molecules, concatenated."""
    rotations = rotations if rotations is not None else z_rotations()
    all_mols, manifest = [], None
    for i, mol in enumerate(seeds):
        proto = SeedProtocol(mol, rotations, chains, matched_noise)
        run = seeded_generate(d, proto, params, spec, master_seed, i, peak_params=peak_params)
        all_mols.extend(run.molecules)
        manifest = run.manifest
    manifest = dict(manifest or {}, n_seeds=len(seeds))
    return GenerationRun(all_mols, manifest)


def expected_count(n_seeds: int, n_rotations: int, chains: int, params: WalkParams) -> int:
    """Molecules per arm for a protocol."""
    return n_seeds * n_rotations * chains * params.n_saves
