"""Molecule containers, XYZ/SDF I/O, and synthetic dataset generation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ElementError, ParseError, SpecError

ELEMENTS = ("C", "H", "O", "N", "F", "S", "Cl", "Br")

_CANON = {e.upper(): e for e in ELEMENTS}


def normalize_element(symbol: str) -> str:
    try:
        return _CANON[symbol.strip().upper()]
    except KeyError:
        raise ElementError(symbol.strip()) from None


@dataclass(frozen=True, eq=False)
class Molecule:
    """Atoms as element symbols plus Cartesian positions in Angstrom.

    Positions are stored as a read-only ``(n, 3)`` float64 array.
    ``ref_bonds`` keeps an SDF bond block when one was parsed; it is never
    used by the metrics, which always re-infer bonds from geometry.
    """

    elements: tuple
    positions: np.ndarray
    name: str = ""
    ref_bonds: tuple = ()

    def __post_init__(self):
        elements = tuple(normalize_element(e) for e in self.elements)
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(elements) == 0:
            raise SpecError("a molecule needs at least one atom")
        if len(elements) != pos.shape[0]:
            raise SpecError(f"{len(elements)} elements but {pos.shape[0]} positions")
        if not np.all(np.isfinite(pos)):
            raise SpecError("non-finite atom position")
        pos.setflags(write=False)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.elements)

    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    def with_positions(self, positions) -> "Molecule":
        return dataclasses.replace(self, positions=positions)

    def translated(self, offset) -> "Molecule":
        return self.with_positions(self.positions + np.asarray(offset, dtype=np.float64))

    def centered(self) -> "Molecule":
        return self.translated(-self.centroid())

    def allclose(self, other: "Molecule", atol: float = 1e-9) -> bool:
        return (self.elements == other.elements
                and np.allclose(self.positions, other.positions, rtol=0.0, atol=atol))


@dataclass
class Dataset:
    molecules: list = field(default_factory=list)
    group_closed: bool = False

    def __len__(self):
        return len(self.molecules)

    def __iter__(self):
        return iter(self.molecules)

    def __getitem__(self, idx):
        return self.molecules[idx]


# ------------------------------------------------------------------ parsing


def _float(tok, lineno):
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"expected a number, got {tok!r}", lineno) from None


def _parse_xyz(text: str) -> Molecule:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty input", 1)
    try:
        count = int(lines[0].split()[0])
    except (ValueError, IndexError):
        raise ParseError("first line must hold the atom count", 1) from None
    if count < 1:
        raise ParseError("atom count must be positive", 1)
    name = lines[1].strip() if len(lines) > 1 else ""
    body = lines[2:2 + count]
    if len(body) < count:
        raise ParseError(f"declared {count} atoms but found {len(body)} atom lines", len(lines) + 1)
    elements, positions = [], []
    for offset, line in enumerate(body):
        lineno = offset + 3
        toks = line.split()
        if len(toks) < 4:
            raise ParseError("atom line needs an element and three coordinates", lineno)
        elements.append(normalize_element(toks[0]))
        positions.append([_float(t, lineno) for t in toks[1:4]])
    return Molecule(tuple(elements), np.array(positions), name=name)


def _parse_sdf(text: str) -> Molecule:
    lines = text.splitlines()
    if len(lines) < 4:
        raise ParseError("SDF needs a 3-line header and a counts line", len(lines) + 1)
    counts = lines[3]
    if "V3000" in counts:
        raise ParseError("only V2000 molfiles are supported", 4)
    try:
        n_atoms = int(counts[0:3])
        n_bonds = int(counts[3:6])
    except ValueError:
        toks = counts.split()
        try:
            n_atoms, n_bonds = int(toks[0]), int(toks[1])
        except (ValueError, IndexError):
            raise ParseError("malformed counts line", 4) from None
    if n_atoms < 1:
        raise ParseError("atom count must be positive", 4)
    elements, positions = [], []
    for k in range(n_atoms):
        lineno = 5 + k
        if lineno - 1 >= len(lines) or lines[lineno - 1].startswith("M  END"):
            raise ParseError(f"atom block: declared {n_atoms} atoms but found {k}", lineno)
        toks = lines[lineno - 1].split()
        if len(toks) < 4:
            raise ParseError("atom block: malformed atom line", lineno)
        positions.append([_float(t, lineno) for t in toks[0:3]])
        elements.append(normalize_element(toks[3]))
    bonds = []
    for k in range(n_bonds):
        lineno = 5 + n_atoms + k
        if lineno - 1 >= len(lines):
            raise ParseError(f"bond block: declared {n_bonds} bonds but found {k}", lineno)
        line = lines[lineno - 1]
        try:
            i, j, order = int(line[0:3]), int(line[3:6]), int(line[6:9])
        except ValueError:
            toks = line.split()
            try:
                i, j, order = int(toks[0]), int(toks[1]), int(toks[2])
            except (ValueError, IndexError):
                raise ParseError("bond block: malformed bond line", lineno) from None
        bonds.append((i - 1, j - 1, order))
    return Molecule(tuple(elements), np.array(positions), name=lines[0].strip(),
                    ref_bonds=tuple(bonds))


def parse_molecule(text: str, format: str = "xyz") -> Molecule:
    """Parse a molecule from XYZ or SDF (V2000) text.

    Raises
    ------
    ParseError
        Malformed header or atom line; carries the 1-based line number.
    ElementError
        An element outside the eight supported channels.
    """
    fmt = format.lower()
    if fmt == "xyz":
        return _parse_xyz(text)
    if fmt in ("sdf", "sdf_v2000", "mol"):
        return _parse_sdf(text)
    raise SpecError(f"unknown molecule format {format!r}")


def write_molecule(mol: Molecule, format: str = "xyz") -> str:
    if format.lower() != "xyz":
        raise SpecError("only XYZ output is supported")
    lines = [str(len(mol)), mol.name]
    for el, p in zip(mol.elements, mol.positions):
        lines.append(f"{el} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}")
    return "\n".join(lines)


def read_molecule(path) -> Molecule:
    path = Path(path)
    fmt = "sdf" if path.suffix.lower() in (".sdf", ".mol") else "xyz"
    return parse_molecule(path.read_text(), fmt)


def read_manifest(path) -> Dataset:
    """Load a dataset from a manifest listing one molecule file per line.

    Relative paths resolve against the manifest's directory; blank lines and
    ``#`` comments are skipped.
    """
    path = Path(path)
    mols = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        entry = Path(line)
        if not entry.is_absolute():
            entry = path.parent / entry
        mols.append(read_molecule(entry))
    return Dataset(mols)


def write_manifest(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, mol in enumerate(dataset.molecules):
        fname = f"mol_{i:05d}.xyz"
        # full precision: the printed XYZ format keeps only 6 decimals
        text = "\n".join([str(len(mol)), mol.name] + [
            f"{el} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}" for el, p in zip(mol.elements, mol.positions)])
        (directory / fname).write_text(text + "\n")
        names.append(fname)
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(names) + "\n")
    return manifest


# --------------------------------------------------------------- synthetic


FRAGMENT_NAMES = (
    "methane", "ammonia", "water", "ethylene", "acetylene",
    "formaldehyde", "hydrogen_cyanide", "benzene", "chloromethane", "hydrogen_sulfide",
)


def load_fragment(name: str) -> Molecule:
    text = resources.files("voxequiv").joinpath(f"data/fragments/{name}.xyz").read_text()
    return parse_molecule(text, "xyz")


def fragment_library() -> list:
    return [load_fragment(n) for n in FRAGMENT_NAMES]


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic dataset.

    ``orientation="principal"`` aligns each molecule's principal axes with the
    coordinate axes (largest spread along x), which gives un-augmented models a
    preferred frame; ``"random"`` applies a Haar rotation instead.
    """

    n_molecules: int = 10
    atoms_min: int = 4
    atoms_max: int = 6
    motif: str = "chain"
    bond_length: float = 1.54
    jitter: float = 0.0
    elements: tuple = ("C", "N", "O")
    bond_angle: float = 109.4712206
    min_distance: float | None = None
    orientation: str = "principal"
    group_closed: bool = False

    def validate(self):
        if self.motif not in ("chain", "ring", "template"):
            raise SpecError(f"unknown motif {self.motif!r}")
        if self.n_molecules < 1:
            raise SpecError("n_molecules must be >= 1")
        if self.atoms_min > self.atoms_max:
            raise SpecError("atoms_min exceeds atoms_max")
        if self.motif == "chain" and self.atoms_min < 2:
            raise SpecError("chains need at least 2 atoms")
        if self.motif == "ring" and self.atoms_min < 3:
            raise SpecError("rings need at least 3 atoms")
        if self.bond_length <= 0:
            raise SpecError("bond_length must be positive")
        if self.jitter < 0:
            raise SpecError("jitter must be non-negative")
        if self.orientation not in ("principal", "random", "none"):
            raise SpecError(f"unknown orientation {self.orientation!r}")
        for e in self.elements:
            normalize_element(e)


def _unit(v):
    return v / np.linalg.norm(v)


def _random_unit(rng):
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n


def _chain(n, spec, rng):
    b, j = spec.bond_length, spec.jitter
    theta = np.deg2rad(spec.bond_angle)
    dmin = spec.min_distance if spec.min_distance is not None else 0.0
    for _ in range(1000):
        pts = [np.zeros(3)]
        lengths = b + (rng.uniform(-j, j, n - 1) if j > 0 else np.zeros(n - 1))
        pts.append(np.array([lengths[0], 0.0, 0.0]))
        ok = True
        for k in range(2, n):
            prev = _unit(pts[k - 2] - pts[k - 1])
            perp = _random_unit(rng)
            perp = _unit(perp - perp.dot(prev) * prev)
            d = np.cos(theta) * prev + np.sin(theta) * perp
            cand = pts[k - 1] + lengths[k - 1] * d
            if dmin > 0 and min(np.linalg.norm(cand - q) for q in pts[:-1]) < dmin:
                ok = False
                break
            pts.append(cand)
        if ok:
            return np.array(pts)
    raise SpecError("could not place a chain satisfying min_distance")


def _ring(n, spec, rng):
    radius = spec.bond_length / (2.0 * np.sin(np.pi / n))
    ang = 2.0 * np.pi * np.arange(n) / n
    pts = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(n)], axis=1)
    return pts + _bounded_jitter(n, spec.jitter, rng)


def _bounded_jitter(n, jitter, rng):
    # displacement norm <= jitter/2 keeps every pair distance within +-jitter
    if jitter == 0:
        return np.zeros((n, 3))
    dirs = np.array([_random_unit(rng) for _ in range(n)])
    return dirs * rng.uniform(0.0, jitter / 2.0, (n, 1))


def principal_frame(positions: np.ndarray) -> np.ndarray:
    """Centre positions and rotate them onto their principal axes (proper rotation)."""
    x = positions - positions.mean(axis=0)
    gyr = x.T @ x
    _, vecs = np.linalg.eigh(gyr)
    vecs = vecs[:, ::-1]
    for k in range(3):
        # deterministic sign: first non-negligible component positive
        col = vecs[:, k]
        idx = int(np.argmax(np.abs(col) > 1e-8))
        if col[idx] < 0:
            vecs[:, k] = -col
    if np.linalg.det(vecs) < 0:
        vecs[:, 2] = -vecs[:, 2]
    return x @ vecs


def gen_synthetic_dataset(spec: SyntheticSpec, seed: int) -> Dataset:
    """Generate a deterministic synthetic dataset.

    Molecules are centred on their centroid. With ``spec.group_closed`` the
    24 octahedral rotations of every base molecule are appended, so the
    result has ``24 * n_molecules`` members.
    """
    from .geom3 import octahedral_group, sample_haar_rotation

    spec.validate()
    rng = np.random.default_rng(seed)
    library = fragment_library() if spec.motif == "template" else None
    mols = []
    for i in range(spec.n_molecules):
        if spec.motif == "template":
            frag = library[int(rng.integers(len(library)))]
            elements = frag.elements
            pos = frag.positions + _bounded_jitter(len(frag), spec.jitter, rng)
            name = f"{frag.name}_{i}"
        else:
            n = int(rng.integers(spec.atoms_min, spec.atoms_max + 1))
            pos = _chain(n, spec, rng) if spec.motif == "chain" else _ring(n, spec, rng)
            elements = tuple(spec.elements[k] for k in rng.integers(len(spec.elements), size=n))
            name = f"{spec.motif}_{i}"
        if spec.orientation == "principal":
            pos = principal_frame(pos)
        else:
            pos = pos - pos.mean(axis=0)
            if spec.orientation == "random":
                pos = pos @ sample_haar_rotation(rng).matrix.T
        mols.append(Molecule(elements, pos, name=name))
    if spec.group_closed:
        closed = []
        for mol in mols:
            c = mol.centroid()
            for k, rot in enumerate(octahedral_group()):
                p = (mol.positions - c) @ rot.matrix.T + c
                closed.append(Molecule(mol.elements, p, name=f"{mol.name}_o{k}"))
        mols = closed
    return Dataset(mols, group_closed=spec.group_closed)


def check_group_closure(dataset: Dataset, tol: float = 1e-9) -> bool:
    """True when every octahedral rotation of every member is itself a member.

    Members are compared after centroid alignment, atom by atom in stored
    order.
    """
    from .geom3 import octahedral_group

    group = octahedral_group()
    centered = [(m.elements, m.positions - m.centroid()) for m in dataset.molecules]
    by_elements = {}
    for el, pos in centered:
        by_elements.setdefault(el, []).append(pos)
    for el, pos in centered:
        pool = by_elements[el]
        for rot in group:
            q = pos @ rot.matrix.T
            if not any(np.max(np.abs(q - other)) <= tol for other in pool):
                return False
    return True

