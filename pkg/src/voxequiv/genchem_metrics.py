"""Toolkit-free molecule metrics: bonds, stability, uniqueness, distances, properties.

Bonds come from a distance-band table (``data/bond_table.txt``). Validity
here is a proxy: a molecule is valid when its bond graph is connected and
no atom exceeds the largest allowed valency for its element. It is weaker
than a cheminformatics sanitizer and reports label it as such.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy import stats
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import CategoryError, ParseError, SpecError
from .mol_io import Molecule, normalize_element

VALIDITY_NOTE = "valid = connected bond graph and no valency above the element maximum (proxy)"
KL_ALPHA = 1e-6
KL_BINS = 50


# ------------------------------------------------------------------ tables


@dataclass(frozen=True)
class BondBand:
    order: int
    length: float
    tolerance: float

    @property
    def low(self):
        return self.length - self.tolerance

    @property
    def high(self):
        return self.length + self.tolerance

    def contains(self, r) -> bool:
        return self.low <= r <= self.high


@dataclass
class BondTable:
    bands: dict
    valences: dict

    def __post_init__(self):
        for pair, bands in self.bands.items():
            ordered = sorted(bands, key=lambda b: b.length)
            for b in ordered:
                if b.length <= 0 or b.tolerance < 0:
                    raise SpecError(f"bad band {b} for {pair}")
            for lo, hi in zip(ordered, ordered[1:]):
                if lo.high >= hi.low:
                    raise SpecError(f"overlapping bond bands for {pair}: orders {lo.order} and {hi.order}")

    @staticmethod
    def key(a, b):
        return tuple(sorted((a, b)))

    def bands_for(self, a, b):
        return self.bands.get(self.key(a, b), ())

    def max_valence(self, element) -> int:
        return max(self.valences[element])

    @property
    def max_length(self) -> float:
        return max(b.high for bands in self.bands.values() for b in bands)

    @classmethod
    def parse(cls, text: str) -> "BondTable":
        bands, valences = {}, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].split()
            if not line:
                continue
            try:
                if line[0] == "bond" and len(line) == 6:
                    a, b = normalize_element(line[1]), normalize_element(line[2])
                    band = BondBand(int(line[3]), float(line[4]), float(line[5]))
                    bands.setdefault(cls.key(a, b), []).append(band)
                elif line[0] == "valence" and len(line) == 3:
                    valences[normalize_element(line[1])] = frozenset(int(v) for v in line[2].split(","))
                else:
                    raise ValueError(raw)
            except ValueError as exc:
                raise ParseError(f"cannot parse bond table entry: {raw!r}", lineno) from exc
        for pair in bands:
            bands[pair] = tuple(sorted(bands[pair], key=lambda b: -b.order))
        return cls(bands, valences)

    @classmethod
    def default(cls) -> "BondTable":
        return cls.parse(resources.files("voxequiv").joinpath("data/bond_table.txt").read_text())


_DEFAULT_TABLE = None


def default_bond_table() -> BondTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = BondTable.default()
    return _DEFAULT_TABLE


# ------------------------------------------------------------------- graphs


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple
    bonds: tuple = ()

    def __post_init__(self):
        seen = set()
        for i, j, order in self.bonds:
            if i == j:
                raise SpecError("self-bond")
            if not i < j:
                raise SpecError("bond pairs must be ordered i < j")
            if (i, j) in seen:
                raise SpecError(f"duplicate bond {(i, j)}")
            if order not in (1, 2, 3):
                raise SpecError(f"bond order must be 1, 2 or 3, got {order}")
            seen.add((i, j))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def valencies(self) -> np.ndarray:
        val = np.zeros(len(self.atoms), dtype=np.int64)
        for i, j, order in self.bonds:
            val[i] += order
            val[j] += order
        return val

    def neighbors(self):
        nb = [[] for _ in self.atoms]
        for i, j, order in self.bonds:
            nb[i].append((j, order))
            nb[j].append((i, order))
        return nb

    def n_components(self, nodes=None) -> int:
        nodes = range(len(self.atoms)) if nodes is None else list(nodes)
        idx = {n: k for k, n in enumerate(nodes)}
        if not idx:
            return 0
        rows = [idx[i] for i, j, _ in self.bonds if i in idx and j in idx]
        cols = [idx[j] for i, j, _ in self.bonds if i in idx and j in idx]
        adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(idx), len(idx)))
        return int(connected_components(adj, directed=False)[0])


def infer_bonds(mol: Molecule, table: BondTable | None = None) -> MolGraph:
    """Bond every pair whose distance falls in a band; highest order wins."""
    table = table or default_bond_table()
    pos = np.asarray(mol.positions, dtype=np.float64)
    if not np.all(np.isfinite(pos)):
        raise SpecError("coordinates must be finite")
    n = len(mol.elements)
    bonds = []
    for i in range(n):
        for j in range(i + 1, n):
            r = float(np.linalg.norm(pos[i] - pos[j]))
            for band in table.bands_for(mol.elements[i], mol.elements[j]):
                if band.contains(r):
                    bonds.append((i, j, band.order))
                    break
    return MolGraph(tuple(mol.elements), tuple(bonds))


@dataclass
class StabilityReport:
    atom_stable_fraction: float
    molecule_stable: bool
    valid: bool
    note: str = VALIDITY_NOTE


def stability_and_validity(g: MolGraph, table: BondTable | None = None) -> StabilityReport:
    table = table or default_bond_table()
    val = g.valencies
    stable = [int(v) in table.valences[e] for e, v in zip(g.atoms, val)]
    within = all(int(v) <= table.max_valence(e) for e, v in zip(g.atoms, val))
    connected = g.n_atoms > 0 and g.n_components() == 1
    frac = float(np.mean(stable)) if stable else 0.0
    return StabilityReport(frac, bool(stable) and all(stable), connected and within)


# ------------------------------------------------------- canonical labeling


def _rank(keys):
    order = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [order[k] for k in keys]


def _refine(colors, nb):
    """Colour refinement until the partition stops splitting."""
    while True:
        sig = [(colors[v], tuple(sorted((colors[u], o) for u, o in nb[v]))) for v in range(len(colors))]
        new = _rank(sig)
        if len(set(new)) == len(set(colors)):
            return new
        colors = new


def _encode(g: MolGraph, labels):
    elems = [None] * g.n_atoms
    for v, lab in enumerate(labels):
        elems[lab] = g.atoms[v]
    edges = sorted((min(labels[i], labels[j]), max(labels[i], labels[j]), o) for i, j, o in g.bonds)
    return (tuple(elems), tuple(edges))


def canonical_form(g: MolGraph) -> tuple:
    """Isomorphism-invariant form ``(elements in canonical order, sorted labelled bonds)``.

    Colours start from (element, valency) and are refined by neighbour
    colours. Remaining ties are broken by trying every vertex of the first
    tied cell as the distinguished one and keeping the smallest encoding, so
    the form is exact (not a hash) at a cost that grows with symmetry.
    """
    nb = g.neighbors()
    val = g.valencies
    start = _rank([(e, int(v)) for e, v in zip(g.atoms, val)])
    best = None

    def search(colors):
        nonlocal best
        colors = _refine(colors, nb)
        counts = Counter(colors)
        tied = sorted(c for c, k in counts.items() if k > 1)
        if not tied:
            enc = _encode(g, colors)
            if best is None or enc < best:
                best = enc
            return
        cell = tied[0]
        for v in range(len(colors)):
            if colors[v] == cell:
                split = [2 * c + (1 if (c == cell and u != v) else 0) for u, c in enumerate(colors)]
                search(_rank(split))

    if g.n_atoms:
        search(start)
    else:
        best = ((), ())
    return best


def canonical_hash(g: MolGraph) -> str:
    return hashlib.sha1(repr(canonical_form(g)).encode()).hexdigest()


def uniqueness_fraction(graphs) -> float:
    """Distinct canonical forms over total. Forms are compared, not only hashes."""
    graphs = list(graphs)
    if not graphs:
        raise SpecError("uniqueness needs at least one graph")
    return len({canonical_form(g) for g in graphs}) / len(graphs)


# -------------------------------------------------------------- distances


def category_counts(items, categories) -> np.ndarray:
    categories = list(categories)
    index = {c: k for k, c in enumerate(categories)}
    out = np.zeros(len(categories))
    for it in items:
        if it not in index:
            raise CategoryError(f"{it!r} is not among the categories {categories}")
        out[index[it]] += 1
    return out


def _as_probs(x):
    p = np.asarray(x, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or p.sum() <= 0:
        raise SpecError("expected non-negative counts with positive total")
    return p / p.sum()


def tv_categorical(a, b) -> float:
    """Half the L1 distance between two normalised count vectors (or dicts)."""
    if isinstance(a, dict) or isinstance(b, dict):
        if not (isinstance(a, dict) and isinstance(b, dict)) or set(a) != set(b):
            raise CategoryError("categorical distributions must share one category set")
        keys = sorted(a, key=str)
        a, b = [a[k] for k in keys], [b[k] for k in keys]
    p, q = _as_probs(a), _as_probs(b)
    if p.shape != q.shape:
        raise CategoryError("categorical distributions must share one category set")
    return float(0.5 * np.abs(p - q).sum())


def w1_scalar(a, b) -> float:
    """Exact 1D Wasserstein-1 distance between two samples."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise SpecError("W1 needs non-empty samples")
    return float(stats.wasserstein_distance(a, b))


def shared_histograms(a, b, bins: int = KL_BINS):
    """Histograms of both samples on ``bins`` equal bins over the pooled range."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    pooled = np.concatenate([a, b])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return np.histogram(a, edges)[0].astype(float), np.histogram(b, edges)[0].astype(float), edges


def kl_histogram(a, b, alpha: float = KL_ALPHA) -> float:
    """``KL(A || B)`` for two histograms on shared bins with add-alpha smoothing."""
    p = np.asarray(a, dtype=np.float64)
    q = np.asarray(b, dtype=np.float64)
    if p.shape != q.shape:
        raise CategoryError("histograms must share bins")
    p = _as_probs(p) + alpha
    q = _as_probs(q) + alpha
    return float(stats.entropy(p / p.sum(), q / q.sum()))


def kl_samples(a, b, bins: int = KL_BINS, alpha: float = KL_ALPHA) -> float:
    ha, hb, _ = shared_histograms(a, b, bins)
    return kl_histogram(ha, hb, alpha)


def distribution_distance(a, b, kind: str) -> float:
    """``kind`` is ``tv_categorical`` (counts), ``w1_scalar`` (samples) or ``kl_histogram`` (samples)."""
    if kind == "tv_categorical":
        return tv_categorical(a, b)
    if kind == "w1_scalar":
        return w1_scalar(a, b)
    if kind == "kl_histogram":
        return kl_samples(a, b)
    raise SpecError(f"unknown distance kind {kind!r}")


# ------------------------------------------------------------- properties


@dataclass
class PropertyVector:
    heavy_atom_count: int
    ring_count: int
    hbond_donors: int
    sp3_carbon_fraction: float
    asphericity: float
    radius_of_gyration: float
    asphericity_defined: bool = True

    NAMES = ("heavy_atom_count", "ring_count", "hbond_donors", "sp3_carbon_fraction",
             "asphericity", "radius_of_gyration")

    def to_dict(self) -> dict:
        return asdict(self)

    def __getitem__(self, name):
        return getattr(self, name)


def gyration_eigenvalues(coords) -> np.ndarray:
    x = np.asarray(coords, dtype=np.float64)
    x = x - x.mean(axis=0)
    tensor = x.T @ x / len(x)
    return np.sort(np.linalg.eigvalsh(tensor))[::-1]


def asphericity(coords) -> float:
    """Spread of gyration eigenvalues: 0 for isotropic sets, 1 for collinear ones."""
    lam = np.clip(gyration_eigenvalues(coords), 0.0, None)
    s = lam.sum()
    if s <= 0:
        return 0.0
    l1, l2, l3 = lam
    return float(((l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2) / (2.0 * s * s))


def molecular_properties(mol: Molecule, g: MolGraph | None = None) -> PropertyVector:
    g = g if g is not None else infer_bonds(mol)
    heavy = [i for i, e in enumerate(mol.elements) if e != "H"]
    heavy_set = set(heavy)
    n_heavy_bonds = sum(1 for i, j, _ in g.bonds if i in heavy_set and j in heavy_set)
    rings = n_heavy_bonds - len(heavy) + g.n_components(heavy) if heavy else 0
    nb = g.neighbors()
    donors = sum(1 for i in heavy if mol.elements[i] in ("N", "O") and any(mol.elements[u] == "H" for u, _ in nb[i]))
    carbons = [i for i in heavy if mol.elements[i] == "C"]
    sp3 = sum(1 for i in carbons if len(nb[i]) == 4 and all(o == 1 for _, o in nb[i]))
    frac = sp3 / len(carbons) if carbons else 0.0
    pos = np.asarray(mol.positions)[heavy]
    if len(heavy) >= 2:
        asph, defined = asphericity(pos), True
        rg = float(np.sqrt(np.mean(np.sum((pos - pos.mean(axis=0)) ** 2, axis=1))))
    else:
        asph, defined, rg = 0.0, False, 0.0
    return PropertyVector(len(heavy), int(rings), int(donors), float(frac), asph, rg, defined)


def bond_angles(mol: Molecule, g: MolGraph) -> np.ndarray:
    """All angles (degrees) between bonded triples ``a-b-c``."""
    pos = np.asarray(mol.positions)
    out = []
    for b, nbs in enumerate(g.neighbors()):
        for x in range(len(nbs)):
            for y in range(x + 1, len(nbs)):
                u = pos[nbs[x][0]] - pos[b]
                v = pos[nbs[y][0]] - pos[b]
                c = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
                out.append(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return np.asarray(out)


# ---------------------------------------------------------- rank agreement


@dataclass
class RankAgreement:
    spearman_rho: float
    mae: float
    rho_defined: bool = True


def _tie_round(x, digits):
    return np.array([float(f"{v:.{digits}g}") for v in x]) if digits else x


def rank_agreement(pred, target, tie_digits: int = 12) -> RankAgreement:
    """Spearman correlation (average ranks for ties) and mean absolute error.

    Values equal to ``tie_digits`` significant digits rank as ties, so
    rounding noise in otherwise identical predictions cannot reorder them.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or len(p) < 3:
        raise SpecError("rank agreement needs two equal-length vectors of at least 3 values")
    mae = float(np.mean(np.abs(p - t)))
    if np.all(p == p[0]) or np.all(t == t[0]):
        return RankAgreement(float("nan"), mae, False)
    rp, rt = stats.rankdata(_tie_round(p, tie_digits)), stats.rankdata(_tie_round(t, tie_digits))
    rp -= rp.mean()
    rt -= rt.mean()
    rho = float(rp @ rt / np.sqrt((rp @ rp) * (rt @ rt)))
    return RankAgreement(rho, mae, True)


# --------------------------------------------------------- set-level report


@dataclass
class GenerationReport:
    n: int
    n_empty: int
    atom_stable: float
    molecule_stable: float
    valid: float
    unique: float
    atom_tv: float | None = None
    bond_tv: float | None = None
    valency_w1: float | None = None
    bond_angle_w1: float | None = None
    property_kl: dict = field(default_factory=dict)
    validity_note: str = VALIDITY_NOTE

    def to_dict(self) -> dict:
        return asdict(self)


BOND_ORDERS = (1, 2, 3)


def _bond_order_counts(graphs):
    counts = Counter(o for g in graphs for _, _, o in g.bonds)
    return np.array([counts[o] for o in BOND_ORDERS], dtype=float)


def _summaries(mols, table):
    graphs = [infer_bonds(m, table) for m in mols]
    reps = [stability_and_validity(g, table) for g in graphs]
    props = [molecular_properties(m, g) for m, g in zip(mols, graphs)]
    return graphs, reps, props


def evaluate_generated(generated, reference=None, table: BondTable | None = None,
                       elements=None) -> GenerationReport:
    """Stability, validity, uniqueness and (with a reference set) distribution distances.

    ``generated`` may contain ``None`` for empty jumps; they count toward
    ``n`` and as unstable and invalid.
    """
    table = table or default_bond_table()
    mols = [m for m in generated if m is not None]
    n = len(list(generated))
    graphs, reps, props = _summaries(mols, table)
    atom_stable = (float(np.sum([r.atom_stable_fraction * g.n_atoms for r, g in zip(reps, graphs)]))
                   / max(1, sum(g.n_atoms for g in graphs)))
    report = GenerationReport(
        n=n, n_empty=n - len(mols), atom_stable=atom_stable,
        molecule_stable=sum(r.molecule_stable for r in reps) / n if n else 0.0,
        valid=sum(r.valid for r in reps) / n if n else 0.0,
        unique=uniqueness_fraction(graphs) if graphs else 0.0)
    if reference is not None and mols:
        ref = list(reference)
        rgraphs, _, rprops = _summaries(ref, table)
        elements = elements or sorted({e for m in mols + ref for e in m.elements})
        report.atom_tv = tv_categorical(category_counts([e for m in mols for e in m.elements], elements),
                                        category_counts([e for m in ref for e in m.elements], elements))
        gb, rb = _bond_order_counts(graphs), _bond_order_counts(rgraphs)
        if gb.sum() > 0 and rb.sum() > 0:
            report.bond_tv = tv_categorical(gb, rb)
        report.valency_w1 = w1_scalar(np.concatenate([g.valencies for g in graphs]),
                                      np.concatenate([g.valencies for g in rgraphs]))
        ga = np.concatenate([bond_angles(m, g) for m, g in zip(mols, graphs)] + [np.empty(0)])
        ra = np.concatenate([bond_angles(m, g) for m, g in zip(ref, rgraphs)] + [np.empty(0)])
        if ga.size and ra.size:
            report.bond_angle_w1 = w1_scalar(ga, ra)
        for name in PropertyVector.NAMES:
            report.property_kl[name] = kl_samples([p[name] for p in props], [p[name] for p in rprops])
    return report


def property_kl_between(a_mols, b_mols, table: BondTable | None = None) -> dict:
    """Per-property ``KL(A || B)`` on shared 50-bin histograms."""
    table = table or default_bond_table()
    pa = [molecular_properties(m, infer_bonds(m, table)) for m in a_mols]
    pb = [molecular_properties(m, infer_bonds(m, table)) for m in b_mols]
    return {name: kl_samples([p[name] for p in pa], [p[name] for p in pb]) for name in PropertyVector.NAMES}
