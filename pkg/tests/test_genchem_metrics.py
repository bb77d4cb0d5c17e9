import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from voxequiv.errors import CategoryError, SpecError
from voxequiv.genchem_metrics import (BondTable, MolGraph, asphericity, canonical_form, canonical_hash,
                                      category_counts, default_bond_table, distribution_distance,
                                      evaluate_generated, infer_bonds, kl_histogram, kl_samples,
                                      molecular_properties, rank_agreement, stability_and_validity,
                                      tv_categorical, uniqueness_fraction, w1_scalar)
from voxequiv.geom3 import rotate_points, sample_haar_rotation
from voxequiv.mol_io import Molecule, fragment_library, load_fragment


def pair(a, b, r):
    return Molecule((a, b), [[0, 0, 0], [r, 0, 0]])


@pytest.mark.parametrize("a,b,r,order", [
    ("C", "C", 1.54, 1), ("C", "C", 1.34, 2), ("C", "C", 1.20, 3), ("C", "O", 1.43, 1), ("C", "O", 1.21, 2),
    ("C", "H", 1.09, 1), ("C", "N", 1.15, 3), ("O", "H", 0.96, 1), ("C", "C", 2.0, None), ("O", "O", 1.15, 2),
    ("H", "H", 1.2, None),
])
def test_bond_lookup(a, b, r, order):
    g = infer_bonds(pair(a, b, r))
    assert [o for _, _, o in g.bonds] == ([] if order is None else [order])


def test_bond_table_rejects_overlaps():
    with pytest.raises(SpecError):
        BondTable.parse("bond C C 1 1.5 0.1\nbond C C 2 1.45 0.1\nvalence C 4\n")
    assert default_bond_table().max_valence("S") == 6


@pytest.mark.parametrize("name,stable", [("methane", True), ("water", True), ("ammonia", True),
                                         ("ethylene", True), ("acetylene", True), ("formaldehyde", True),
                                         ("hydrogen_cyanide", True), ("chloromethane", True),
                                         ("hydrogen_sulfide", True)])
def test_fragment_stability(name, stable):
    rep = stability_and_validity(infer_bonds(load_fragment(name)))
    assert rep.molecule_stable is stable and rep.valid


def test_benzene_without_aromaticity_is_unstable():
    g = infer_bonds(load_fragment("benzene"))
    rep = stability_and_validity(g)
    assert not rep.molecule_stable and not rep.valid
    assert molecular_properties(load_fragment("benzene"), g).ring_count == 1


def test_disconnected_is_invalid():
    mol = Molecule(("O", "H", "H", "O", "H", "H"),
                   [[0, 0, 0], [0.96, 0, 0], [-0.24, 0.93, 0], [5, 0, 0], [5.96, 0, 0], [4.76, 0.93, 0]])
    rep = stability_and_validity(infer_bonds(mol))
    assert rep.molecule_stable and not rep.valid


def random_graph(rng, n):
    elems = tuple(rng.choice(["C", "N", "O"], n))
    bonds = tuple((i, j, int(rng.integers(1, 3))) for i, j in itertools.combinations(range(n), 2)
                  if rng.random() < 0.4)
    return MolGraph(elems, bonds)


def relabel(g, perm):
    atoms = [None] * g.n_atoms
    for v, p in enumerate(perm):
        atoms[p] = g.atoms[v]
    bonds = tuple(sorted((min(perm[i], perm[j]), max(perm[i], perm[j]), o) for i, j, o in g.bonds))
    return MolGraph(tuple(atoms), bonds)


def to_nx(g):
    G = nx.Graph()
    for v, e in enumerate(g.atoms):
        G.add_node(v, e=e)
    for i, j, o in g.bonds:
        G.add_edge(i, j, o=o)
    return G


def test_canonical_form_is_invariant_and_complete():
    rng = np.random.default_rng(0)
    graphs = [random_graph(rng, int(rng.integers(2, 7))) for _ in range(60)]
    for g in graphs:
        assert canonical_form(relabel(g, rng.permutation(g.n_atoms))) == canonical_form(g)
    for g, h in itertools.combinations(graphs, 2):
        iso = nx.is_isomorphic(to_nx(g), to_nx(h), node_match=lambda a, b: a["e"] == b["e"],
                               edge_match=lambda a, b: a["o"] == b["o"])
        assert iso == (canonical_form(g) == canonical_form(h))


def test_canonical_form_on_symmetric_graphs():
    ring6 = MolGraph(("C",) * 6, tuple((min(i, (i + 1) % 6), max(i, (i + 1) % 6), 1) for i in range(6)))
    two_triangles = MolGraph(("C",) * 6, ((0, 1, 1), (0, 2, 1), (1, 2, 1), (3, 4, 1), (3, 5, 1), (4, 5, 1)))
    # colour refinement alone cannot separate these two 2-regular graphs
    assert canonical_form(ring6) != canonical_form(two_triangles)
    assert canonical_hash(ring6) == canonical_hash(relabel(ring6, [3, 1, 5, 0, 2, 4]))
    assert uniqueness_fraction([ring6, two_triangles, relabel(ring6, [1, 2, 3, 4, 5, 0])]) == pytest.approx(2 / 3)
    with pytest.raises(SpecError):
        uniqueness_fraction([])


def test_known_distance_values():
    assert tv_categorical([1, 2, 3], [2, 4, 6]) == 0.0
    assert abs(tv_categorical([0.5, 0.5], [1, 0]) - 0.5) <= 1e-12
    assert abs(w1_scalar([0.0], [1.0]) - 1.0) <= 1e-12
    assert w1_scalar([1.0, 2.0, 5.0], [5.0, 2.0, 1.0]) == 0.0
    assert kl_samples([0.1, 0.2, 0.3], [0.1, 0.2, 0.3]) <= 1e-12
    assert kl_histogram([1, 0], [0, 1]) > 10
    assert abs(rank_agreement([1, 2, 3, 4], [10, 20, 30, 40]).spearman_rho - 1.0) <= 1e-12
    assert abs(rank_agreement([1, 2, 3, 4], [4, 3, 2, 1]).spearman_rho + 1.0) <= 1e-12
    assert distribution_distance([1, 1], [1, 1], "tv_categorical") == 0.0
    with pytest.raises(SpecError):
        distribution_distance([1], [1], "hellinger")


def test_category_errors():
    with pytest.raises(CategoryError):
        tv_categorical({"C": 1, "N": 1}, {"C": 1, "O": 1})
    with pytest.raises(CategoryError):
        category_counts(["C", "X"], ["C", "N"])
    assert tv_categorical({"C": 1, "N": 1}, {"N": 2, "C": 0}) == 0.5


def transport_lp(a, b):
    """W1 between uniform empirical measures as an explicit transport LP."""
    n, m = len(a), len(b)
    cost = np.abs(np.subtract.outer(a, b)).ravel()
    rows = []
    for i in range(n):
        r = np.zeros((n, m))
        r[i] = 1
        rows.append(r.ravel())
    for j in range(m):
        r = np.zeros((n, m))
        r[:, j] = 1
        rows.append(r.ravel())
    # integer masses (m per source, n per sink) keep the LP well conditioned
    rhs = np.concatenate([np.full(n, float(m)), np.full(m, float(n))])
    return linprog(cost, A_eq=np.array(rows), b_eq=rhs, bounds=(0, None), method="highs",
                   options={"dual_feasibility_tolerance": 1e-10, "primal_feasibility_tolerance": 1e-10}).fun / (n * m)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_w1_equals_transport_lp(a, b):
    assert abs(w1_scalar(a, b) - transport_lp(np.array(a), np.array(b))) <= 1e-9


def test_spearman_ties_and_degenerate():
    assert rank_agreement([1.0, 1.0 + 1e-15, 2.0], [1.0, 1.0, 2.0]).spearman_rho == pytest.approx(1.0)
    r = rank_agreement([1.0, 1.0, 1.0], [1, 2, 3])
    assert not r.rho_defined and np.isnan(r.spearman_rho)
    with pytest.raises(SpecError):
        rank_agreement([1, 2], [1, 2])


def test_asphericity_cases():
    assert asphericity([[0, 0, 0], [1, 0, 0], [2, 0, 0]]) == pytest.approx(1.0)
    tetra = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    assert asphericity(tetra) == pytest.approx(0.0, abs=1e-15)
    square = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], dtype=float)
    assert asphericity(square) == pytest.approx(0.25)
    pts = np.random.default_rng(0).standard_normal((7, 3))
    assert asphericity(3.7 * pts) == pytest.approx(asphericity(pts))


def test_properties_rotation_invariant():
    rng = np.random.default_rng(2)
    for mol in fragment_library():
        a = molecular_properties(mol).to_dict()
        b = molecular_properties(rotate_points(sample_haar_rotation(rng), mol, center="centroid")).to_dict()
        for k in a:
            assert a[k] == pytest.approx(b[k], abs=1e-9), (mol.name, k)


def test_single_heavy_atom_flags_asphericity():
    p = molecular_properties(load_fragment("water"))
    assert p.heavy_atom_count == 1 and not p.asphericity_defined and p.hbond_donors == 1


def test_evaluate_generated_against_itself():
    mols = fragment_library()
    rep = evaluate_generated(mols + [None], reference=mols)
    assert rep.n == len(mols) + 1 and rep.n_empty == 1
    assert rep.atom_tv == pytest.approx(0.0) and rep.valency_w1 == 0.0
    assert all(v <= 1e-12 for v in rep.property_kl.values())
    assert rep.unique == 1.0
