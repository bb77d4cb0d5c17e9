import json

import numpy as np
import pytest

from voxequiv.denoisers import EmpiricalBayesDenoiser, GroupAveragedDenoiser, IdentityDenoiser, NeuralDenoiser
from voxequiv.equiv_metrics import (FRESH, MATCHED, baseline_recon_error, decompose_outputs, equivariance_curve,
                                    equivariance_errors, huber_loss_decomposition, interpolation_floor,
                                    latent_cosine_matrix, mse_loss_decomposition, recon_equivariance_error)
from voxequiv.errors import ConventionError, SpecError
from voxequiv.geom3 import cyclic_z_group, identity, octahedral_group, rot_axis_angle, rotate_array


def test_toy_two_dimensional_split():
    z = np.array([[1.0, 0.0], [3.0, 2.0]])
    y = np.array([0.0, 0.0])
    total, pred, eq = decompose_outputs(z, y)
    # mean output (2, 1): prediction (4 + 1) / 2, variance (1 + 1) / 2
    assert (total, pred, eq) == (3.5, 2.5, 1.0)


def test_identity_rotation_has_zero_error(tiny_net, small_dataset, small_spec, rng):
    d = NeuralDenoiser(tiny_net)
    assert recon_equivariance_error(d, small_dataset.molecules[0], identity(), 0.9, rng, small_spec) == 0.0


def test_matched_convention_needs_exact_rotation(tiny_net, small_dataset, small_spec, rng):
    with pytest.raises(ConventionError):
        recon_equivariance_error(NeuralDenoiser(tiny_net), small_dataset.molecules[0],
                                 rot_axis_angle((0, 0, 1), np.pi / 4), 0.9, rng, small_spec, MATCHED)
    with pytest.raises(SpecError):
        recon_equivariance_error(NeuralDenoiser(tiny_net), small_dataset.molecules[0], identity(), 0.9, rng,
                                 small_spec, "reused")


def test_exact_oracles(tiny_net, small_dataset, small_spec, rng):
    mols = small_dataset.molecules[:3]
    ga = GroupAveragedDenoiser(NeuralDenoiser(tiny_net), octahedral_group())
    assert equivariance_errors(ga, mols[:1], octahedral_group(), 0.9, rng, small_spec).max() <= 1e-10
    ref = [rotate_array(EmpiricalBayesDenoiser.from_dataset(mols, small_spec).reference[i].reshape(small_spec.shape), r)
           for i in range(len(mols)) for r in octahedral_group()]
    eb = EmpiricalBayesDenoiser(np.stack(ref), max_reference=len(ref))
    assert equivariance_errors(eb, mols, octahedral_group(), 0.9, rng, small_spec).max() <= 1e-9


def test_baseline_small_sigma_near_zero_for_identity(small_dataset, small_spec, rng):
    assert baseline_recon_error(IdentityDenoiser(), small_dataset, 1e-4, rng, small_spec) < 1e-7


def test_decomposition_identity_and_files(tiny_net, small_dataset, small_spec, rng, tmp_path):
    rep = mse_loss_decomposition(NeuralDenoiser(tiny_net), small_dataset.molecules[:3], cyclic_z_group(), 0.9,
                                 rng, small_spec)
    assert rep.relative_residual <= 1e-12
    assert rep.equivariance_error > 0
    rep.write_csv(tmp_path / "d.csv")
    rep.write_json(tmp_path / "d.json")
    assert json.loads((tmp_path / "d.json").read_text())["loss"] == "mse"
    ga = GroupAveragedDenoiser(NeuralDenoiser(tiny_net), cyclic_z_group())
    assert mse_loss_decomposition(ga, small_dataset.molecules[:2], cyclic_z_group(), 0.9, rng,
                                  small_spec).equivariance_error <= 1e-20
    with pytest.raises(ConventionError):
        mse_loss_decomposition(ga, small_dataset, [rot_axis_angle((1, 0, 0), 0.3)], 0.9, rng, small_spec)


def test_huber_split_is_diagnostic(tiny_net, small_dataset, small_spec, rng):
    rep = huber_loss_decomposition(NeuralDenoiser(tiny_net), small_dataset.molecules[:2], cyclic_z_group(), 0.9,
                                   rng, small_spec)
    assert rep.loss.startswith("huber") and rep.total_loss > 0


def test_cosine_matrix(tiny_net, small_dataset, small_spec, rng):
    mol = small_dataset.molecules[0]
    cm = latent_cosine_matrix(NeuralDenoiser(tiny_net), mol, [0, 45, 90, 180], (0, 0, 1), 0.9, rng, small_spec)
    assert np.allclose(cm.matrix, cm.matrix.T) and np.all(np.diag(cm.matrix) == 1.0)
    assert cm.noise == [MATCHED, FRESH, MATCHED, MATCHED]
    ga = GroupAveragedDenoiser(NeuralDenoiser(tiny_net), cyclic_z_group())
    cga = latent_cosine_matrix(ga, mol, [0, 90, 180, 270, 360], (0, 0, 1), 0.9, rng, small_spec)
    assert np.all(cga.matrix == 1.0)


def test_curve_has_floor_and_is_seeded(tiny_net, small_dataset, small_spec):
    d = NeuralDenoiser(tiny_net)
    mols = small_dataset.molecules[:2]
    a = equivariance_curve(d, mols, [0, 45, 90], 0.9, 4, small_spec, axes=((0, 0, 1),))
    b = equivariance_curve(d, mols, [0, 45, 90], 0.9, 4, small_spec, axes=((0, 0, 1),))
    assert a.rows == b.rows
    assert a.at((0, 0, 1), 0)["mean"] == 0.0
    assert a.at((0, 0, 1), 90)["floor"] <= 1e-24
    assert a.at((0, 0, 1), 45)["floor"] > 0.0 and a.at((0, 0, 1), 45)["noise"] == FRESH
    assert interpolation_floor(mols, rot_axis_angle((0, 0, 1), np.pi / 4), small_spec) == pytest.approx(
        a.at((0, 0, 1), 45)["floor"])
