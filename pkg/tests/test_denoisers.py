import numpy as np
import pytest

from voxequiv.denoisers import (EmpiricalBayesDenoiser, GroupAveragedDenoiser, IdentityDenoiser, NeuralDenoiser,
                                ScoreField, empirical_bayes_denoise, tweedie_score)
from voxequiv.errors import CapabilityError, SpecError
from voxequiv.geom3 import cyclic_z_group, octahedral_group, rot_axis_angle, rotate_array, z_rotations
from voxequiv.voxelizer import voxelize


@pytest.fixture(scope="module")
def reference(small_dataset, small_spec):
    return np.stack([voxelize(m, small_spec).data for m in small_dataset.molecules[:6]])


def test_singleton_reference_returns_it(reference, rng):
    one = reference[:1]
    y = one[0] + rng.standard_normal(one[0].shape)
    assert np.array_equal(empirical_bayes_denoise(one, y, 0.9), one[0])


def test_eb_weights_and_limits(reference, rng):
    d = EmpiricalBayesDenoiser(reference)
    y = reference[2] + 0.01 * rng.standard_normal(reference[2].shape)
    assert np.isclose(d.weights(y, 0.9).sum(), 1.0)
    assert np.allclose(d.denoise(y, 0.05), reference[2], atol=1e-12)
    assert np.allclose(d.denoise(y, 1e6), reference.mean(axis=0), atol=1e-9)
    assert d.embed(y).shape == (len(reference),)
    with pytest.raises(SpecError):
        EmpiricalBayesDenoiser(reference, max_reference=3)


def test_tweedie_matches_log_density_gradient(reference, rng):
    d = EmpiricalBayesDenoiser(reference)
    sigma = 1.5
    y = reference[0] + sigma * rng.standard_normal(reference[0].shape)
    score = tweedie_score(d, y, sigma)
    flat = y.reshape(-1)
    h = 1e-5
    for i in rng.choice(flat.size, 20, replace=False):
        e = np.zeros_like(flat)
        e[i] = h
        num = (d.log_density((flat + e).reshape(y.shape), sigma)
               - d.log_density((flat - e).reshape(y.shape), sigma)) / (2 * h)
        assert abs(num - score.reshape(-1)[i]) < 1e-6
    assert np.allclose(ScoreField(d, sigma)(y), score)


def test_group_averaged_is_exactly_equivariant(tiny_net, small_dataset, small_spec, rng):
    g = voxelize(small_dataset.molecules[0], small_spec).data
    y = g + 0.9 * rng.standard_normal(g.shape)
    d = GroupAveragedDenoiser(NeuralDenoiser(tiny_net), cyclic_z_group())
    for rot in z_rotations():
        lhs = d.denoise(rotate_array(y, rot), 0.9)
        rhs = rotate_array(d.denoise(y, 0.9), rot)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10
    e = d.embed(y)
    assert np.array_equal(d.embed(rotate_array(y, z_rotations()[1])), e)


def test_eb_over_closed_reference_is_equivariant(reference, rng):
    closed = np.stack([rotate_array(x, r) for x in reference[:2] for r in octahedral_group()])
    d = EmpiricalBayesDenoiser(closed)
    y = closed[0] + 0.9 * rng.standard_normal(closed[0].shape)
    for rot in octahedral_group():
        assert np.max(np.abs(d.denoise(rotate_array(y, rot), 0.9) - rotate_array(d.denoise(y, 0.9), rot))) <= 1e-9


def test_group_validation(tiny_net):
    base = NeuralDenoiser(tiny_net)
    with pytest.raises(SpecError):
        GroupAveragedDenoiser(base, z_rotations()[:2])
    with pytest.raises(SpecError):
        GroupAveragedDenoiser(base, [rot_axis_angle((0, 0, 1), np.pi / 4)])
    with pytest.raises(SpecError):
        GroupAveragedDenoiser(base, [])


def test_identity_and_capabilities(reference, small_spec):
    d = IdentityDenoiser()
    assert np.array_equal(d.denoise(reference[0], 0.9), reference[0])
    with pytest.raises(CapabilityError):
        d.embed(reference[0])
    with pytest.raises(SpecError):
        tweedie_score(d, reference[0], 0.0)


def test_neural_denoiser_grid_in_grid_out(tiny_net, small_dataset, small_spec):
    g = voxelize(small_dataset.molecules[0], small_spec)
    out = NeuralDenoiser(tiny_net).denoise(g, 0.9)
    assert out.spec == small_spec and out.data.shape == g.data.shape
    with pytest.raises(CapabilityError):
        NeuralDenoiser(tiny_net).predict_property(g)
