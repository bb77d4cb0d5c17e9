import numpy as np
import pytest

from voxequiv.errors import DivergenceError, LabelError, ShapeError, SpecError
from voxequiv.tinynet import (AdamState, LossSpec, NetConfig, TinyNet, grad_check, init_net, load_checkpoint,
                              net_forward, net_train_step, param_count_formula, save_checkpoint)


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2, 8, 8, 8))
    return x, 0.5 * x + 0.1 * rng.standard_normal(x.shape), np.array([0.3, -0.2])


@pytest.mark.parametrize("loss", [LossSpec.parse("mse_recon"), LossSpec.parse("mse_recon+property", 0.7)])
def test_grad_check_all_layers(batch, loss):
    net = init_net(NetConfig(widths=(2, 3, 4), head="property", head_hidden=5, dropout=0.0), seed=1)
    x, y, p = batch
    rep = grad_check(net, x, y, p, loss, probe_count=12)
    assert rep.max_rel_err <= 1e-6, rep.per_param


def test_grad_check_train_mode_dropout(batch):
    net = init_net(NetConfig(widths=(2, 3, 4), head="property", head_hidden=5, dropout=0.3), seed=2)
    x, y, p = batch
    rep = grad_check(net, x, y, p, LossSpec.parse("mse_property"), probe_count=12, mode="train")
    assert rep.max_rel_err <= 1e-6


@pytest.mark.parametrize("cfg", [NetConfig(widths=(2, 4, 8)), NetConfig(widths=(3, 8, 16, 32), head="property")])
def test_param_count_formula(cfg):
    assert init_net(cfg).param_count == param_count_formula(cfg)


def test_shapes_and_forward(tiny_net):
    g = np.zeros((2, 16, 16, 16))
    out = net_forward(tiny_net, g)
    assert out["reconstruction"].shape == g.shape
    assert out["latent"].shape == (8 * 4 * 4 * 4,)
    with pytest.raises(ShapeError):
        net_forward(tiny_net, np.zeros((3, 16, 16, 16)))
    with pytest.raises(ShapeError):
        net_forward(tiny_net, np.zeros((2, 10, 10, 10)))


def test_config_validation():
    with pytest.raises(SpecError):
        NetConfig(widths=(2,))
    with pytest.raises(SpecError):
        NetConfig(kernel=5)
    with pytest.raises(SpecError):
        LossSpec.parse("hinge")


def test_checkpoint_round_trip(tmp_path, tiny_net):
    p = save_checkpoint(tiny_net, tmp_path / "n.vxnet")
    back = load_checkpoint(p)
    assert back.config == tiny_net.config
    for k in tiny_net.params:
        assert np.array_equal(back.params[k], tiny_net.params[k])
    (tmp_path / "n.vxnet").write_bytes(b"junk" * 4)
    with pytest.raises(ShapeError):
        load_checkpoint(p)


def test_train_step_decreases_loss(batch):
    net = init_net(NetConfig(widths=(2, 4, 8), dropout=0.0), seed=0)
    x, y, _ = batch
    adam = AdamState(lr=1e-2)
    losses = [net_train_step(net, (x, y, None), lr_state=adam)[1] for _ in range(30)]
    assert losses[-1] < losses[0]


def test_divergence_and_missing_labels(batch):
    net = init_net(NetConfig(widths=(2, 4, 8), head="property"), seed=0)
    x, y, _ = batch
    with pytest.raises(LabelError):
        net_train_step(net, (x, y, None), loss=LossSpec(1.0, 1.0), rng=np.random.default_rng(0))
    bad = x.copy()
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        net_train_step(net, (bad, y, None), rng=np.random.default_rng(0))


def test_rejects_mismatched_params(tiny_net):
    params = dict(tiny_net.params)
    params.pop(next(iter(params)))
    with pytest.raises(ShapeError):
        TinyNet(tiny_net.config, params)
