import numpy as np
import pytest

from voxequiv.errors import LabelError, SpecError
from voxequiv.tinynet import NetConfig, TrainConfig
from voxequiv.training import predict_property, train_denoiser, train_property_head
from voxequiv.voxelizer import voxelize


def test_training_is_reproducible(small_dataset, small_spec):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
    a = train_denoiser(small_dataset, small_spec, NetConfig(widths=(2, 4, 8)), cfg)
    b = train_denoiser(small_dataset, small_spec, NetConfig(widths=(2, 4, 8)), cfg)
    assert [r["loss"] for r in a.curve] == [r["loss"] for r in b.curve]
    for k in a.net.params:
        assert np.array_equal(a.net.params[k], b.net.params[k])


def test_denoiser_loss_decreases(small_dataset, small_spec):
    res = train_denoiser(small_dataset, small_spec, NetConfig(widths=(2, 4, 8), dropout=0.0),
                         TrainConfig(epochs=6, batch_size=4, learning_rate=5e-3, augment_rotations=False))
    assert res.curve[-1]["loss"] < res.curve[0]["loss"]


def test_property_head_modes(small_dataset, small_spec):
    labels = np.linspace(0, 1, len(small_dataset))
    cfg = NetConfig(widths=(2, 4, 8), head="property", head_hidden=8, dropout=0.0)
    tc = TrainConfig(epochs=1, batch_size=4)
    for mode in ("encoder_only", "enc_dec_denoise"):
        res = train_property_head(small_dataset, labels, mode, small_spec, cfg, tc)
        grids = np.stack([voxelize(m, small_spec).data for m in small_dataset])
        assert predict_property(res.net, grids).shape == (len(small_dataset),)
    with pytest.raises(LabelError):
        train_property_head(small_dataset, labels[:-1], "encoder_only", small_spec, cfg, tc)
    with pytest.raises(SpecError):
        train_property_head(small_dataset, labels, "decoder_only", small_spec, cfg, tc)


def test_channel_mismatch(small_dataset, small_spec):
    with pytest.raises(SpecError):
        train_denoiser(small_dataset, small_spec, NetConfig(widths=(3, 4)), TrainConfig(epochs=1))
