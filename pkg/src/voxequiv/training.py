"""Training loops for the denoiser and the property head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ExtentError, LabelError, SpecError
from .geom3 import octahedral_group, rotate_points, sample_haar_rotation
from .tinynet import AdamState, LossSpec, NetConfig, TinyNet, TrainConfig, net_train_step
from .voxelizer import GridSpec, voxelize

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    net: TinyNet
    curve: list = field(default_factory=list)
    config: dict = field(default_factory=dict)


def seed_streams(seed):
    names = ("init", "order", "augment", "noise", "dropout")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


class _Augmenter:
    """Draws the per-iteration rotation/translation and voxelizes the result."""

    def __init__(self, spec: GridSpec, cfg: TrainConfig, rng):
        self.spec, self.cfg, self.rng = spec, cfg, rng
        self.group = octahedral_group()
        self._cache = {}

    def __call__(self, idx, mol):
        cfg = self.cfg
        if not (cfg.augment_rotations or cfg.augment_translations):
            if idx not in self._cache:
                self._cache[idx] = voxelize(mol, self.spec).data
            return self._cache[idx]
        if cfg.augment_rotations:
            if cfg.rotation_kind == "haar":
                rot = sample_haar_rotation(self.rng)
            else:
                rot = self.group[int(self.rng.integers(len(self.group)))]
            mol = rotate_points(rot, mol)
        if cfg.augment_translations:
            shift = self.rng.integers(-cfg.max_shift_voxels, cfg.max_shift_voxels + 1, size=3)
            moved = mol.translated(shift * self.spec.resolution)
            try:
                return voxelize(moved, self.spec).data
            except ExtentError:
                pass  # shift would push density past the margin
        return voxelize(mol, self.spec).data


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_denoiser(dataset, gridspec: GridSpec, net_config: NetConfig, train_config: TrainConfig,
                   net: TinyNet | None = None) -> TrainResult:
    """Train a denoiser: augment, voxelize, add noise, regress to the clean grid.

    Returns the trained network and a per-epoch curve of mean batch loss.
    """
    if len(dataset) == 0:
        raise SpecError("cannot train on an empty dataset")
    if net_config.widths[0] != gridspec.n_channels:
        raise SpecError("net input width must equal the grid channel count")
    rs = seed_streams(train_config.seed)
    if net is None:
        net = TinyNet(net_config, rng=rs["init"])
    adam = AdamState(train_config.learning_rate, train_config.beta1, train_config.beta2, train_config.adam_eps)
    augment = _Augmenter(gridspec, train_config, rs["augment"])
    mols = list(dataset)
    sigma = train_config.noise_sigma
    curve = []
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        losses = []
        for batch in _epoch_batches(len(mols), train_config.batch_size, rs["order"]):
            clean = np.stack([augment(int(i), mols[i]) for i in batch])
            noisy = clean + sigma * rs["noise"].standard_normal(clean.shape)
            try:
                _, value = net_train_step(net, (noisy, clean, None), LossSpec(1.0, 0.0), adam,
                                          rng=rs["dropout"], step_index=step)
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, step {step}",
                                      step=step, epoch=epoch) from exc
            losses.append(value)
            step += 1
        curve.append({"epoch": epoch, "loss": float(np.mean(losses)), "recon_loss": float(np.mean(losses))})
        log.debug("epoch %d loss %.6g", epoch, curve[-1]["loss"])
    return TrainResult(net, curve, {"net": net_config.to_dict(), "train": train_config.to_dict(),
                                    "grid": gridspec.to_dict()})


def train_property_head(dataset, labels, mode: str, gridspec: GridSpec, net_config: NetConfig,
                        train_config: TrainConfig, recon_weight: float = 1.0,
                        base: TinyNet | None = None) -> TrainResult:
    """Train a property-predicting network on noised inputs.

    ``mode="encoder_only"`` minimises the property MSE alone;
    ``mode="enc_dec_denoise"`` adds ``recon_weight`` times the voxel
    denoising MSE. When ``base`` is given its encoder/decoder weights seed
    the network and the head is freshly initialised.
    """
    if labels is None or len(labels) != len(dataset):
        raise LabelError("one property label per molecule is required")
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(labels)):
        raise LabelError("property labels must be finite")
    if mode == "encoder_only":
        loss = LossSpec(0.0, 1.0)
    elif mode == "enc_dec_denoise":
        loss = LossSpec(recon_weight, 1.0)
    else:
        raise SpecError(f"unknown property training mode {mode!r}")
    if net_config.head != "property":
        raise SpecError("property training needs head='property'")
    rs = seed_streams(train_config.seed)
    net = TinyNet(net_config, rng=rs["init"])
    if base is not None:
        for name, value in base.params.items():
            if name in net.params and net.params[name].shape == value.shape:
                net.params[name] = value.copy()
    adam = AdamState(train_config.learning_rate, train_config.beta1, train_config.beta2, train_config.adam_eps)
    augment = _Augmenter(gridspec, train_config, rs["augment"])
    mols = list(dataset)
    sigma = train_config.noise_sigma
    curve = []
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        losses = []
        for batch in _epoch_batches(len(mols), train_config.batch_size, rs["order"]):
            clean = np.stack([augment(int(i), mols[i]) for i in batch])
            noisy = clean + sigma * rs["noise"].standard_normal(clean.shape)
            try:
                _, value = net_train_step(net, (noisy, clean, labels[batch]), loss, adam,
                                          rng=rs["dropout"], step_index=step)
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, step {step}",
                                      step=step, epoch=epoch) from exc
            losses.append(value)
            step += 1
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return TrainResult(net, curve, {"net": net_config.to_dict(), "train": train_config.to_dict(),
                                    "grid": gridspec.to_dict(), "mode": mode,
                                    "recon_weight": recon_weight})


def predict_property(net: TinyNet, grids) -> np.ndarray:
    """Eval-mode property predictions for a stack of grids ``(N, c, l, l, l)``."""
    x = np.asarray(grids)
    out, _ = net.forward(x, mode="eval", decode=False, head=True)
    return out["property"]
