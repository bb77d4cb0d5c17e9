"""A small 3D convolutional encoder/decoder with hand-written backpropagation.

Architecture (``S = len(widths) - 1`` stages)::

    encoder  k = 1..S : conv3 stride 2 (widths[k-1] -> widths[k]), shifted softplus
    latent            : encoder output, flattened
    decoder  k = S..1 : nearest upsample x2, conv3 stride 1 (widths[k] -> widths[k-1]),
                        shifted softplus except on the final (reconstruction) layer
    head (optional)   : global average pool, 3 x [linear, layer norm, shifted
                        softplus, dropout] with the last block reduced to a
                        linear layer followed by tanhshrink

Everything is float64. ``net.forward`` returns a cache that ``net.backward``
consumes; no general autodiff is involved.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DivergenceError, LabelError, ShapeError, SpecError
from .kernels import conv3d_backward, conv3d_forward

LN2 = math.log(2.0)
LN_EPS = 1e-5


# ----------------------------------------------------------------- configs


@dataclass
class NetConfig:
    widths: tuple = (8, 16, 32)
    kernel: int = 3
    head: str = "none"
    head_hidden: int = 32
    dropout: float = 0.1
    init: str = "he"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise SpecError("widths needs the input channel count plus at least one stage")
        if self.kernel != 3:
            raise SpecError("only 3x3x3 kernels are implemented")
        if self.head not in ("none", "property"):
            raise SpecError(f"unknown head {self.head!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError("dropout must lie in [0, 1)")
        if self.init not in ("he", "zeros"):
            raise SpecError(f"unknown init {self.init!r}")

    @property
    def stages(self) -> int:
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment_rotations: bool = True
    rotation_kind: str = "haar"
    augment_translations: bool = False
    max_shift_voxels: int = 1
    noise_sigma: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise SpecError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise SpecError("learning_rate must be positive")
        if self.batch_size < 1:
            raise SpecError("batch_size must be >= 1")
        if self.rotation_kind not in ("haar", "octahedral"):
            raise SpecError(f"unknown rotation_kind {self.rotation_kind!r}")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class LossSpec:
    """Weighted sum ``recon_weight * mse_recon + property_weight * mse_property``."""

    recon_weight: float = 1.0
    property_weight: float = 0.0

    @classmethod
    def parse(cls, name: str, lam: float = 1.0) -> "LossSpec":
        name = name.replace(" ", "")
        if name == "mse_recon":
            return cls(1.0, 0.0)
        if name == "mse_property":
            return cls(0.0, 1.0)
        if name in ("mse_recon+property", "mse_recon+lambda*mse_property"):
            return cls(1.0, lam)
        raise SpecError(f"unknown loss spec {name!r}")

    @property
    def uses_recon(self) -> bool:
        return self.recon_weight != 0.0

    @property
    def uses_property(self) -> bool:
        return self.property_weight != 0.0


# ------------------------------------------------------------- primitives


def ssp(x):
    return np.logaddexp(0.0, x) - LN2


def upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)


def upsample2_backward(g):
    n, c, s = g.shape[0], g.shape[1], g.shape[2] // 2
    return g.reshape(n, c, s, 2, s, 2, s, 2).sum(axis=(3, 5, 7))


def layer_norm(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(gy, gain, cache):
    xhat, inv = cache
    h = xhat.shape[1]
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    gx_hat = gy * gain
    gx = (inv / h) * (h * gx_hat - gx_hat.sum(axis=1, keepdims=True)
                      - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True))
    return gx, ggain, gbias


def param_count_formula(config: NetConfig) -> int:
    """Closed-form parameter count for ``config``."""
    w = config.widths
    k3 = config.kernel ** 3
    conv = sum(k3 * w[k - 1] * w[k] for k in range(1, len(w)))
    total = 2 * conv + sum(w[1:]) + sum(w[:-1])
    if config.head == "property":
        h = config.head_hidden
        total += (w[-1] * h + h) + 2 * h + (h * h + h) + 2 * h + (h + 1)
    return total


# --------------------------------------------------------------------- net


class TinyNet:
    """Parameters plus forward/backward passes.

    Parameters live in ``self.params`` (name -> float64 array) and are updated
    in place only by :func:`net_train_step`.
    """

    def __init__(self, config: NetConfig, params: dict | None = None, rng=None):
        self.config = config
        if params is None:
            params = _init_params(config, rng if rng is not None else np.random.default_rng(0))
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        expected = _param_shapes(config)
        if set(expected) != set(self.params):
            raise ShapeError("parameter names do not match the config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @property
    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "TinyNet":
        return TinyNet(self.config, {k: v.copy() for k, v in self.params.items()})

    def check_input(self, x):
        w0 = self.config.widths[0]
        if x.ndim != 5 or x.shape[1] != w0 or not (x.shape[2] == x.shape[3] == x.shape[4]):
            raise ShapeError(f"expected input (N, {w0}, l, l, l), got {x.shape}")
        if x.shape[2] % (2 ** self.config.stages):
            raise ShapeError(f"grid edge {x.shape[2]} must be divisible by {2 ** self.config.stages}")

    # forward ------------------------------------------------------------

    def forward(self, x, mode="eval", rng=None, masks=None, decode=True, head=True):
        """Run the network on a batch ``x`` of shape ``(N, c, l, l, l)``.

        In ``train`` mode dropout masks are drawn from ``rng`` unless ``masks``
        (a dict from :meth:`forward`'s cache) is given, which freezes them.
        Returns ``(outputs, cache)``; outputs holds ``latent``,
        ``reconstruction`` and ``property`` (None when not computed).
        """
        self.check_input(x)
        p, cfg = self.params, self.config
        cache = {"x": x, "enc_in": [], "enc_pre": [], "dec_in": [], "dec_pre": []}
        h = x
        for k in range(1, cfg.stages + 1):
            cache["enc_in"].append(h)
            z = conv3d_forward(h, p[f"enc{k}.w"], p[f"enc{k}.b"], 2)
            cache["enc_pre"].append(z)
            h = ssp(z)
        latent = h
        out = {"latent": latent, "reconstruction": None, "property": None}

        if decode:
            u = latent
            for k in range(cfg.stages, 0, -1):
                up = upsample2(u)
                cache["dec_in"].append(up)
                z = conv3d_forward(up, p[f"dec{k}.w"], p[f"dec{k}.b"], 1)
                cache["dec_pre"].append(z)
                u = ssp(z) if k > 1 else z
            out["reconstruction"] = u

        if head and cfg.head == "property":
            out["property"], cache["head"] = self._head_forward(latent, mode, rng, masks)
        cache["decoded"] = decode
        return out, cache

    def _head_forward(self, latent, mode, rng, masks):
        p, cfg = self.params, self.config
        hc = {}
        pooled = latent.mean(axis=(2, 3, 4))
        hc["pooled"] = pooled
        a = pooled
        for i in (1, 2):
            z = a @ p[f"head.l{i}.w"].T + p[f"head.l{i}.b"]
            n, ln_cache = layer_norm(z, p[f"head.ln{i}.g"], p[f"head.ln{i}.b"])
            s = ssp(n)
            if mode == "train" and cfg.dropout > 0:
                if masks is not None and f"mask{i}" in masks:
                    mask = masks[f"mask{i}"]
                else:
                    if rng is None:
                        raise SpecError("train-mode dropout needs an explicit rng")
                    mask = (rng.random(s.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            else:
                mask = None
            hc[f"in{i}"], hc[f"ln{i}"], hc[f"n{i}"], hc[f"mask{i}"] = a, ln_cache, n, mask
            a = s * mask if mask is not None else s
        z3 = a @ p["head.l3.w"].T + p["head.l3.b"]
        hc["in3"], hc["z3"] = a, z3
        return (z3 - np.tanh(z3))[:, 0], hc

    # backward -----------------------------------------------------------

    def backward(self, cache, grad_recon=None, grad_property=None) -> dict:
        """Gradients of a scalar loss given its gradients w.r.t. the outputs."""
        p, cfg = self.params, self.config
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        g_latent = np.zeros_like(cache["enc_pre"][-1])

        if grad_recon is not None:
            if not cache["decoded"]:
                raise SpecError("reconstruction gradient given but the decoder was not run")
            g = grad_recon
            # decoder caches are stored in forward order k = S..1
            for k in range(1, cfg.stages + 1):
                idx = cfg.stages - k
                if k > 1:
                    g = g * expit(cache["dec_pre"][idx])
                gx, gw, gb = conv3d_backward(cache["dec_in"][idx], p[f"dec{k}.w"], g, 1)
                grads[f"dec{k}.w"] += gw
                grads[f"dec{k}.b"] += gb
                g = upsample2_backward(gx)
            g_latent = g_latent + g
        if grad_property is not None:
            if "head" not in cache:
                raise SpecError("property gradient given but the head was not run")
            g_latent = g_latent + self._head_backward(cache["head"], grad_property, grads, cache["enc_pre"][-1].shape)

        g = g_latent
        for k in range(cfg.stages, 0, -1):
            g = g * expit(cache["enc_pre"][k - 1])
            gx, gw, gb = conv3d_backward(cache["enc_in"][k - 1], p[f"enc{k}.w"], g, 2)
            grads[f"enc{k}.w"] += gw
            grads[f"enc{k}.b"] += gb
            g = gx
        return grads

    def _head_backward(self, hc, grad_property, grads, latent_shape):
        p = self.params
        z3 = hc["z3"]
        g = grad_property[:, None] * np.tanh(z3) ** 2
        grads["head.l3.w"] += g.T @ hc["in3"]
        grads["head.l3.b"] += g.sum(axis=0)
        g = g @ p["head.l3.w"]
        for i in (2, 1):
            if hc[f"mask{i}"] is not None:
                g = g * hc[f"mask{i}"]
            g = g * expit(hc[f"n{i}"])
            g, gg, gb = layer_norm_backward(g, p[f"head.ln{i}.g"], hc[f"ln{i}"])
            grads[f"head.ln{i}.g"] += gg
            grads[f"head.ln{i}.b"] += gb
            grads[f"head.l{i}.w"] += g.T @ hc[f"in{i}"]
            grads[f"head.l{i}.b"] += g.sum(axis=0)
            g = g @ p[f"head.l{i}.w"]
        n, c = g.shape
        vol = int(np.prod(latent_shape[2:]))
        return np.broadcast_to((g / vol)[:, :, None, None, None], latent_shape).copy()


def _param_shapes(config: NetConfig) -> dict:
    w = config.widths
    shapes = {}
    for k in range(1, len(w)):
        shapes[f"enc{k}.w"] = (w[k], w[k - 1], 3, 3, 3)
        shapes[f"enc{k}.b"] = (w[k],)
    for k in range(len(w) - 1, 0, -1):
        shapes[f"dec{k}.w"] = (w[k - 1], w[k], 3, 3, 3)
        shapes[f"dec{k}.b"] = (w[k - 1],)
    if config.head == "property":
        h = config.head_hidden
        shapes.update({
            "head.l1.w": (h, w[-1]), "head.l1.b": (h,),
            "head.ln1.g": (h,), "head.ln1.b": (h,),
            "head.l2.w": (h, h), "head.l2.b": (h,),
            "head.ln2.g": (h,), "head.ln2.b": (h,),
            "head.l3.w": (1, h), "head.l3.b": (1,),
        })
    return shapes


def _init_params(config: NetConfig, rng) -> dict:
    params = {}
    for name, shape in _param_shapes(config).items():
        if config.init == "zeros":
            params[name] = np.zeros(shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.standard_normal(shape) * math.sqrt(1.0 / fan_in)
        else:
            params[name] = np.zeros(shape)
    return params


def init_net(config: NetConfig, seed: int = 0) -> TinyNet:
    return TinyNet(config, rng=np.random.default_rng(seed))


# --------------------------------------------------------------- grid API


def _as_batch(grids):
    if isinstance(grids, np.ndarray):
        return grids[None] if grids.ndim == 4 else grids
    if hasattr(grids, "data"):
        return grids.data[None]
    return np.stack([g.data if hasattr(g, "data") else g for g in grids])


def net_forward(net: TinyNet, g, mode="eval", rng=None) -> dict:
    """Forward one grid. Returns ``latent`` (flat), ``reconstruction`` and ``property``."""
    from .voxelizer import VoxelGrid

    x = _as_batch(g)
    if x.shape[0] != 1:
        raise ShapeError("net_forward takes a single grid; use TinyNet.forward for batches")
    out, _ = net.forward(x, mode=mode, rng=rng)
    recon = out["reconstruction"][0]
    if isinstance(g, VoxelGrid):
        recon = VoxelGrid(g.spec, recon, noise_sigma=None)
    prop = None if out["property"] is None else float(out["property"][0])
    return {"latent": out["latent"][0].ravel(), "reconstruction": recon, "property": prop}


# ------------------------------------------------------------- loss & Adam


def _loss_and_output_grads(out, targets, prop_targets, loss):
    total = 0.0
    g_recon = g_prop = None
    if loss.uses_recon:
        diff = out["reconstruction"] - targets
        total += loss.recon_weight * float(np.mean(diff * diff))
        g_recon = loss.recon_weight * 2.0 * diff / diff.size
    if loss.uses_property:
        if prop_targets is None:
            raise LabelError("property loss requested without property targets")
        diff = out["property"] - prop_targets
        total += loss.property_weight * float(np.mean(diff * diff))
        g_prop = loss.property_weight * 2.0 * diff / diff.size
    return total, g_recon, g_prop


def loss_and_grads(net, inputs, targets=None, prop_targets=None, loss=LossSpec(),
                   mode="eval", rng=None, masks=None):
    """Loss value, parameter gradients and the forward cache for one batch."""
    out, cache = net.forward(inputs, mode=mode, rng=rng, masks=masks,
                             decode=loss.uses_recon, head=loss.uses_property)
    value, g_recon, g_prop = _loss_and_output_grads(out, targets, prop_targets, loss)
    grads = net.backward(cache, g_recon, g_prop)
    return value, grads, cache


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def net_train_step(net, batch, loss=LossSpec(), lr_state: AdamState | None = None, rng=None,
                   step_index=None):
    """One Adam step on a batch of ``(input, target, property_target)`` tuples.

    ``batch`` may also be a tuple of stacked arrays ``(inputs, targets,
    prop_targets)``. Returns ``(net, loss_value)`` with the loss measured
    before the update; ``net`` is updated in place.
    """
    if lr_state is None:
        lr_state = AdamState()
    if isinstance(batch, tuple) and len(batch) == 3 and isinstance(batch[0], np.ndarray) and batch[0].ndim == 5:
        inputs, targets, props = batch
    else:
        if len(batch) == 0:
            raise SpecError("empty batch")
        inputs = _as_batch([b[0] for b in batch])
        targets = _as_batch([b[1] for b in batch]) if batch[0][1] is not None else None
        props = np.array([b[2] for b in batch], dtype=np.float64) if len(batch[0]) > 2 and batch[0][2] is not None else None
    if loss.uses_recon and targets is None:
        raise LabelError("reconstruction loss requested without target grids")
    value, grads, _ = loss_and_grads(net, inputs, targets, props, loss, mode="train", rng=rng)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {step_index}", step=step_index)
    lr_state.update(net.params, grads)
    return net, value


# ------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict


def grad_check(net, inputs, targets=None, prop_targets=None, loss=LossSpec(), probe_count=64,
               h=1e-4, mode="eval", seed=0) -> GradCheckReport:
    """Compare analytic gradients with five-point central differences on probed entries.

    In ``train`` mode the dropout masks of the first pass are frozen and
    reused for every perturbed evaluation.
    """
    rng = np.random.default_rng(seed)
    masks = None
    if mode == "train":
        _, cache = net.forward(inputs, mode="train", rng=rng, decode=False, head=True)
        masks = {k: v for k, v in cache.get("head", {}).items() if k.startswith("mask")}
    _, grads, _ = loss_and_grads(net, inputs, targets, prop_targets, loss, mode=mode, masks=masks)

    def f():
        out, _ = net.forward(inputs, mode=mode, masks=masks,
                             decode=loss.uses_recon, head=loss.uses_property)
        return _loss_and_output_grads(out, targets, prop_targets, loss)[0]

    worst, per = 0.0, {}
    for name, param in net.params.items():
        flat = param.reshape(-1)
        n = min(probe_count, flat.size)
        idx = rng.choice(flat.size, size=n, replace=False)
        err = 0.0
        for i in idx:
            old = flat[i]
            vals = []
            for step in (2.0 * h, h, -h, -2.0 * h):
                flat[i] = old + step
                vals.append(f())
            flat[i] = old
            # fourth-order central stencil keeps truncation error below rounding
            num = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * h)
            ana = grads[name].reshape(-1)[i]
            # the floor stops exact-zero gradients (dropped units) from dividing rounding noise
            err = max(err, abs(ana - num) / max(1e-6, abs(ana) + abs(num)))
        per[name] = err
        worst = max(worst, err)
    return GradCheckReport(worst, per)


# ------------------------------------------------------------- persistence


_CKPT_MAGIC = b"VXNET001"


def save_checkpoint(net: TinyNet, path, extra: dict | None = None) -> Path:
    """Named-tensor container (name, shape, little-endian doubles) plus JSON config."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(net.params)))
        for name in sorted(net.params):
            arr = net.params[name]
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = {"format": "voxequiv-net-1", "config": net.config.to_dict(), "param_count": net.param_count}
    if extra:
        meta.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> TinyNet:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    cfg = meta["config"]
    config = NetConfig(**{k: cfg[k] for k in ("widths", "kernel", "head", "head_hidden", "dropout", "init")})
    raw = path.read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ShapeError("not a voxequiv checkpoint")
    off = 8
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}q", raw, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return TinyNet(config, params)


def write_curve_csv(curve, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "recon_loss", "property_loss"])
        for row in curve:
            writer.writerow([row["epoch"], repr(row["loss"]), repr(row.get("recon_loss", float("nan"))),
                             repr(row.get("property_loss", float("nan")))])
    return path
