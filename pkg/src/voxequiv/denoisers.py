"""Denoisers sharing one interface, and the Tweedie score they induce.

Every denoiser exposes ``denoise(y, sigma)`` and ``embed(y)`` and accepts
either a :class:`~voxequiv.voxelizer.VoxelGrid` or a bare ``(c, l, l, l)``
array, returning the same kind of object it was given.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .errors import CapabilityError, SpecError
from .geom3 import rotate_array
from .voxelizer import VoxelGrid, voxelize

DEFAULT_REFERENCE_CAP = 256


def _unwrap(y):
    if isinstance(y, VoxelGrid):
        return y.data, y
    return np.asarray(y, dtype=np.float64), None


def _wrap(data, like):
    if like is None:
        return data
    return VoxelGrid(like.spec, data, noise_sigma=None)


class Denoiser:
    kind = "abstract"

    def denoise(self, y, sigma):
        data, like = _unwrap(y)
        return _wrap(self._denoise(data, sigma), like)

    def embed(self, y) -> np.ndarray:
        data, _ = _unwrap(y)
        return self._embed(data)

    def _denoise(self, y, sigma):
        raise NotImplementedError

    def _embed(self, y):
        raise CapabilityError(f"{self.kind} denoiser does not provide embeddings")


class IdentityDenoiser(Denoiser):
    """Returns its input; used to measure the interpolation floor of grid rotations."""

    kind = "identity"

    def _denoise(self, y, sigma):
        return y.copy()


class EmpiricalBayesDenoiser(Denoiser):
    """Posterior mean under the empirical distribution of a reference set.

    ``x_hat(y) = sum_i w_i x_i`` with ``w_i`` proportional to
    ``exp(-|y - x_i|^2 / (2 sigma^2))``, evaluated with the max log-weight
    subtracted. This is the exact least-squares denoiser for that
    distribution.

    Parameters
    ----------
    reference : array (n, c, l, l, l) or sequence of VoxelGrid
    sigma : float
        Noise level used by :meth:`embed`, which returns the weight vector.
    max_reference : int
        Refuse references larger than this (memory is ``n * D * 8`` bytes).
    """

    kind = "empirical_bayes"

    def __init__(self, reference, sigma: float = 0.9, max_reference: int = DEFAULT_REFERENCE_CAP):
        if isinstance(reference, np.ndarray):
            ref = np.asarray(reference, dtype=np.float64)
        else:
            ref = np.stack([_unwrap(g)[0] for g in reference])
        if ref.ndim != 5 or ref.shape[0] == 0:
            raise SpecError("reference must be a non-empty stack of (c, l, l, l) grids")
        if ref.shape[0] > max_reference:
            raise SpecError(f"reference holds {ref.shape[0]} grids; the cap is {max_reference} "
                            f"({ref.shape[0] * ref[0].size * 8 / 2**20:.1f} MiB requested)")
        self.grid_shape = ref.shape[1:]
        self.reference = ref.reshape(ref.shape[0], -1)
        self.sigma = float(sigma)

    @classmethod
    def from_dataset(cls, dataset, spec, **kwargs):
        return cls(np.stack([voxelize(m, spec).data for m in dataset]), **kwargs)

    @property
    def memory_bytes(self) -> int:
        return self.reference.nbytes

    def _sq_dists(self, y):
        diff = self.reference - y.reshape(1, -1)
        return np.einsum("ij,ij->i", diff, diff)

    def log_weights(self, y, sigma):
        if sigma <= 0:
            raise SpecError("sigma must be positive")
        logits = -self._sq_dists(np.asarray(y)) / (2.0 * sigma * sigma)
        return logits - logsumexp(logits)

    def weights(self, y, sigma):
        return np.exp(self.log_weights(y, sigma))

    def log_density(self, y, sigma) -> float:
        """``log p_sigma(y)`` of the Gaussian-smoothed empirical distribution."""
        data, _ = _unwrap(y)
        n, dim = self.reference.shape
        logits = -self._sq_dists(data) / (2.0 * sigma * sigma)
        return float(logsumexp(logits) - np.log(n) - 0.5 * dim * np.log(2.0 * np.pi * sigma * sigma))

    def _denoise(self, y, sigma):
        w = self.weights(y, sigma)
        return (w @ self.reference).reshape(self.grid_shape)

    def _embed(self, y):
        return self.weights(y, self.sigma)


class NeuralDenoiser(Denoiser):
    """Eval-mode TinyNet reconstruction; ``sigma`` is fixed by training and ignored."""

    kind = "neural"

    def __init__(self, net):
        self.net = net

    def _denoise(self, y, sigma):
        out, _ = self.net.forward(y[None], mode="eval", head=False)
        return out["reconstruction"][0]

    def _embed(self, y):
        out, _ = self.net.forward(y[None], mode="eval", decode=False, head=False)
        return out["latent"][0].ravel()

    def predict_property(self, y) -> float:
        data, _ = _unwrap(y)
        out, _ = self.net.forward(data[None], mode="eval", decode=False, head=True)
        if out["property"] is None:
            raise CapabilityError("network has no property head")
        return float(out["property"][0])


def check_group(group) -> None:
    """Require exact grid actions and closure under composition."""
    if not group:
        raise SpecError("group must be non-empty")
    for rot in group:
        if not rot.is_exact:
            raise SpecError("group averaging needs exact (permutation) grid actions")
    keys = {r.key() for r in group}
    for a in group:
        for b in group:
            if (a @ b).key() not in keys:
                raise SpecError("rotation set is not closed under composition")


class GroupAveragedDenoiser(Denoiser):
    """``D_eq(y) = mean_R R^-1 base(R y)``: exactly equivariant over ``group``.

    The embedding is ``mean_R base.embed(R y)``, invariant over the group.
    """

    kind = "group_averaged"

    def __init__(self, base: Denoiser, group):
        check_group(group)
        self.base = base
        self.group = list(group)
        self._inverses = [r.inverse() for r in self.group]

    def _denoise(self, y, sigma):
        terms = [rotate_array(self.base._denoise(rotate_array(y, rot), sigma), inv)
                 for rot, inv in zip(self.group, self._inverses)]
        return _orderless_mean(terms)

    def _embed(self, y):
        return _orderless_mean([self.base._embed(rotate_array(y, rot)) for rot in self.group])

    def predict_property(self, y) -> float:
        data, _ = _unwrap(y)
        return float(_orderless_mean([np.float64(self.base.predict_property(rotate_array(data, r)))
                                      for r in self.group]))


def _orderless_mean(terms):
    """Mean over the group axis with the terms sorted first.

    A rotated input permutes the terms; sorting makes the floating-point sum
    independent of that order, so invariance holds bit for bit.
    """
    return np.sort(np.stack(terms), axis=0).sum(axis=0) / len(terms)


def group_averaged_denoiser(base: Denoiser, group) -> GroupAveragedDenoiser:
    return GroupAveragedDenoiser(base, group)


def empirical_bayes_denoise(reference, y, sigma):
    """One-shot empirical-Bayes posterior mean (see :class:`EmpiricalBayesDenoiser`)."""
    return EmpiricalBayesDenoiser(reference, max_reference=np.inf).denoise(y, sigma)


def tweedie_score(d: Denoiser, y, sigma):
    """``(D(y) - y) / sigma^2``; the exact smoothed-density score for empirical Bayes."""
    if sigma <= 0:
        raise SpecError("sigma must be positive for the score")
    data, like = _unwrap(y)
    out = (d._denoise(data, sigma) - data) / (sigma * sigma)
    return _wrap(out, like) if like is None else like.replace_data(out)


class ScoreField:
    """Callable ``y -> (D(y) - y) / sigma^2`` on bare arrays."""

    def __init__(self, denoiser: Denoiser, sigma: float):
        if sigma <= 0:
            raise SpecError("sigma must be positive for the score")
        self.denoiser = denoiser
        self.sigma = float(sigma)

    def __call__(self, y):
        return (self.denoiser._denoise(y, self.sigma) - y) / (self.sigma * self.sigma)


def embed_latent(d: Denoiser, g) -> np.ndarray:
    return d.embed(g)
