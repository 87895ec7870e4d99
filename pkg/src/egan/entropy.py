"""Generator-entropy approximations.

Two routes to the entropy term of the generator objective:

* a nearest-neighbour estimate of d log p_gen(x) / dx at each generated
  sample, normalised to unit length and injected into backprop;
* a variational upper bound on H(z | x), the only x-dependent part of
  H(x) = H(z) - H(z | x) + H(x | z) once H(x | z) is treated as constant.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tape, Tensor
from .errors import KTooLarge

DEGENERATE_NORM = 1e-12
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _check_k(n: int, k: int):
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise KTooLarge(f"k={k} needs a batch of at least {k + 1} points, got {n}")


def neighbor_indices(batch, k: int) -> np.ndarray:
    """(n, k) indices of each point's k nearest other points.

    Ties are broken by lower index (stable sort over the index order).
    """
    x = np.asarray(batch, dtype=np.float64)
    n = x.shape[0]
    _check_k(n, k)
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def knn_mean(batch, i: int, k: int) -> np.ndarray:
    """Mean of the k nearest neighbours of ``batch[i]``, itself excluded."""
    x = np.asarray(batch, dtype=np.float64)
    _check_k(x.shape[0], k)
    d2 = ((x - x[i]) ** 2).sum(axis=1)
    d2[i] = np.inf
    idx = np.argsort(d2, kind="stable")[:k]
    return x[idx].mean(axis=0)


@dataclass
class EntropyGradBatch:
    """Per-sample unit directions towards the local neighbour mean.

    ``alpha * directions[i]`` approximates the gradient of -H(p_gen) with
    respect to sample i (the neighbour-mean offset is the score of a local
    isotropic Gaussian).  Rows flagged in ``degenerate`` are zero.
    """

    directions: np.ndarray
    alpha: float
    k: int
    degenerate: np.ndarray

    @property
    def gradients(self) -> np.ndarray:
        return self.alpha * self.directions

    def __len__(self):
        return len(self.directions)

    def to_csv(self, points, path) -> None:
        pts = np.asarray(points, dtype=np.float64)
        g = self.gradients
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = [f"x{j}" for j in range(pts.shape[1])] + [f"dx{j}" for j in range(pts.shape[1])]
            if pts.shape[1] == 2:
                header = ["x", "y", "dx", "dy"]
            w.writerow(header)
            for p, d in zip(pts, g):
                w.writerow([repr(float(v)) for v in (*p, *d)])


def knn_entropy_gradients(batch, k: int = 5, alpha: float = 1.0) -> EntropyGradBatch:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(batch, dtype=np.float64)
    idx = neighbor_indices(x, k)
    mu = x[idx].mean(axis=1)
    offset = mu - x
    norm = np.sqrt((offset * offset).sum(axis=1))
    degenerate = norm < DEGENERATE_NORM
    directions = np.zeros_like(x)
    ok = ~degenerate
    directions[ok] = offset[ok] / norm[ok, None]
    return EntropyGradBatch(directions, float(alpha), int(k), degenerate)


class InferenceNet:
    """Amortised diagonal-Gaussian posterior q(z | x): the network output's
    first ``z_dim`` columns are the mean, the rest the log std."""

    def __init__(self, rng: np.random.Generator, x_dim: int = 2, z_dim: int = 4,
                 hidden: int = 128, layers: str | None = None, name: str = "infer"):
        if layers is None:
            layers = f"fc:{x_dim}:{hidden},relu,fc:{hidden}:{hidden},relu,fc:{hidden}:{2 * z_dim}"
        self.net = MLP(layers, rng, name=name)
        if self.net.out_features != 2 * z_dim:
            raise ValueError("inference net output width must be 2 * z_dim")
        self.z_dim = z_dim

    @property
    def params(self):
        return self.net.params

    def forward(self, x: Tensor, tape: Tape | None = None, train: bool = True) -> Tensor:
        return self.net.forward(x, tape, train=train)


def gaussian_nll(out: Tensor, z: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-row ``-log N(z; mu, diag(exp(log_std))^2)`` where ``out`` holds
    ``[mu | log_std]`` column blocks.  Returns a (batch,) tensor."""
    d = z.shape[1]
    if out.shape[1] != 2 * d:
        raise ValueError(f"posterior output width {out.shape[1]} != 2 * {d}")
    mu = ad.columns(out, 0, d, tape)
    log_std = ad.columns(out, d, 2 * d, tape)
    diff = ad.sub(z, mu, tape)
    inv_var = ad.exp(ad.scale(log_std, -2.0, tape), tape)
    quad = ad.scale(ad.mul(ad.square(diff, tape), inv_var, tape), 0.5, tape)
    per_dim = ad.add(log_std, quad, tape)
    const = Tensor(np.full(out.shape[0], d * HALF_LOG_2PI))
    return ad.add(ad.sum_rows(per_dim, tape), const, tape)


def vi_upper_bound(q, x_batch: Tensor, z_batch: Tensor, tape: Tape | None = None,
                   per_sample: bool = False) -> Tensor:
    """Monte-Carlo estimate of U(q) = E_{z, x=g(z)} [-log q(z | x)].

    ``(x_batch, z_batch)`` must be joint draws: z from the prior and x the
    generator output for it.  Gradients flow to q's parameters and, through
    ``x_batch``, to the generator.
    """
    nll = gaussian_nll(q.forward(x_batch, tape), as_tensor2d(z_batch), tape)
    return nll if per_sample else ad.mean(nll, tape)


def as_tensor2d(z) -> Tensor:
    z = ad.as_tensor(z)
    if z.data.ndim == 1:
        z = Tensor(z.data[:, None])
    return z


def entropy_identity_check(hx: float, hz: float, hz_given_x: float, hx_given_z: float) -> float:
    """Residual of H(x) = H(z) - H(z|x) + H(x|z)."""
    return abs(hx - (hz - hz_given_x + hx_given_z))


def gaussian_entropy(var: float) -> float:
    """Differential entropy of a 1D Gaussian with variance ``var``."""
    return 0.5 * math.log(2.0 * math.pi * math.e * var)


def linear_gaussian_entropies(noise_std: float) -> dict:
    """Closed-form entropies for z ~ N(0, 1), x = z + eps, eps ~ N(0, s^2)."""
    s2 = noise_std**2
    return {
        "hx": gaussian_entropy(1.0 + s2),
        "hz": gaussian_entropy(1.0),
        "hz_given_x": gaussian_entropy(s2 / (1.0 + s2)),
        "hx_given_z": gaussian_entropy(s2),
        "posterior_slope": 1.0 / (1.0 + s2),
        "posterior_std": math.sqrt(s2 / (1.0 + s2)),
    }
