"""Histogram / KL evaluation protocol and gradient-field diagnostics.

Four distributions live on one grid: ``p_data`` (analytic density at cell
centers), ``p_emp`` (histogram of training samples), ``p_gen`` (histogram of
generator samples) and ``p_disc`` (``exp(-energy)`` renormalized over the
cells).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .data import DEFAULT_GRID, GaussianMixture, Grid2D, GridSpec
from .entropy import knn_entropy_gradients, vi_upper_bound
from .errors import EmptySampleSet, GridMismatch

KL_EPSILON = 1e-10
DIST_NAMES = ("p_data", "p_emp", "p_gen", "p_disc")


@dataclass
class HistogramGrid:
    spec: GridSpec
    mass: np.ndarray = field(repr=False)  # (nx * ny,), x-major like GridSpec.centers
    out_of_bounds: int = 0

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=np.float64).ravel()
        if self.mass.shape != (self.spec.n_cells,):
            raise GridMismatch(f"mass has {self.mass.size} cells, spec has {self.spec.n_cells}")
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1.0) > 1e-9:
            raise ValueError("cell masses must be nonnegative and sum to 1")

    def as_grid(self) -> Grid2D:
        return Grid2D(self.spec, self.mass.reshape(self.spec.nx, self.spec.ny))


def _cell_index(coord: np.ndarray, lo: float, width: float, n: int):
    raw = np.floor((coord - lo) / width).astype(np.int64)
    clipped = np.clip(raw, 0, n - 1)
    return clipped, raw != clipped


def histogram_estimate(samples, spec: GridSpec = DEFAULT_GRID) -> HistogramGrid:
    """Assign each point to its nearest cell center and normalise the counts.

    On a regular grid the nearest center is the cell containing the point;
    points off the canvas are clamped to the boundary cells and counted in
    ``out_of_bounds``.
    """
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise EmptySampleSet("histogram needs at least one sample")
    ix, ox = _cell_index(pts[:, 0], spec.x_min, spec.dx, spec.nx)
    iy, oy = _cell_index(pts[:, 1], spec.y_min, spec.dy, spec.ny)
    counts = np.bincount(ix * spec.ny + iy, minlength=spec.n_cells).astype(np.float64)
    return HistogramGrid(spec, counts / pts.shape[0], int(np.sum(ox | oy)))


def discretize_density(m: GaussianMixture, spec: GridSpec = DEFAULT_GRID) -> HistogramGrid:
    """Cell mass proportional to the analytic density at the cell center."""
    logp = m.log_density(spec.centers())
    return HistogramGrid(spec, np.exp(logp - logsumexp(logp)))


def disc_distribution(energy: Grid2D) -> HistogramGrid:
    """``softmax(-energy)`` over the cells (temperature 1).

    ``+inf`` energies get zero mass, so ``-log`` of a distribution with empty
    cells round-trips; NaN, ``-inf`` or all-infinite grids are rejected.
    """
    e = np.asarray(energy.values, dtype=np.float64).ravel()
    if np.any(np.isnan(e) | (e == -np.inf)) or not np.any(np.isfinite(e)):
        raise ValueError("energies must be finite or +inf, with at least one finite")
    logits = -e
    return HistogramGrid(energy.spec, np.exp(logits - logsumexp(logits)))


def kl_divergence(p: HistogramGrid, q: HistogramGrid, epsilon: float = KL_EPSILON) -> float:
    """KL(p~ || q~) in nats with ``x~ = (x + eps) / (1 + n eps)``."""
    if p.spec != q.spec:
        raise GridMismatch("histograms live on different grids")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = p.mass.size
    ps = (p.mass + epsilon) / (1.0 + n * epsilon)
    qs = (q.mass + epsilon) / (1.0 + n * epsilon)
    return max(float(np.sum(ps * (np.log(ps) - np.log(qs)))), 0.0)


@dataclass
class KlTable:
    """Ordered pairwise KLs; key ``"a||b"`` holds KL(a || b)."""

    entries: dict

    def __getitem__(self, key):
        return self.entries[key]

    @staticmethod
    def key(a: str, b: str) -> str:
        return f"{a}||{b}"

    def kl(self, a: str, b: str) -> float:
        return self.entries[self.key(a, b)]

    def to_dict(self) -> dict:
        return dict(self.entries)

    def to_json(self) -> str:
        return json.dumps(self.entries, indent=2)

    def to_text(self) -> str:
        width = max(len(k) for k in self.entries)
        return "\n".join(f"{k.ljust(width)}  {v:12.6f}" for k, v in self.entries.items()) + "\n"


# Reference pair first, then the ten other ordered pairs in the appendix's
# column order (each pair of non-data distributions in both directions).
REFERENCE_PAIRS = (("p_data", "p_emp"), ("p_emp", "p_data"))
TABLE_PAIRS = (
    ("p_gen", "p_emp"), ("p_emp", "p_gen"),
    ("p_gen", "p_data"), ("p_data", "p_gen"),
    ("p_disc", "p_emp"), ("p_emp", "p_disc"),
    ("p_disc", "p_data"), ("p_data", "p_disc"),
    ("p_gen", "p_disc"), ("p_disc", "p_gen"),
)


def kl_table(p_data: HistogramGrid, p_emp: HistogramGrid, p_gen: HistogramGrid,
             p_disc: HistogramGrid, epsilon: float = KL_EPSILON) -> KlTable:
    grids = dict(zip(DIST_NAMES, (p_data, p_emp, p_gen, p_disc)))
    for a, b in itertools.combinations(grids.values(), 2):
        if a.spec != b.spec:
            raise GridMismatch("all four histograms must share a grid")
    entries = {}
    for a, b in REFERENCE_PAIRS + TABLE_PAIRS:
        entries[KlTable.key(a, b)] = kl_divergence(grids[a], grids[b], epsilon)
    return KlTable(entries)


def energy_grid(discriminator, spec: GridSpec = DEFAULT_GRID, negate: bool = False) -> Grid2D:
    """Eval-mode network output at every cell center.

    ``discriminator`` is an MLP with a single output or a ModelBundle (whose
    ``energy_values`` already handles the GAN sign convention).
    """
    pts = spec.centers()
    if hasattr(discriminator, "energy_values"):
        vals = discriminator.energy_values(pts)
    else:
        vals = discriminator.predict(pts)[:, 0]
    return Grid2D(spec, -vals if negate else vals)


def gradient_field_report(bundle, samples, z=None, k: int = 5, alpha: float = 1.0) -> list[dict]:
    """Per-sample discriminator gradient d c / d x, entropy gradient and their
    sum, the three forces acting on a generated point.

    The entropy column is the injected ``alpha * d_i`` for the NN model, the
    input gradient of U(q) for the VI model (``z`` must then be the noise
    that produced ``samples``) and zero otherwise.
    """
    from .trainer import ModelKind

    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    tape = Tape()
    x = Tensor(pts, requires_grad=True)
    c = bundle.energy(x, tape)
    (dc,) = backward(tape, ad.total(c, tape), wrt=(x,))
    bundle.discriminator.params.zero_grad()

    ent = np.zeros_like(pts)
    if bundle.kind is ModelKind.EGAN_ENT_NN:
        ent = knn_entropy_gradients(pts, k=k, alpha=alpha).gradients
    elif bundle.kind is ModelKind.EGAN_ENT_VI:
        if z is None:
            raise ValueError("the VI entropy gradient needs the generating noise z")
        tape = Tape()
        x = Tensor(pts, requires_grad=True)
        u = vi_upper_bound(bundle.inference, x, Tensor(z), tape, per_sample=True)
        (ent,) = backward(tape, ad.total(u, tape), wrt=(x,))
        bundle.inference.params.zero_grad()
    total = dc + ent
    return [
        {"x": p[0], "y": p[1], "disc_dx": g[0], "disc_dy": g[1],
         "ent_dx": e[0], "ent_dy": e[1], "sum_dx": s[0], "sum_dy": s[1]}
        for p, g, e, s in zip(pts.tolist(), dc.tolist(), ent.tolist(), total.tolist())
    ]


GRADFIELD_COLUMNS = ("x", "y", "disc_dx", "disc_dy", "ent_dx", "ent_dy", "sum_dx", "sum_dy")


def mean_cosine(records: list[dict], a: str = "disc", b: str = "ent") -> float:
    """Mean cosine similarity between two gradient columns, skipping rows
    where either vector is zero."""
    u = np.array([[r[f"{a}_dx"], r[f"{a}_dy"]] for r in records])
    v = np.array([[r[f"{b}_dx"], r[f"{b}_dy"]] for r in records])
    nu, nv = np.linalg.norm(u, axis=1), np.linalg.norm(v, axis=1)
    ok = (nu > 0) & (nv > 0)
    if not np.any(ok):
        return math.nan
    return float(np.mean(np.sum(u[ok] * v[ok], axis=1) / (nu[ok] * nv[ok])))


def mode_mass(samples, centers, radius: float = 1.0) -> np.ndarray:
    """Fraction of samples within ``radius`` of each center."""
    pts = np.asarray(samples, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    d = np.linalg.norm(pts[:, None, :] - c[None, :, :], axis=-1)
    return (d <= radius).mean(axis=0)


def evaluate_bundle(bundle, mixture: GaussianMixture, cfg, data_samples, rng) -> dict:
    """Full protocol: four grids on ``cfg.grid`` and the KL table."""
    spec = cfg.grid
    gen = bundle.generate(cfg.n_eval, rng)
    data = np.asarray(data_samples)[: cfg.n_eval]
    egrid = energy_grid(bundle, spec)
    p_emp = histogram_estimate(data, spec)
    p_gen = histogram_estimate(gen, spec)
    table = kl_table(discretize_density(mixture, spec), p_emp, p_gen,
                     disc_distribution(egrid), cfg.kl_epsilon)
    return {
        "energy_grid": egrid,
        "samples": gen,
        "kl_table": table,
        "out_of_bounds": {"p_emp": p_emp.out_of_bounds, "p_gen": p_gen.out_of_bounds},
    }
