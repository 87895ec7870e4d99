"""Analytic 2D Gaussian mixtures, their energies, and grid/sample file formats."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


class DatasetKind(Enum):
    MOG4 = "mog4"
    TWO_SPIRALS = "two-spirals"
    BIASED_MOG2 = "biased-mog2"

    @classmethod
    def parse(cls, name: str) -> "DatasetKind":
        key = name.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown dataset {name!r}; choose from {[k.value for k in cls]}")


# Geometry is not published; these values keep every component at least
# 6 std away from the edge of the default [-5, 5]^2 canvas.
DATASET_PARAMS = {
    "mog4": {"offset": 2.0, "std": 0.5},
    "biased-mog2": {"centers": [(-2.0, 0.0), (2.0, 0.0)], "weights": [0.9, 0.1], "std": 0.5},
    "two-spirals": {"per_spiral": 100, "r0": 0.5, "r_slope": 2.0, "turn": 3.0 * math.pi, "std": 0.1},
}


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray  # (k, 2)
    stds: np.ndarray  # isotropic, (k,)
    name: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        k = len(self.weights)
        if self.means.shape[0] != k or self.stds.shape != (k,):
            raise ValueError("weights, means and stds must have the same length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must form a probability vector")
        if np.any(self.stds <= 0):
            raise ValueError("stds must be positive")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def log_density(self, x) -> np.ndarray | float:
        """``log sum_i w_i N(x; mu_i, s_i^2 I)`` for a point or an (n, 2) array."""
        pts = np.asarray(x, dtype=np.float64)
        single = pts.ndim == 1
        pts = pts.reshape(-1, 2)
        d2 = ((pts[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=-1)
        var = self.stds**2
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        comp = logw - LOG_2PI - np.log(var) - 0.5 * d2 / var
        out = logsumexp(comp, axis=1)
        return float(out[0]) if single else out

    def sample(self, n: int, seed: int | np.random.Generator = 0, return_labels: bool = False):
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        pts = self.means[labels] + rng.standard_normal((n, 2)) * self.stds[labels, None]
        return (pts, labels) if return_labels else pts


def make_dataset(kind: DatasetKind | str) -> GaussianMixture:
    if isinstance(kind, str):
        kind = DatasetKind.parse(kind)
    p = DATASET_PARAMS[kind.value]
    if kind is DatasetKind.MOG4:
        o = p["offset"]
        means = [(o, o), (-o, o), (-o, -o), (o, -o)]
        return GaussianMixture(np.full(4, 0.25), means, np.full(4, p["std"]), kind.value)
    if kind is DatasetKind.BIASED_MOG2:
        return GaussianMixture(p["weights"], p["centers"], np.full(2, p["std"]), kind.value)
    m = p["per_spiral"]
    t = np.linspace(0.0, 1.0, m)
    r = p["r0"] + p["r_slope"] * t
    theta = p["turn"] * t
    arm = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    means = np.concatenate([arm, -arm])  # second arm rotated by pi
    return GaussianMixture(np.full(2 * m, 1.0 / (2 * m)), means, np.full(2 * m, p["std"]), kind.value)


def sample(m: GaussianMixture, n: int, seed=0) -> np.ndarray:
    return m.sample(n, seed)


def log_density(m: GaussianMixture, x):
    return m.log_density(x)


# -- grids --------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Rectangular canvas split into ``nx * ny`` cells; values live at centers."""

    x_min: float = -5.0
    x_max: float = 5.0
    y_min: float = -5.0
    y_max: float = 5.0
    nx: int = 100
    ny: int = 100

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("grid bounds must be ordered")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.ny

    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.nx) + 0.5) * self.dx

    def y_centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.ny) + 0.5) * self.dy

    def centers(self) -> np.ndarray:
        """(nx * ny, 2) cell centers, x-major (row i = x index)."""
        xx, yy = np.meshgrid(self.x_centers(), self.y_centers(), indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("x_min", "x_max", "y_min", "y_max", "nx", "ny")}


DEFAULT_GRID = GridSpec()


@dataclass
class Grid2D:
    spec: GridSpec
    values: np.ndarray = field(repr=False)  # (nx, ny)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.spec.nx, self.spec.ny)


def true_energy_grid(m: GaussianMixture, spec: GridSpec = DEFAULT_GRID) -> Grid2D:
    return Grid2D(spec, -m.log_density(spec.centers()))


def write_grid_csv(grid: Grid2D, path) -> None:
    """Header line carries the bounds; then one row per x index."""
    s = grid.spec
    with open(path, "w", newline="") as fh:
        fh.write(
            f"# x_min={s.x_min!r},x_max={s.x_max!r},y_min={s.y_min!r},y_max={s.y_max!r},"
            f"nx={s.nx},ny={s.ny}\n"
        )
        w = csv.writer(fh, lineterminator="\n")
        for row in grid.values:
            w.writerow([repr(float(v)) for v in row])


def read_grid_csv(path) -> Grid2D:
    with open(path) as fh:
        header = fh.readline().lstrip("#").strip()
        meta = dict(kv.split("=") for kv in header.split(","))
        spec = GridSpec(
            float(meta["x_min"]), float(meta["x_max"]), float(meta["y_min"]), float(meta["y_max"]),
            int(meta["nx"]), int(meta["ny"]),
        )
        rows = [[float(v) for v in row] for row in csv.reader(fh)]
    return Grid2D(spec, np.array(rows))


def grid_to_pgm_bytes(grid: Grid2D) -> bytes:
    """8-bit binary PGM (P5), min-max normalized.  Image rows run from
    y_max down to y_min so the picture has the usual orientation."""
    v = grid.values
    lo, hi = float(np.min(v)), float(np.max(v))
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8).T[::-1]
    header = f"P5\n{grid.spec.nx} {grid.spec.ny}\n255\n".encode("ascii")
    return header + img.tobytes()


def write_grid_pgm(grid: Grid2D, path) -> None:
    Path(path).write_bytes(grid_to_pgm_bytes(grid))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = raw.split(maxsplit=4)
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(fields[4], dtype=np.uint8, count=w * h).reshape(h, w)


def write_points_csv(points, path, columns=("x", "y")) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in points:
            w.writerow([repr(float(v)) for v in row])


def read_points_csv(path) -> np.ndarray:
    with open(path) as fh:
        r = csv.reader(fh)
        next(r)
        return np.array([[float(v) for v in row] for row in r])
