"""Exact finite-space version of the calibrated energy minimax game.

The game is

    max_c min_{p in simplex}  sum_x p(x) c(x) - sum_x p_data(x) c(x) + K(p)

with K convex.  Everything here works on explicit probability vectors so the
closed-form optima (generator equals data, discriminator equals minus the
regularizer gradient up to a global bias and a support multiplier) can be
checked numerically.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DivisionByZeroSupport,
    InvalidDuals,
    ZeroProbabilityEntropy,
)

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12


def as_simplex(p, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate ``p`` as a probability vector and return it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DimensionMismatch(f"expected a non-empty vector, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > tol:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def as_costs(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1:
        raise DimensionMismatch(f"expected a cost vector, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("costs must be finite")
    return c


def _check_same_length(*vectors):
    sizes = {v.shape[0] for v in vectors}
    if len(sizes) != 1:
        raise DimensionMismatch(f"length mismatch: {sorted(sizes)}")


class RegularizerKind(Enum):
    NEG_ENTROPY = "neg-entropy"
    HALF_L2 = "half-l2"
    CONSTANT = "constant"


@dataclass(frozen=True)
class Regularizer:
    """The calibrating term K.  ``value`` only matters for ``CONSTANT``."""

    kind: RegularizerKind
    value: float = 0.0

    @classmethod
    def neg_entropy(cls):
        return cls(RegularizerKind.NEG_ENTROPY)

    @classmethod
    def half_l2(cls):
        return cls(RegularizerKind.HALF_L2)

    @classmethod
    def constant(cls, value: float = 0.0):
        return cls(RegularizerKind.CONSTANT, float(value))

    @classmethod
    def parse(cls, name: str):
        """Build from a CLI-style name: ``neg-entropy``, ``half-l2``/``l2``,
        ``constant`` or ``constant:<value>``."""
        name = name.strip().lower()
        if name in ("neg-entropy", "entropy", "ent"):
            return cls.neg_entropy()
        if name in ("half-l2", "l2"):
            return cls.half_l2()
        if name.startswith("constant") or name == "const":
            _, _, v = name.partition(":")
            return cls.constant(float(v) if v else 0.0)
        raise ValueError(f"unknown regularizer {name!r}")

    @property
    def name(self) -> str:
        if self.kind is RegularizerKind.CONSTANT:
            return f"constant:{self.value:g}"
        return self.kind.value


def regularizer_value(kind: Regularizer, p) -> float:
    p = as_simplex(p)
    if kind.kind is RegularizerKind.NEG_ENTROPY:
        nz = p > 0
        return float(np.sum(p[nz] * np.log(p[nz])))
    if kind.kind is RegularizerKind.HALF_L2:
        return float(0.5 * np.dot(p, p))
    return kind.value


def regularizer_grad(kind: Regularizer, p, sentinel: bool = False) -> np.ndarray:
    """Partial derivatives of K with respect to each p(x).

    The negative-entropy gradient ``log p + 1`` does not exist at p(x) = 0.
    With ``sentinel=True`` those entries are returned as ``+inf`` (find them
    with ``np.isposinf``); otherwise ZeroProbabilityEntropy is raised.
    """
    p = as_simplex(p)
    if kind.kind is RegularizerKind.NEG_ENTROPY:
        zero = p == 0
        if np.any(zero) and not sentinel:
            raise ZeroProbabilityEntropy(
                f"entropy gradient undefined at indices {np.flatnonzero(zero).tolist()}"
            )
        with np.errstate(divide="ignore"):
            g = np.log(p) + 1.0
        g[zero] = np.inf
        return g
    if kind.kind is RegularizerKind.HALF_L2:
        return p.copy()
    return np.zeros_like(p)


def lagrangian(p_gen, c, p_data, kind: Regularizer) -> float:
    p_gen, p_data, c = as_simplex(p_gen), as_simplex(p_data), as_costs(c)
    _check_same_length(p_gen, p_data, c)
    return float(np.dot(p_gen, c) - np.dot(p_data, c) + regularizer_value(kind, p_gen))


@dataclass
class DualVars:
    lam: float
    mu: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)


def optimal_discriminator(kind: Regularizer, p_data, dual: DualVars) -> np.ndarray:
    """Closed-form optimal cost ``-dK/dp|_{p_data} - lambda + mu``.

    Off the data support the regularizer gradient is taken as 0 for the
    entropy case (the cost there is set entirely by ``mu``).
    """
    p_data = as_simplex(p_data)
    mu = dual.mu
    _check_same_length(p_data, mu)
    support = p_data > 0
    if np.any(mu < 0):
        raise InvalidDuals("support multipliers must be non-negative")
    if np.any(mu[support] != 0):
        raise InvalidDuals("mu must vanish wherever p_data > 0")
    grad = np.zeros_like(p_data)
    if kind.kind is RegularizerKind.NEG_ENTROPY:
        grad[support] = np.log(p_data[support]) + 1.0
    elif kind.kind is RegularizerKind.HALF_L2:
        grad = p_data.copy()
    return -grad - dual.lam + mu


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def default_rates(kind: Regularizer) -> tuple[float, float]:
    """Step sizes (primal, dual) that converge within 20000 steps on
    full-support problems with n <= 16."""
    if kind.kind is RegularizerKind.NEG_ENTROPY:
        return 0.8, 3.0
    if kind.kind is RegularizerKind.HALF_L2:
        return 3.0, 1.0
    return 1.0, 1.0


@dataclass
class SolveResult:
    p_gen: np.ndarray
    c: np.ndarray
    steps: int
    converged: bool
    residual: float  # max |p_gen - p_data| at exit

    def __iter__(self):
        # allows ``p, c = solve_minimax(...)``
        return iter((self.p_gen, self.c))


def solve_minimax(
    kind: Regularizer,
    p_data,
    steps: int = 20000,
    primal_lr: float | None = None,
    dual_lr: float | None = None,
    seed: int = 0,
    scheme: str = "extragradient",
    tol: float = 1e-13,
    debug: bool = False,
) -> SolveResult:
    """Numerically solve the tabular game.

    The generator is ``softmax(logits)``; a step of size ``eta`` on the logits
    along the cost-plus-regularizer gradient is entropic mirror descent on the
    simplex.  The discriminator ascends along ``p_gen - p_data``.

    ``scheme="extragradient"`` (mirror-prox) takes a look-ahead half step and
    updates both players from the look-ahead gradients; it converges for the
    bilinear constant-K game where plain simultaneous updates spiral out.
    ``scheme="simultaneous"`` is the plain variant.  Iteration stops early
    once both updates fall below ``tol``.  Non-convergence is reported in the
    result, never raised.
    """
    p_data = as_simplex(p_data)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    d_plr, d_dlr = default_rates(kind)
    primal_lr = d_plr if primal_lr is None else primal_lr
    dual_lr = d_dlr if dual_lr is None else dual_lr
    if primal_lr <= 0 or dual_lr <= 0:
        raise ValueError("learning rates must be positive")
    if scheme not in ("extragradient", "simultaneous"):
        raise ValueError(f"unknown scheme {scheme!r}")

    rng = np.random.default_rng(seed)
    n = p_data.size
    logits = rng.normal(0.0, 0.1, size=n)
    c = np.zeros(n)

    def field(logits, c):
        p = _softmax(logits)
        if kind.kind is RegularizerKind.NEG_ENTROPY:
            # logits stay finite, so p > 0 and the gradient exists
            g = c + np.log(p) + 1.0
        elif kind.kind is RegularizerKind.HALF_L2:
            g = c + p
        else:
            g = c
        return g, p - p_data, p

    converged = False
    step = 0
    for step in range(1, steps + 1):
        g, h, p = field(logits, c)
        if scheme == "extragradient":
            g, h, _ = field(logits - primal_lr * g, c + dual_lr * h)
        d_logits = primal_lr * g
        logits = logits - d_logits
        c = c + dual_lr * h
        # keep logits centred; the shift is invisible to softmax
        logits -= logits.mean()
        if debug:
            as_simplex(_softmax(logits), tol=1e-9)
        if not np.all(np.isfinite(c)) or not np.all(np.isfinite(logits)):
            logger.warning("solver diverged at step %d", step)
            break
        # a constant shift of d_logits does not move p
        if np.ptp(d_logits) < tol and np.max(np.abs(dual_lr * h)) < tol:
            converged = True
            break

    p_gen = _softmax(logits)
    residual = float(np.max(np.abs(p_gen - p_data)))
    if not converged and residual < 1e-6:
        converged = True
    if not converged:
        logger.info("solve_minimax: no convergence after %d steps (residual %.3g)", step, residual)
    return SolveResult(p_gen=p_gen, c=c, steps=step, converged=converged, residual=residual)


@dataclass
class KktReport:
    stationarity_residual: float
    complementary_slackness_residual: float
    primal_feasibility_residual: float
    dual_feasibility_ok: bool
    lam: float = 0.0
    mu: list = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return (
            self.dual_feasibility_ok
            and self.stationarity_residual < tol
            and self.complementary_slackness_residual < tol
            and self.primal_feasibility_residual < tol
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def verify_kkt(p_gen, c, kind: Regularizer, p_data, tol: float = 1e-8) -> KktReport:
    """Certify ``(p_gen, c)`` as a saddle point through the KKT conditions.

    Stationarity reads ``dK/dp(x) + c(x) - mu(x) + lambda = 0``.  ``lambda``
    is the least-squares fit over the data support (where mu = 0), and off
    the support ``mu`` is the non-negative part of the stationarity residual.
    ``tol`` is the slack allowed before a multiplier counts as negative.
    """
    p_gen, p_data, c = as_simplex(p_gen, tol=1e-9), as_simplex(p_data), as_costs(c)
    _check_same_length(p_gen, p_data, c)
    support = p_data > 0

    grad = regularizer_grad(kind, p_gen, sentinel=True)
    # at p_gen(x) = 0 the entropy slope is -inf, so any finite mu >= 0 fits;
    # those points contribute no stationarity residual
    unbounded = np.isposinf(grad)
    grad = np.where(unbounded, 0.0, grad)
    base = grad + c
    lam = float(-np.mean(base[support])) if np.any(support) else 0.0

    raw_mu = base + lam
    raw_mu[support] = 0.0
    raw_mu[unbounded] = np.maximum(raw_mu[unbounded], 0.0)
    mu = np.maximum(raw_mu, 0.0)

    stationarity = base + lam - mu
    stationarity[unbounded & ~support] = 0.0
    stat_res = float(np.max(np.abs(stationarity)))
    cs_res = float(np.max(np.abs(mu * p_gen)))
    primal_res = float(
        max(
            np.max(np.abs(p_gen - p_data)),
            abs(p_gen.sum() - 1.0),
            np.max(np.maximum(-p_gen, 0.0)),
        )
    )
    dual_ok = bool(np.all(raw_mu >= -tol))
    return KktReport(
        stationarity_residual=stat_res,
        complementary_slackness_residual=cs_res,
        primal_feasibility_residual=primal_res,
        dual_feasibility_ok=dual_ok,
        lam=lam,
        mu=mu.tolist(),
    )


class EbganCase(Enum):
    ZERO = "zero"
    MARGIN = "margin"
    UNDETERMINED = "undetermined"


def ebgan_optimal_disc(p_gen, p_data, m: float) -> list[EbganCase]:
    """Per-point optimal EBGAN cost given ``p_gen``: 0 where the generator
    under-covers, the margin ``m`` where it over-covers, free where equal."""
    if m <= 0:
        raise ValueError("margin must be positive")
    p_gen, p_data = as_simplex(p_gen), as_simplex(p_data)
    _check_same_length(p_gen, p_data)
    out = []
    for g, d in zip(p_gen, p_data):
        if g < d:
            out.append(EbganCase.ZERO)
        elif g > d:
            out.append(EbganCase.MARGIN)
        else:
            out.append(EbganCase.UNDETERMINED)
    return out


def ebgan_generator_loss(p_gen, p_data, m: float) -> float:
    if m <= 0:
        raise ValueError("margin must be positive")
    p_gen, p_data = as_simplex(p_gen), as_simplex(p_data)
    _check_same_length(p_gen, p_data)
    diff = p_gen - p_data
    return float(m * diff[diff > 0].sum())


def kl_f_prime(u):
    """Derivative of ``f(u) = u log u``."""
    return np.log(u) + 1.0


def pearson_f_prime(u):
    """Derivative of ``f(u) = (u - 1)^2 / 2``."""
    return np.asarray(u) - 1.0


def fgan_optimal_disc(f_prime: Callable, p_data, p_gen) -> np.ndarray:
    """Optimal f-GAN critic ``f'(p_data / p_gen)``.

    Points outside both supports have an undefined ratio; they are assigned
    ``f'(1)`` which is what any generator matching the data would see.
    """
    p_data, p_gen = as_simplex(p_data), as_simplex(p_gen)
    _check_same_length(p_data, p_gen)
    bad = (p_gen == 0) & (p_data > 0)
    if np.any(bad):
        raise DivisionByZeroSupport(
            f"p_gen is zero on data support at {np.flatnonzero(bad).tolist()}"
        )
    ratio = np.ones_like(p_data)
    pos = p_gen > 0
    ratio[pos] = p_data[pos] / p_gen[pos]
    return np.asarray(f_prime(ratio), dtype=np.float64)


def random_full_support(n: int, rng: np.random.Generator, floor: float = 1e-3) -> np.ndarray:
    """Dirichlet(1) draw with every entry at least ``floor``."""
    p = rng.dirichlet(np.ones(n))
    p = np.maximum(p, floor)
    p = p / p.sum()
    # renormalising can push an entry a hair under the floor
    while p.min() < floor:
        p = np.maximum(p, floor)
        p = p / p.sum()
    return p


def simplex_grid(n: int, step: float) -> np.ndarray:
    """All points of the n-simplex whose coordinates are multiples of ``step``."""
    k = int(round(1.0 / step))
    if not math.isclose(k * step, 1.0):
        raise ValueError("1/step must be an integer")

    def rec(remaining, dims):
        if dims == 1:
            yield (remaining,)
            return
        for i in range(remaining + 1):
            for rest in rec(remaining - i, dims - 1):
                yield (i,) + rest

    return np.array(list(rec(k, n)), dtype=np.float64) / k


def certify(kind: Regularizer, p_data: Sequence[float], seed: int = 0,
            steps: int = 20000, tol: float = 1e-2) -> dict:
    """Solve, then check generator match, KKT residuals and the closed-form
    cost shape.  Returns a JSON-ready dict with a ``passed`` flag."""
    p_data = as_simplex(p_data)
    res = solve_minimax(kind, p_data, steps=steps, seed=seed)
    report = verify_kkt(res.p_gen, res.c, kind, p_data, tol=tol)
    gen_err = float(np.max(np.abs(res.p_gen - p_data)))
    out = {
        "regularizer": kind.name,
        "n": int(p_data.size),
        "seed": seed,
        "steps": res.steps,
        "converged": res.converged,
        "p_data": p_data.tolist(),
        "p_gen": res.p_gen.tolist(),
        "c": res.c.tolist(),
        "generator_max_error": gen_err,
        "generator_ok": gen_err < 1e-3,
        "kkt": asdict(report),
        "kkt_ok": report.passed(tol),
    }
    if kind.kind is RegularizerKind.CONSTANT:
        out["discriminator_form"] = "not applicable (under-determined)"
        out["discriminator_ok"] = None
        out["passed"] = out["generator_ok"] and out["kkt_ok"]
    else:
        target = optimal_discriminator(kind, p_data, DualVars(0.0, np.zeros_like(p_data)))
        spread = float(np.std((res.c - target)[p_data > 0]))
        out["discriminator_form"] = "closed form up to a constant"
        out["discriminator_shift_std"] = spread
        out["discriminator_ok"] = spread < tol
        out["passed"] = out["generator_ok"] and out["kkt_ok"] and out["discriminator_ok"]
    return out
