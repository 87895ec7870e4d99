"""Adversarial training loops for the 2D experiments.

Four variants share one loop:

``gan``          binary-classifier discriminator, non-saturating generator loss
``egan-const``   energy discriminator, no entropy term
``egan-ent-nn``  energy discriminator, nearest-neighbour entropy gradient
``egan-ent-vi``  energy discriminator, variational entropy bound
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, AdamState, Tape, Tensor, adam_step, backward
from .data import DEFAULT_GRID, DatasetKind, GridSpec, make_dataset
from .entropy import EntropyGradBatch, InferenceNet, knn_entropy_gradients, vi_upper_bound
from .errors import MissingEntropyTerm, NonFiniteError

logger = logging.getLogger(__name__)


class ModelKind(Enum):
    GAN = "gan"
    EGAN_CONST = "egan-const"
    EGAN_ENT_NN = "egan-ent-nn"
    EGAN_ENT_VI = "egan-ent-vi"

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        key = name.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown model {name!r}; choose from {[k.value for k in cls]}")

    @property
    def is_energy(self) -> bool:
        return self is not ModelKind.GAN


@dataclass
class TrainConfig:
    model: str = "egan-ent-nn"
    dataset: str = "mog4"
    z_dim: int = 4
    hidden: int = 128
    batch_size: int = 128
    iterations: int = 20000
    lr: float = 2e-4
    disc_lr: float = 2e-5
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    k: int = 5
    alpha: float = 4.0
    entropy_weight: float = 1.0
    energy_penalty: float = 0.0
    seed: int = 0
    eval_every: int = 1000
    n_train: int = 100_000
    n_eval: int = 100_000
    n_report_samples: int = 2000
    grid_min: float = -5.0
    grid_max: float = 5.0
    grid_cells: int = 100
    kl_epsilon: float = 1e-10

    def __post_init__(self):
        self.validate()

    def validate(self):
        ModelKind.parse(self.model)
        DatasetKind.parse(self.dataset)
        for name in ("z_dim", "hidden", "batch_size", "eval_every", "n_train", "n_eval",
                     "n_report_samples", "grid_cells", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.entropy_weight < 0 or self.alpha <= 0 or self.lr <= 0 or self.disc_lr <= 0:
            raise ValueError("entropy_weight must be >= 0, alpha and learning rates > 0")
        if self.model_kind is ModelKind.EGAN_ENT_NN and self.k >= self.batch_size:
            raise ValueError("k must be smaller than batch_size")

    @property
    def model_kind(self) -> ModelKind:
        return ModelKind.parse(self.model)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_min, self.grid_max, self.grid_min, self.grid_max,
                        self.grid_cells, self.grid_cells)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            default = names[key].default
            if isinstance(default, bool):
                kwargs[key] = bool(value)
            elif isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(f"{key} must be an integer")
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value)
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def seed_streams(seed: int, names=("init", "data", "train", "eval")) -> dict[str, np.random.Generator]:
    """Independent generators derived from one seed, one per named purpose."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def generator_layers(z_dim: int, hidden: int) -> str:
    return f"fc:{z_dim}:{hidden},bn,relu,fc:{hidden}:{hidden},bn,relu,fc:{hidden}:2"


def discriminator_layers(hidden: int) -> str:
    return f"fc:2:{hidden},relu,fc:{hidden}:{hidden},relu,fc:{hidden}:1"


@dataclass
class ModelBundle:
    kind: ModelKind
    generator: MLP
    discriminator: MLP
    gen_opt: AdamState
    disc_opt: AdamState
    inference: InferenceNet | None = None
    infer_opt: AdamState | None = None
    z_dim: int = 4

    def __post_init__(self):
        if (self.inference is not None) != (self.kind is ModelKind.EGAN_ENT_VI):
            raise ValueError("an inference net is present iff the model is egan-ent-vi")

    @classmethod
    def create(cls, cfg: TrainConfig, rng: np.random.Generator) -> "ModelBundle":
        kind = cfg.model_kind

        def opt(lr=cfg.lr):
            return AdamState(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)

        gen = MLP(generator_layers(cfg.z_dim, cfg.hidden), rng, name="generator")
        disc = MLP(discriminator_layers(cfg.hidden), rng, name="discriminator")
        infer = infer_opt = None
        if kind is ModelKind.EGAN_ENT_VI:
            infer = InferenceNet(rng, x_dim=2, z_dim=cfg.z_dim, hidden=cfg.hidden, name="inference")
            infer_opt = opt()
        return cls(kind, gen, disc, opt(), opt(cfg.disc_lr), infer, infer_opt, cfg.z_dim)

    def sample_noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(n, self.z_dim))

    def generate(self, n: int, rng: np.random.Generator, batch_size: int = 8192) -> np.ndarray:
        """Eval-mode generator samples (batchnorm uses running statistics)."""
        return self.generator.predict(self.sample_noise(n, rng), batch_size)

    def energy(self, x, tape: Tape | None = None) -> Tensor:
        """Discriminator cost per point, shape (batch,).  For the GAN
        baseline the energy is the negated real-vs-fake logit."""
        out = self.discriminator.forward(ad.as_tensor(x), tape, train=False)
        out = ad.sum_rows(out, tape)
        return ad.scale(out, -1.0, tape) if self.kind is ModelKind.GAN else out

    def energy_values(self, x) -> np.ndarray:
        out = self.discriminator.predict(x)[:, 0]
        return -out if self.kind is ModelKind.GAN else out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.generator.state_arrays())
        out.update(self.discriminator.state_arrays())
        if self.inference is not None:
            out.update(self.inference.net.state_arrays())
        return out

    def load_state_arrays(self, arrays) -> None:
        self.generator.load_state_arrays(arrays)
        self.discriminator.load_state_arrays(arrays)
        if self.inference is not None:
            self.inference.net.load_state_arrays(arrays)


# -- losses -------------------------------------------------------------------


def egan_disc_loss(c_real: Tensor, c_fake: Tensor, tape: Tape | None = None) -> Tensor:
    """``mean(c_real) - mean(c_fake)``; minimizing it widens the cost gap."""
    return ad.sub(ad.mean(c_real, tape), ad.mean(c_fake, tape), tape)


@dataclass
class GenLoss:
    """Generator objective: a scalar node plus extra upstream gradients to
    inject at intermediate tensors during backward."""

    loss: Tensor
    seeds: list = field(default_factory=list)


def egan_gen_loss(
    kind: ModelKind,
    c_fake: Tensor,
    tape: Tape | None = None,
    entropy_term: Tensor | EntropyGradBatch | None = None,
    x_fake: Tensor | None = None,
    entropy_weight: float = 1.0,
) -> GenLoss:
    """Energy generator loss for the three EGAN variants.

    ``egan-ent-vi`` adds ``entropy_weight * U(q)`` (``entropy_term`` is the
    bound's loss node).  ``egan-ent-nn`` keeps ``mean(c_fake)`` as the value
    and seeds ``x_fake`` with ``alpha * d_i / batch``, the Monte-Carlo
    gradient of the negative entropy matching the mean over the batch.
    """
    base = ad.mean(c_fake, tape)
    if kind is ModelKind.EGAN_CONST:
        return GenLoss(base)
    if kind is ModelKind.EGAN_ENT_VI:
        if not isinstance(entropy_term, Tensor):
            raise MissingEntropyTerm("egan-ent-vi needs the variational bound node")
        return GenLoss(ad.add(base, ad.scale(entropy_term, entropy_weight, tape), tape))
    if kind is ModelKind.EGAN_ENT_NN:
        if not isinstance(entropy_term, EntropyGradBatch) or x_fake is None:
            raise MissingEntropyTerm("egan-ent-nn needs nearest-neighbour gradients and x_fake")
        if len(entropy_term) != x_fake.shape[0]:
            raise ValueError("entropy gradient batch does not match x_fake")
        return GenLoss(base, [(x_fake, entropy_term.gradients / x_fake.shape[0])])
    raise ValueError(f"{kind.value} is not an energy model")


def gan_losses(d_real_logit: Tensor, d_fake_logit: Tensor, tape: Tape | None = None):
    """Binary cross-entropy discriminator loss (averaged over the real and
    fake halves) and the non-saturating generator loss."""
    real_term = ad.mean(ad.log_sigmoid(d_real_logit, tape), tape)
    fake_term = ad.mean(ad.log_sigmoid(ad.scale(d_fake_logit, -1.0, tape), tape), tape)
    disc = ad.scale(ad.add(real_term, fake_term, tape), -0.5, tape)
    gen = ad.scale(ad.mean(ad.log_sigmoid(d_fake_logit, tape), tape), -1.0, tape)
    return disc, gen


# -- training -----------------------------------------------------------------


def _disc_output(bundle: ModelBundle, x: Tensor, tape: Tape | None) -> Tensor:
    return ad.sum_rows(bundle.discriminator.forward(x, tape, train=True), tape)


def energy_magnitude_penalty(c_real: Tensor, c_fake: Tensor, weight: float,
                             tape: Tape | None = None) -> Tensor:
    """``weight/2 * (mean(c_real^2) + mean(c_fake^2))``, a leak that keeps the
    otherwise unbounded energy from drifting."""
    sq = ad.add(ad.mean(ad.square(c_real, tape), tape), ad.mean(ad.square(c_fake, tape), tape), tape)
    return ad.scale(sq, 0.5 * weight, tape)


def discriminator_step(bundle: ModelBundle, real: np.ndarray, fake: np.ndarray,
                       energy_penalty: float = 0.0) -> float:
    tape = Tape()
    d_real = _disc_output(bundle, Tensor(real), tape)
    d_fake = _disc_output(bundle, Tensor(fake), tape)
    if bundle.kind is ModelKind.GAN:
        loss, _ = gan_losses(d_real, d_fake, tape)
    else:
        loss = egan_disc_loss(d_real, d_fake, tape)
        if energy_penalty > 0:
            loss = ad.add(loss, energy_magnitude_penalty(d_real, d_fake, energy_penalty, tape), tape)
    backward(tape, loss, bundle.discriminator.params)
    adam_step(bundle.discriminator.params, bundle.disc_opt)
    return loss.item()


def generator_step(bundle: ModelBundle, z: np.ndarray, cfg: TrainConfig) -> dict[str, float]:
    tape = Tape()
    x_fake = bundle.generator.forward(Tensor(z), tape, train=True)
    d_fake = _disc_output(bundle, x_fake, tape)
    metrics = {}
    kind = bundle.kind
    if kind is ModelKind.GAN:
        gen = GenLoss(ad.scale(ad.mean(ad.log_sigmoid(d_fake, tape), tape), -1.0, tape))
    elif kind is ModelKind.EGAN_ENT_NN:
        grads = knn_entropy_gradients(x_fake.data, k=cfg.k, alpha=cfg.alpha)
        metrics["degenerate"] = float(grads.degenerate.sum())
        gen = egan_gen_loss(kind, d_fake, tape, grads, x_fake)
    elif kind is ModelKind.EGAN_ENT_VI:
        u = vi_upper_bound(bundle.inference, x_fake, Tensor(z), tape)
        metrics["vi_bound"] = u.item()
        gen = egan_gen_loss(kind, d_fake, tape, u, entropy_weight=cfg.entropy_weight)
    else:
        gen = egan_gen_loss(kind, d_fake, tape)

    backward(tape, gen.loss, bundle.generator.params, seeds=gen.seeds)
    adam_step(bundle.generator.params, bundle.gen_opt)
    if bundle.inference is not None:
        adam_step(bundle.inference.params, bundle.infer_opt)
    # the discriminator is a constant during this phase
    bundle.discriminator.params.zero_grad()
    metrics["gen_loss"] = gen.loss.item()
    return metrics


def train_step(bundle: ModelBundle, cfg: TrainConfig, data_batch: np.ndarray,
               rng: np.random.Generator) -> dict[str, float]:
    """One discriminator update on (real, fake), then one generator update
    (and inference-net update for the VI model) on fresh noise."""
    n = data_batch.shape[0]
    fake = bundle.generator.forward(Tensor(bundle.sample_noise(n, rng)), None, train=True).data
    metrics = {"disc_loss": discriminator_step(bundle, data_batch, fake, cfg.energy_penalty)}
    metrics.update(generator_step(bundle, bundle.sample_noise(n, rng), cfg))
    return metrics


@dataclass
class RunReport:
    config: dict
    steps: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    energy_grid: list | None = None
    grid: dict | None = None
    samples: list | None = None
    kl_table: dict | None = None
    out_of_bounds: dict | None = None
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d


def _check_finite(metrics: dict, step: int):
    bad = {k: v for k, v in metrics.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteError(f"non-finite loss at step {step}: {bad}",
                             dump={"step": step, "metrics": metrics})


def train(cfg: TrainConfig, bundle: ModelBundle | None = None, progress=None,
          evaluate: bool = True) -> tuple[RunReport, ModelBundle]:
    """Run the full loop and build the report.

    Returns the report and the trained bundle.  ``progress`` is called as
    ``progress(step, metrics)`` at every evaluation snapshot.
    """
    from .evaluation import evaluate_bundle

    start = time.perf_counter()
    rngs = seed_streams(cfg.seed)
    mixture = make_dataset(cfg.dataset)
    train_set = mixture.sample(cfg.n_train, rngs["data"])
    if bundle is None:
        bundle = ModelBundle.create(cfg, rngs["init"])

    report = RunReport(config=cfg.to_dict())
    window: dict[str, list[float]] = {}
    for step in range(1, cfg.iterations + 1):
        idx = rngs["train"].integers(0, cfg.n_train, size=cfg.batch_size)
        metrics = train_step(bundle, cfg, train_set[idx], rngs["train"])
        _check_finite(metrics, step)
        for k, v in metrics.items():
            window.setdefault(k, []).append(v)
        if step % cfg.eval_every == 0 or step == cfg.iterations:
            snap = {k: float(np.mean(v)) for k, v in window.items()}
            report.steps.append(step)
            for k, v in snap.items():
                report.curves.setdefault(k, []).append(v)
            window.clear()
            logger.info("step %d %s", step, snap)
            if progress is not None:
                progress(step, snap)

    if evaluate:
        ev = evaluate_bundle(bundle, mixture, cfg, train_set, rngs["eval"])
        report.energy_grid = ev["energy_grid"].values.tolist()
        report.grid = cfg.grid.to_dict()
        report.samples = ev["samples"][: cfg.n_report_samples].tolist()
        report.kl_table = ev["kl_table"].to_dict()
        report.out_of_bounds = ev["out_of_bounds"]
    report.wall_clock = time.perf_counter() - start
    return report, bundle
