import math
import warnings

import numpy as np
import pytest

from egan import autodiff as ad
from egan.autodiff import Tape, Tensor, backward
from egan.entropy import EntropyGradBatch
from egan.errors import MissingEntropyTerm, NonFiniteError
from egan.trainer import (
    ModelBundle,
    ModelKind,
    RunReport,
    TrainConfig,
    discriminator_step,
    egan_disc_loss,
    egan_gen_loss,
    gan_losses,
    generator_step,
    seed_streams,
    train,
    train_step,
)


def leaf(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


def small_cfg(**kw):
    base = dict(hidden=16, batch_size=32, iterations=5, eval_every=5, n_train=2000,
                n_eval=2000, n_report_samples=50, grid_cells=20)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.iterations, cfg.z_dim) == (128, 20000, 4)
        assert cfg.model_kind is ModelKind.EGAN_ENT_NN

    @pytest.mark.parametrize("bad", [
        {"model": "wgan"}, {"dataset": "moons"}, {"batch_size": 0},
        {"iterations": -1}, {"entropy_weight": -1.0}, {"k": 200},
    ])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_dict_round_trip(self):
        cfg = TrainConfig(model="gan", seed=3, alpha=2.5)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown_and_fractional(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"colour": 1})
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"batch_size": 12.5})

    def test_seed_streams_are_independent_and_stable(self):
        a, b = seed_streams(5), seed_streams(5)
        assert a["init"].random() == b["init"].random()
        assert seed_streams(5)["init"].random() != seed_streams(5)["data"].random()


class TestEganLosses:
    def test_disc_loss_examples(self):
        assert egan_disc_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
        assert egan_disc_loss(Tensor(np.ones(4)), Tensor(np.full(4, 3.0))).item() == -2.0

    def test_disc_loss_gradient(self):
        real, fake = leaf(np.zeros(5)), leaf(np.zeros(8))
        tape = Tape()
        backward(tape, egan_disc_loss(real, fake, tape))
        np.testing.assert_allclose(fake.grad, -1 / 8)
        np.testing.assert_allclose(real.grad, 1 / 5)

    def test_const_gen_loss(self):
        assert egan_gen_loss(ModelKind.EGAN_CONST, Tensor(np.full(6, 2.0))).loss.item() == 2.0

    def test_missing_entropy_term(self):
        c = Tensor(np.zeros(4))
        with pytest.raises(MissingEntropyTerm):
            egan_gen_loss(ModelKind.EGAN_ENT_VI, c)
        with pytest.raises(MissingEntropyTerm):
            egan_gen_loss(ModelKind.EGAN_ENT_NN, c)
        with pytest.raises(ValueError):
            egan_gen_loss(ModelKind.GAN, c)

    def test_vi_zero_weight_matches_const(self):
        c = Tensor(np.array([0.5, 1.5, -1.0]))
        const = egan_gen_loss(ModelKind.EGAN_CONST, c).loss.item()
        vi = egan_gen_loss(ModelKind.EGAN_ENT_VI, c, entropy_term=Tensor(7.3), entropy_weight=0.0)
        assert vi.loss.item() == const

    def test_nn_zero_directions_match_const_gradients(self):
        x_const, x_nn = leaf(np.ones((4, 2))), leaf(np.ones((4, 2)))
        w = Tensor(np.array([[1.0], [-2.0]]))
        b = Tensor(np.zeros(1))
        grads = []
        for kind, x in ((ModelKind.EGAN_CONST, x_const), (ModelKind.EGAN_ENT_NN, x_nn)):
            tape = Tape()
            c = ad.sum_rows(ad.fc_forward(x, w, b, tape), tape)
            zero = EntropyGradBatch(np.zeros((4, 2)), 1.0, 2, np.ones(4, bool))
            gl = egan_gen_loss(kind, c, tape, zero, x)
            backward(tape, gl.loss, seeds=gl.seeds)
            grads.append(x.grad.copy())
        np.testing.assert_array_equal(grads[0], grads[1])

    def test_nn_injection_adds_scaled_directions(self):
        x = leaf(np.zeros((2, 2)))
        tape = Tape()
        c = ad.sum_rows(ad.scale(x, 0.0, tape), tape)
        d = np.array([[1.0, 0.0], [0.0, -1.0]])
        gl = egan_gen_loss(ModelKind.EGAN_ENT_NN, c, tape, EntropyGradBatch(d, 3.0, 1, np.zeros(2, bool)), x)
        backward(tape, gl.loss, seeds=gl.seeds)
        np.testing.assert_allclose(x.grad, 3.0 * d / 2)


class TestGanLosses:
    def test_zero_logits(self):
        d, g = gan_losses(Tensor(np.zeros(5)), Tensor(np.zeros(5)))
        assert d.item() == pytest.approx(math.log(2), abs=1e-12)
        assert g.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_discrimination(self):
        d, _ = gan_losses(Tensor(np.full(3, 50.0)), Tensor(np.full(3, -50.0)))
        assert d.item() < 1e-20

    def test_extreme_logits_stay_finite(self):
        d, g = gan_losses(Tensor(np.array([-800.0])), Tensor(np.array([800.0])))
        assert math.isfinite(d.item()) and math.isfinite(g.item())

    def test_gen_loss_decreases_with_fake_logit(self):
        vals = [gan_losses(Tensor([0.0]), Tensor([v]))[1].item() for v in np.linspace(-5, 5, 21)]
        assert np.all(np.diff(vals) < 0)
        fake = leaf([0.3, -1.2])
        tape = Tape()
        backward(tape, gan_losses(Tensor([0.0]), fake, tape)[1])
        assert np.all(fake.grad < 0)

    def test_confident_discriminator_has_small_gradient(self):
        cfg = small_cfg(model="gan")
        bundle = ModelBundle.create(cfg, np.random.default_rng(0))
        last = bundle.discriminator.params["4.b"]
        last.data[:] = 0.0
        # saturate: huge positive output on real, huge negative on fake
        w = bundle.discriminator.params["4.w"]
        w.data[:] = 0.0
        real, fake = leaf(np.full((8, 1), 60.0)), leaf(np.full((8, 1), -60.0))
        tape = Tape()
        loss, _ = gan_losses(ad.sum_rows(real, tape), ad.sum_rows(fake, tape), tape)
        backward(tape, loss)
        assert np.abs(real.grad).max() < 1e-20 and np.abs(fake.grad).max() < 1e-20


class TestBundle:
    def test_inference_net_iff_vi(self):
        for kind in ModelKind:
            b = ModelBundle.create(small_cfg(model=kind.value), np.random.default_rng(0))
            assert (b.inference is not None) == (kind is ModelKind.EGAN_ENT_VI)

    def test_invariant_enforced(self):
        b = ModelBundle.create(small_cfg(model="egan-const"), np.random.default_rng(0))
        with pytest.raises(ValueError):
            ModelBundle(ModelKind.EGAN_ENT_VI, b.generator, b.discriminator, b.gen_opt, b.disc_opt)

    def test_gan_energy_is_negated_logit(self):
        b = ModelBundle.create(small_cfg(model="gan"), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(10, 2))
        np.testing.assert_allclose(b.energy_values(x), -b.discriminator.predict(x)[:, 0])
        np.testing.assert_allclose(b.energy(Tensor(x)).data, b.energy_values(x))

    def test_architecture(self):
        b = ModelBundle.create(TrainConfig(model="egan-ent-vi"), np.random.default_rng(0))
        assert b.generator.layers[0] == "fc:4:128" and "bn" in b.generator.layers
        assert "bn" not in b.discriminator.layers
        assert b.discriminator.out_features == 1 and b.inference.net.out_features == 8


class TestTrainStep:
    @pytest.mark.parametrize("model", [k.value for k in ModelKind])
    def test_deterministic(self, model):
        cfg = small_cfg(model=model, k=3)
        runs = []
        for _ in range(2):
            b = ModelBundle.create(cfg, np.random.default_rng(4))
            rng = np.random.default_rng(9)
            batch = np.random.default_rng(2).normal(size=(32, 2))
            runs.append([train_step(b, cfg, batch, rng) for _ in range(3)])
        assert runs[0] == runs[1]
        assert all(math.isfinite(v) for m in runs[0] for v in m.values())

    def test_generator_step_leaves_disc_grads_clear(self):
        cfg = small_cfg(model="egan-ent-nn", k=3)
        b = ModelBundle.create(cfg, np.random.default_rng(0))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            generator_step(b, b.sample_noise(32, np.random.default_rng(1)), cfg)
        assert all(p.grad is None or not np.any(p.grad) for p in b.discriminator.params.values())

    def test_disc_loss_trend_with_frozen_generator(self):
        # linearly separable toy: real at x=+1, fake at x=-1
        cfg = small_cfg(model="egan-const")
        b = ModelBundle.create(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        real = np.column_stack([np.ones(32), rng.normal(0, 0.1, 32)])
        fake = np.column_stack([-np.ones(32), rng.normal(0, 0.1, 32)])
        losses = [discriminator_step(b, real, fake) for _ in range(100)]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        assert losses[-1] < losses[0]

    def test_energy_penalty_bounds_energies(self):
        cfg = small_cfg(model="egan-const", disc_lr=1e-2)
        real = np.full((32, 2), 1.0)
        fake = np.full((32, 2), -1.0)
        out = []
        for rho in (0.0, 1.0):
            b = ModelBundle.create(cfg, np.random.default_rng(0))
            for _ in range(300):
                discriminator_step(b, real, fake, energy_penalty=rho)
            out.append(np.ptp(b.energy_values(np.array([[1.0, 1.0], [-1.0, -1.0]]))))
        assert out[1] < out[0]
        # pointwise optimum of the penalized loss: c = -/+ 1/rho, a gap of 2
        assert out[1] == pytest.approx(2.0, abs=0.2)


class TestTrain:
    def test_zero_iterations(self):
        cfg = small_cfg(iterations=0)
        report, bundle = train(cfg)
        assert report.steps == [] and report.curves == {}
        assert report.config == cfg.to_dict()
        assert np.asarray(report.energy_grid).shape == (20, 20)
        assert len(report.samples) == 50

    def test_bit_identical_reports(self):
        cfg = small_cfg(model="egan-ent-vi", iterations=6, eval_every=3)
        a = train(cfg)[0].to_dict(include_timing=False)
        b = train(cfg)[0].to_dict(include_timing=False)
        assert a == b
        assert a["steps"] == [3, 6]
        assert set(a["curves"]) >= {"disc_loss", "gen_loss", "vi_bound"}

    def test_report_fields(self):
        report, _ = train(small_cfg(model="gan"))
        d = report.to_dict()
        assert isinstance(report, RunReport)
        assert set(d["kl_table"]) >= {"p_disc||p_data", "p_data||p_emp"}
        assert all(v >= 0 and math.isfinite(v) for v in d["kl_table"].values())
        assert d["wall_clock"] > 0

    def test_nonfinite_abort(self):
        cfg = small_cfg(model="egan-const", iterations=3)
        bundle = ModelBundle.create(cfg, np.random.default_rng(0))
        bundle.discriminator.params["0.w"].data[:] = np.nan
        with pytest.raises(NonFiniteError) as info:
            train(cfg, bundle=bundle)
        assert info.value.dump["step"] == 1
        assert "disc_loss" in info.value.dump["metrics"]

    def test_progress_callback(self):
        seen = []
        train(small_cfg(iterations=4, eval_every=2), progress=lambda s, m: seen.append(s), evaluate=False)
        assert seen == [2, 4]
