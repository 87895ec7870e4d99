import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egan.data import (
    DEFAULT_GRID,
    DatasetKind,
    GaussianMixture,
    Grid2D,
    GridSpec,
    make_dataset,
    read_grid_csv,
    read_pgm,
    read_points_csv,
    true_energy_grid,
    write_grid_csv,
    write_grid_pgm,
    write_points_csv,
)

ALL_KINDS = list(DatasetKind)


def naive_log_density(m, x):
    total = 0.0
    for w, mu, s in zip(m.weights, m.means, m.stds):
        d2 = float(np.sum((np.asarray(x) - mu) ** 2))
        total += w * math.exp(-d2 / (2 * s * s)) / (2 * math.pi * s * s)
    return math.log(total)


class TestMakeDataset:
    def test_biased_weights(self):
        np.testing.assert_array_equal(make_dataset("biased-mog2").weights, [0.9, 0.1])

    def test_spiral_components(self):
        m = make_dataset(DatasetKind.TWO_SPIRALS)
        assert m.n_components == 200
        np.testing.assert_allclose(m.weights, 1 / 200)
        # second arm is the first rotated by pi
        np.testing.assert_allclose(m.means[100:], -m.means[:100])

    def test_mog4_equal_weights(self):
        np.testing.assert_array_equal(make_dataset("mog4").weights, [0.25] * 4)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_components_inside_canvas_by_six_std(self, kind):
        m = make_dataset(kind)
        margin = np.abs(m.means).max(axis=1) + 6 * m.stds
        assert np.all(margin <= 5.0)

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_dataset("swiss-roll")

    def test_invalid_mixture(self):
        with pytest.raises(ValueError):
            GaussianMixture([0.5, 0.6], [(0, 0), (1, 1)], [1, 1])
        with pytest.raises(ValueError):
            GaussianMixture([1.0], [(0, 0)], [0.0])


class TestSample:
    def test_degenerate_gaussian(self):
        m = GaussianMixture([1.0], [(1.0, 2.0)], [1e-9])
        pts = m.sample(3, seed=0)
        np.testing.assert_allclose(pts, [[1.0, 2.0]] * 3, atol=1e-6)

    def test_biased_fraction(self):
        _, labels = make_dataset("biased-mog2").sample(100_000, seed=1, return_labels=True)
        assert abs(np.mean(labels == 0) - 0.9) < 0.01

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_component_frequencies(self, kind):
        m = make_dataset(kind)
        n = 100_000
        _, labels = m.sample(n, seed=2, return_labels=True)
        freq = np.bincount(labels, minlength=m.n_components) / n
        bound = 3 * np.sqrt(m.weights * (1 - m.weights) / n)
        # union over 200 components: allow the 3-sigma band to be missed rarely
        assert np.mean(np.abs(freq - m.weights) <= bound) >= 0.98

    def test_seeded(self):
        m = make_dataset("mog4")
        np.testing.assert_array_equal(m.sample(50, seed=9), m.sample(50, seed=9))

    def test_n_positive(self):
        with pytest.raises(ValueError):
            make_dataset("mog4").sample(0)


class TestLogDensity:
    def test_single_component_at_mean(self):
        m = GaussianMixture([1.0], [(0.3, -0.4)], [1.0])
        assert m.log_density([0.3, -0.4]) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)

    def test_mog4_symmetry(self):
        m = make_dataset("mog4")
        vals = m.log_density(m.means)
        np.testing.assert_allclose(vals, vals[0], rtol=0, atol=1e-12)

    @given(st.floats(-4, 4), st.floats(-4, 4), st.sampled_from(["mog4", "biased-mog2"]))
    def test_matches_naive_sum(self, x, y, name):
        m = make_dataset(name)
        assert m.log_density([x, y]) == pytest.approx(naive_log_density(m, [x, y]), abs=1e-12)

    def test_far_point_is_finite(self):
        assert np.isfinite(make_dataset("two-spirals").log_density([40.0, -40.0]))

    @settings(max_examples=20)
    @given(st.integers(0, 10_000))
    def test_component_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        m = make_dataset("two-spirals")
        perm = rng.permutation(m.n_components)
        shuffled = GaussianMixture(m.weights[perm], m.means[perm], m.stds[perm])
        pts = rng.uniform(-4, 4, size=(20, 2))
        np.testing.assert_allclose(shuffled.log_density(pts), m.log_density(pts), atol=1e-12)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_integrates_to_one(self, kind):
        m = make_dataset(kind)
        # midpoint rule, cell width <= std / 5
        spec = GridSpec(-5, 5, -5, 5, 500, 500)
        pts = spec.centers()
        total = sum(
            np.exp(m.log_density(pts[i:i + 25_000])).sum() for i in range(0, len(pts), 25_000)
        )
        assert total * spec.dx * spec.dy == pytest.approx(1.0, abs=1e-3)


class TestEnergyGrid:
    def test_one_cell(self):
        m = GaussianMixture([1.0], [(1.0, 1.0)], [1.0])
        g = true_energy_grid(m, GridSpec(0, 2, 0, 2, 1, 1))
        assert g.values[0, 0] == pytest.approx(math.log(2 * math.pi))

    def test_argmin_at_heavy_mode(self):
        g = true_energy_grid(make_dataset("biased-mog2"))
        i, j = np.unravel_index(np.argmin(g.values), g.values.shape)
        x, y = DEFAULT_GRID.x_centers()[i], DEFAULT_GRID.y_centers()[j]
        assert math.hypot(x + 2.0, y) < 0.1

    def test_matches_pointwise(self):
        m = make_dataset("mog4")
        g = true_energy_grid(m)
        xs, ys = DEFAULT_GRID.x_centers(), DEFAULT_GRID.y_centers()
        for i, j in [(0, 0), (17, 63), (99, 99), (50, 49)]:
            assert g.values[i, j] == pytest.approx(-m.log_density([xs[i], ys[j]]), abs=1e-12)

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            GridSpec(1, 0, 0, 1, 2, 2)
        with pytest.raises(ValueError):
            GridSpec(0, 1, 0, 1, 0, 2)


class TestFiles:
    def test_grid_csv_roundtrip(self, tmp_path):
        spec = GridSpec(-1, 2, -3, 4, 3, 5)
        g = Grid2D(spec, np.random.default_rng(0).normal(size=(3, 5)))
        write_grid_csv(g, tmp_path / "g.csv")
        back = read_grid_csv(tmp_path / "g.csv")
        assert back.spec == spec
        np.testing.assert_array_equal(back.values, g.values)
        assert (tmp_path / "g.csv").read_text().startswith("# x_min=-1")

    def test_pgm(self, tmp_path):
        spec = GridSpec(0, 1, 0, 1, 4, 3)
        g = Grid2D(spec, np.arange(12.0).reshape(4, 3))
        write_grid_pgm(g, tmp_path / "g.pgm")
        raw = (tmp_path / "g.pgm").read_bytes()
        assert raw.startswith(b"P5\n4 3\n255\n")
        img = read_pgm(tmp_path / "g.pgm")
        assert img.shape == (3, 4)
        assert img.min() == 0 and img.max() == 255
        # top-left pixel is x_min, y_max
        assert img[0, 0] == round(2 / 11 * 255)

    def test_constant_grid_pgm(self, tmp_path):
        g = Grid2D(GridSpec(0, 1, 0, 1, 2, 2), np.ones((2, 2)))
        write_grid_pgm(g, tmp_path / "c.pgm")
        assert np.all(read_pgm(tmp_path / "c.pgm") == 0)

    def test_points_roundtrip(self, tmp_path):
        pts = make_dataset("mog4").sample(10, seed=0)
        write_points_csv(pts, tmp_path / "p.csv")
        assert (tmp_path / "p.csv").read_text().splitlines()[0] == "x,y"
        np.testing.assert_array_equal(read_points_csv(tmp_path / "p.csv"), pts)
