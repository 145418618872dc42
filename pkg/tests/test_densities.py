import numpy as np
import pytest

from fdsm.densities import (
    DATASET_NAMES,
    GaussianMixtureDensity,
    TwoRingsDensity,
    fisher_divergence,
    make_density,
)


def numeric_score(density, x, step=1e-6):
    """Central-difference oracle for grad log p."""
    x = np.atleast_2d(x)
    out = np.zeros_like(x)
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = step
        out[:, i] = (density.log_density(x + e) - density.log_density(x - e)) / (2 * step)
    return out


class TestSampling:
    def test_gauss2_sample_mean_near_origin(self):
        d = make_density("gauss2")
        xs = d.sample(10**5, seed=0)
        assert np.all(np.abs(xs.mean(axis=0)) < 0.02)

    def test_mog8_samples_near_some_mode(self):
        d = make_density("mog8")
        xs = d.sample(1000, seed=1)
        dists = np.linalg.norm(xs[:, None, :] - d.means[None, :, :], axis=-1)
        assert np.all(dists.min(axis=1) < 4 * 0.1)

    def test_same_seed_identical_batches(self):
        for name in DATASET_NAMES:
            d = make_density(name)
            assert np.array_equal(d.sample(64, seed=7), d.sample(64, seed=7))

    def test_samples_finite_and_2d(self):
        for name in DATASET_NAMES:
            xs = make_density(name).sample(128, seed=0)
            assert xs.shape == (128, 2)
            assert np.all(np.isfinite(xs))

    def test_n_below_one_rejected(self):
        with pytest.raises(ValueError):
            make_density("gauss2").sample(0, seed=0)

    def test_unknown_dataset_lists_valid_names(self):
        with pytest.raises(ValueError, match="gauss2"):
            make_density("mnist")


class TestScore:
    def test_gauss2_score_is_minus_x(self):
        d = make_density("gauss2")
        np.testing.assert_allclose(d.score([[1.0, 0.0]]), [[-1.0, 0.0]], atol=1e-12)

    def test_mog8_score_symmetry_between_modes(self):
        d = make_density("mog8")
        # midpoint between the two modes straddling the x-axis at angle
        # +/- pi/4: the score has no component along the symmetry (y) axis
        p = (d.means[1] + d.means[7]) / 2.0
        s = d.score([p])[0]
        assert abs(s[1]) < 1e-12

    @pytest.mark.parametrize("name", DATASET_NAMES)
    def test_score_matches_numeric_gradient(self, name):
        d = make_density(name)
        xs = d.sample(50, seed=3)
        got = d.score(xs)
        want = numeric_score(d, xs)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_rings_score_is_radial(self):
        d = TwoRingsDensity()
        x = np.array([[1.3, 0.4]])
        s = d.score(x)[0]
        cross = s[0] * x[0, 1] - s[1] * x[0, 0]
        assert abs(cross) < 1e-12


class TestFisherDivergence:
    def test_true_score_gives_exactly_zero(self):
        d = make_density("mog8")
        est = fisher_divergence(d, d.score, n_eval=500, seed=0)
        assert est.value == 0.0
        assert est.std_error == 0.0

    def test_zero_score_on_gauss2_gives_half_second_moment(self):
        d = make_density("gauss2")
        est = fisher_divergence(d, lambda x: np.zeros_like(x), n_eval=2 * 10**5, seed=1)
        # 0.5 E|x|^2 = d/2 = 1 for the unit Gaussian
        assert est.value == pytest.approx(1.0, abs=5 * est.std_error)

    def test_nonnegative_for_arbitrary_score(self):
        d = make_density("rings")
        est = fisher_divergence(d, lambda x: np.sin(x), n_eval=200, seed=2)
        assert est.value >= 0.0

    def test_reports_standard_error(self):
        d = make_density("gauss2")
        est = fisher_divergence(d, lambda x: np.zeros_like(x), n_eval=1000, seed=3)
        assert est.std_error > 0.0
        assert est.n == 1000
