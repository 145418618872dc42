import numpy as np
import pytest

from fdsm.autodiff import scale as t_scale
from fdsm.models import (
    MlpEnergyModel,
    MlpScoreModel,
    QuadraticEnergyModel,
    ShiftedEnergyModel,
)
from fdsm.objectives import (
    DirectionSample,
    ZeroGradientError,
    dsm,
    dsm_sliced,
    evaluate_objective,
    fd_dsm,
    fd_ssm,
    fd_ssmvr,
    grad_angle,
    mpf_naive,
    objective_info,
    parameter_gradients,
    sample_direction,
    sm_exact,
    ssm,
    ssmvr,
)

EPS_GRID = (0.1, 0.05, 0.025, 0.0125)


class LinearScoreModel:
    """s(x) = -x: the closed-form oracle for the score-model objectives."""

    dtype = np.dtype(np.float64)
    params: list = []
    param_names: list = []
    input_dim = 2
    kind = "score"

    def score(self, t):
        return t_scale(t, -1.0)

    def score_np(self, x):
        return -np.asarray(x)

    __call__ = score


@pytest.fixture(scope="module")
def quad():
    return QuadraticEnergyModel(dim=2)


@pytest.fixture(scope="module")
def mlp():
    return MlpEnergyModel((2, 32, 32, 1), seed=0)


@pytest.fixture(scope="module")
def score_mlp():
    return MlpScoreModel((2, 32, 32, 2), seed=1)


def unit_dirs(b, d, eps, seed):
    return sample_direction(b, d, eps, np.random.default_rng(seed))


def antithetic_pairs(x_half, eps, seed):
    """Duplicate each sample and give the copies directions v and -v, so
    odd Taylor terms cancel exactly in the batch mean (finite-sample
    stand-in for the expectation over v)."""
    half = sample_direction(len(x_half), x_half.shape[1], eps, np.random.default_rng(seed))
    x = np.concatenate([x_half, x_half])
    dirs = DirectionSample(np.concatenate([half.v, -half.v]), eps)
    return x, dirs


class TestDirectionSampler:
    def test_rows_have_norm_epsilon(self):
        ds = unit_dirs(200, 2, 0.05, 0)
        np.testing.assert_allclose(np.linalg.norm(ds.v, axis=1), 0.05, rtol=1e-12)

    def test_mean_near_zero(self):
        ds = unit_dirs(10**5, 2, 1.0, 1)
        se = 1.0 / np.sqrt(2 * 10**5)  # per-coordinate std is 1/sqrt(d)
        assert np.all(np.abs(ds.v.mean(axis=0)) < 3 * se)

    def test_covariance_matches_eps_sq_over_d(self):
        eps, d = 0.3, 2
        ds = unit_dirs(10**5, d, eps, 2)
        cov = ds.v.T @ ds.v / len(ds.v)
        target = eps**2 / d * np.eye(d)
        assert np.all(np.abs(cov - target) <= 0.05 * eps**2 / d)

    def test_nonpositive_epsilon_rejected(self):
        with pytest.raises(ValueError, match="epsilon"):
            sample_direction(4, 2, 0.0, 0)

    def test_deterministic_under_seed(self):
        assert np.array_equal(unit_dirs(16, 2, 0.1, 5).v, unit_dirs(16, 2, 0.1, 5).v)

    def test_with_epsilon_rescales_exactly(self):
        ds = unit_dirs(8, 2, 0.1, 3)
        half = ds.with_epsilon(0.05)
        np.testing.assert_allclose(np.linalg.norm(half.v, axis=1), 0.05, rtol=1e-12)
        np.testing.assert_allclose(half.v, ds.v / 2, rtol=1e-12)


class TestExactSm:
    def test_closed_form_on_quadratic(self, quad):
        est = sm_exact(quad, np.array([[1.0, 0.0]]))
        assert est.value == pytest.approx(-1.5, abs=1e-12)  # tr(-I) + 0.5|x|^2

    def test_energy_offset_leaves_value_unchanged(self, quad):
        x = np.random.default_rng(0).normal(size=(8, 2))
        base = sm_exact(quad, x).value
        shifted = sm_exact(ShiftedEnergyModel(quad, 5.0), x).value
        assert shifted == base

    def test_constant_energy_model_gives_zero(self):
        flat = QuadraticEnergyModel(dim=2, scale=0.0)
        est = sm_exact(flat, np.ones((4, 2)))
        assert est.value == 0.0


class TestSsmFamily:
    def test_ssm_closed_form_on_quadratic(self, quad):
        dirs = DirectionSample(np.array([[0.1, 0.0]]), 0.1)
        est = ssm(quad, np.array([[1.0, 0.0]]), dirs)
        assert est.value == pytest.approx(-0.5, abs=1e-12)

    def test_fd_ssm_equals_ssm_on_quadratic(self, quad):
        dirs = DirectionSample(np.array([[0.1, 0.0]]), 0.1)
        x = np.array([[1.0, 0.0]])
        assert fd_ssm(quad, x, dirs).value == pytest.approx(ssm(quad, x, dirs).value, abs=1e-10)

    def test_fd_ssm_zero_on_constant_energy(self):
        flat = QuadraticEnergyModel(dim=2, scale=0.0)
        dirs = unit_dirs(4, 2, 0.1, 0)
        assert fd_ssm(flat, np.ones((4, 2)), dirs).value == 0.0

    def test_v_parity(self, mlp):
        x = np.random.default_rng(1).normal(size=(16, 2))
        dirs = unit_dirs(16, 2, 0.1, 2)
        for fn in (ssm, fd_ssm):
            assert fn(mlp, x, dirs).value == fn(mlp, x, dirs.negated()).value

    def test_scale_invariance_with_rescaled_divisor(self, mlp):
        x = np.random.default_rng(2).normal(size=(16, 2))
        dirs = unit_dirs(16, 2, 0.1, 3)
        base = ssm(mlp, x, dirs).value
        for factor in (0.5, 2.0, 7.0):
            rescaled = DirectionSample(dirs.v * factor, dirs.epsilon * factor)
            assert ssm(mlp, x, rescaled).value == pytest.approx(base, rel=1e-10)

    def test_ssmvr_closed_form_linear_score(self):
        model = LinearScoreModel()
        dirs = DirectionSample(np.array([[0.1, 0.0]]), 0.1)
        est = ssmvr(model, np.array([[1.0, 0.0]]), dirs)
        assert est.value == pytest.approx(-0.75, abs=1e-12)

    def test_fd_ssmvr_equals_ssmvr_for_linear_score(self):
        model = LinearScoreModel()
        x = np.random.default_rng(3).normal(size=(8, 2))
        for eps in (0.1, 0.01):
            dirs = unit_dirs(8, 2, eps, 4)
            a = fd_ssmvr(model, x, dirs).value
            b = ssmvr(model, x, dirs).value
            assert a == pytest.approx(b, rel=1e-9)

    def test_ssmvr_zero_for_zero_score(self):
        class ZeroScore(LinearScoreModel):
            def score(self, t):
                return t_scale(t, 0.0)

        dirs = unit_dirs(4, 2, 0.1, 0)
        assert ssmvr(ZeroScore(), np.ones((4, 2)), dirs).value == 0.0
        assert fd_ssmvr(ZeroScore(), np.ones((4, 2)), dirs).value == 0.0

    def test_ssmvr_value_independent_of_eps_for_linear_score(self):
        model = LinearScoreModel()
        x = np.random.default_rng(5).normal(size=(8, 2))
        base = unit_dirs(8, 2, 0.1, 6)
        vals = [ssmvr(model, x, base.with_epsilon(e)).value for e in EPS_GRID]
        np.testing.assert_allclose(vals, vals[0], rtol=1e-10)


class TestDsmFamily:
    def test_dsm_cancellation_on_quadratic(self):
        q1 = QuadraticEnergyModel(dim=1)
        est = dsm(q1, np.array([[0.0]]), sigma=1.0, noise=np.array([[0.5]]))
        assert est.value == pytest.approx(0.0, abs=1e-15)

    def test_dsm_nonnegative(self, mlp):
        x = np.random.default_rng(0).normal(size=(16, 2))
        assert dsm(mlp, x, sigma=0.1, rng=0).value >= 0.0

    def test_dsm_zero_score_model_matches_noise_magnitude(self):
        flat = QuadraticEnergyModel(dim=2, scale=0.0)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(64, 2))
        z = rng.standard_normal((64, 2))
        sigma = 0.5
        est = dsm(flat, x, sigma=sigma, noise=z)
        want = np.mean(np.sum((z / sigma) ** 2, axis=-1)) / 2
        assert est.value == pytest.approx(want, rel=1e-12)

    def test_fd_dsm_cancellation_on_quadratic(self, quad):
        rng = np.random.default_rng(8)
        x = np.zeros((8, 2))
        dirs = unit_dirs(8, 2, 0.1, 9)
        est = fd_dsm(quad, x, sigma=1.0, directions=dirs, noise=rng.standard_normal((8, 2)))
        assert est.value == pytest.approx(0.0, abs=1e-20)

    def test_dsm_sliced_cancellation_on_quadratic(self, quad):
        rng = np.random.default_rng(9)
        dirs = unit_dirs(8, 2, 0.1, 10)
        est = dsm_sliced(quad, np.zeros((8, 2)), 1.0, dirs, noise=rng.standard_normal((8, 2)))
        assert est.value == pytest.approx(0.0, abs=1e-25)

    def test_fd_dsm_nonnegative(self, mlp):
        x = np.random.default_rng(1).normal(size=(16, 2))
        dirs = unit_dirs(16, 2, 0.05, 2)
        assert fd_dsm(mlp, x, sigma=0.1, directions=dirs, rng=3).value >= 0.0

    def test_v_parity_with_shared_noise(self, mlp):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(16, 2))
        z = rng.standard_normal((16, 2))
        dirs = unit_dirs(16, 2, 0.1, 5)
        for fn in (dsm_sliced, fd_dsm):
            a = fn(mlp, x, 0.1, dirs, noise=z).value
            b = fn(mlp, x, 0.1, dirs.negated(), noise=z).value
            assert a == b

    def test_sigma_must_be_positive(self, mlp):
        with pytest.raises(ValueError, match="sigma"):
            dsm(mlp, np.ones((2, 2)), sigma=0.0, rng=0)

    def test_dsm_matches_mean_of_sliced_over_directions(self, mlp):
        # E_v[dsm_sliced] = dsm via E[vv^T] = eps^2 I / d, checked in MC
        rng = np.random.default_rng(11)
        x = rng.normal(size=(4, 2))
        z = rng.standard_normal((4, 2))
        full = dsm(mlp, x, 0.1, noise=z).value
        draws = np.array([
            dsm_sliced(mlp, x, 0.1, unit_dirs(4, 2, 0.05, seed), noise=z).value
            for seed in range(400)
        ])
        se = draws.std(ddof=1) / np.sqrt(len(draws))
        assert abs(draws.mean() - full) < 4 * se + 1e-3 * abs(full)


class TestPartitionCancellation:
    @pytest.mark.parametrize("shift", [1.0, -1.0, 100.0, -100.0])
    def test_energy_offset_changes_nothing(self, mlp, shift):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(16, 2))
        z = rng.standard_normal((16, 2))
        dirs = unit_dirs(16, 2, 0.1, 7)
        shifted = ShiftedEnergyModel(mlp, shift)
        checks = [
            (sm_exact(mlp, x).value, sm_exact(shifted, x).value),
            (ssm(mlp, x, dirs).value, ssm(shifted, x, dirs).value),
            (dsm(mlp, x, 0.1, noise=z).value, dsm(shifted, x, 0.1, noise=z).value),
            (
                dsm_sliced(mlp, x, 0.1, dirs, noise=z).value,
                dsm_sliced(shifted, x, 0.1, dirs, noise=z).value,
            ),
            (fd_ssm(mlp, x, dirs).value, fd_ssm(shifted, x, dirs).value),
            (
                fd_dsm(mlp, x, 0.1, dirs, noise=z).value,
                fd_dsm(shifted, x, 0.1, dirs, noise=z).value,
            ),
            (mpf_naive(mlp, x, dirs).value, mpf_naive(shifted, x, dirs).value),
        ]
        for base, moved in checks:
            assert abs(moved - base) < 1e-10


class TestConsistencySweeps:
    def test_fd_ssm_error_order(self, mlp):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(32, 2))
        base = unit_dirs(32, 2, 0.1, 13)
        errs = [
            abs(fd_ssm(mlp, x, base.with_epsilon(e)).value - ssm(mlp, x, base.with_epsilon(e)).value)
            for e in EPS_GRID
        ]
        slope = np.polyfit(np.log(EPS_GRID), np.log(errs), 1)[0]
        assert 1.8 <= slope <= 2.2

    def test_fd_dsm_error_order(self, mlp):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(32, 2))
        z = rng.standard_normal((32, 2))
        base = unit_dirs(32, 2, 0.1, 15)
        errs = [
            abs(
                fd_dsm(mlp, x, 0.1, base.with_epsilon(e), noise=z).value
                - dsm_sliced(mlp, x, 0.1, base.with_epsilon(e), noise=z).value
            )
            for e in EPS_GRID
        ]
        slope = np.polyfit(np.log(EPS_GRID), np.log(errs), 1)[0]
        assert 1.8 <= slope <= 2.2

    def test_fd_ssmvr_error_order(self, score_mlp):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(32, 2))
        base = unit_dirs(32, 2, 0.1, 17)
        errs = [
            abs(
                fd_ssmvr(score_mlp, x, base.with_epsilon(e)).value
                - ssmvr(score_mlp, x, base.with_epsilon(e)).value
            )
            for e in EPS_GRID
        ]
        slope = np.polyfit(np.log(EPS_GRID), np.log(errs), 1)[0]
        assert 1.8 <= slope <= 2.2


class TestMpfNaive:
    def test_zero_on_constant_energy(self):
        flat = QuadraticEnergyModel(dim=2, scale=0.0)
        dirs = unit_dirs(4, 2, 0.1, 0)
        assert mpf_naive(flat, np.ones((4, 2)), dirs).value == 0.0

    def test_offset_invariance(self, mlp):
        x = np.random.default_rng(1).normal(size=(8, 2))
        dirs = unit_dirs(8, 2, 0.1, 2)
        a = mpf_naive(mlp, x, dirs).value
        b = mpf_naive(ShiftedEnergyModel(mlp, 3.0), x, dirs).value
        assert abs(a - b) < 1e-10

    def test_gap_to_ssm_shrinks_on_quadratic(self, quad):
        # one-sided FD keeps odd terms, so the batch must be antithetic
        # for the finite-sample gap to mirror the o(1) expectation claim
        rng = np.random.default_rng(18)
        x_half = rng.normal(size=(8, 2))
        gaps = []
        for eps in EPS_GRID:
            x, dirs = antithetic_pairs(x_half, eps, 19)
            gaps.append(abs(mpf_naive(quad, x, dirs).value - ssm(quad, x, dirs).value))
        inversions = sum(1 for a, b in zip(gaps, gaps[1:]) if b > a)
        assert inversions <= 1
        assert gaps[-1] < gaps[0]


class TestCounters:
    def test_fd_ssm_counter_contract(self, mlp):
        x = np.random.default_rng(0).normal(size=(8, 2))
        dirs = unit_dirs(8, 2, 0.1, 1)
        est = fd_ssm(mlp, x, dirs)
        parameter_gradients(est, mlp.params)
        c = est.counters
        assert c.forward_evals == 3 * 8
        assert c.nested_passes == 0
        assert c.first_order_passes == 1
        assert c.max_tape_depth == 1

    def test_ssm_counter_contract(self, mlp):
        x = np.random.default_rng(0).normal(size=(8, 2))
        dirs = unit_dirs(8, 2, 0.1, 1)
        est = ssm(mlp, x, dirs)
        parameter_gradients(est, mlp.params)
        c = est.counters
        assert c.forward_evals == 8
        assert c.nested_passes >= 1
        assert c.max_tape_depth == 3

    def test_dsm_family_nested_contract(self, mlp, score_mlp):
        x = np.random.default_rng(0).normal(size=(4, 2))
        dirs = unit_dirs(4, 2, 0.1, 1)
        for est, model in [
            (dsm(mlp, x, 0.1, rng=0), mlp),
            (dsm_sliced(mlp, x, 0.1, dirs, rng=0), mlp),
            (ssmvr(score_mlp, x, dirs), score_mlp),
        ]:
            parameter_gradients(est, model.params)
            assert est.counters.nested_passes >= 1

    def test_fd_family_has_zero_nested_passes(self, mlp, score_mlp):
        x = np.random.default_rng(0).normal(size=(4, 2))
        dirs = unit_dirs(4, 2, 0.1, 1)
        for est, model in [
            (fd_dsm(mlp, x, 0.1, dirs, rng=0), mlp),
            (fd_ssmvr(score_mlp, x, dirs), score_mlp),
            (mpf_naive(mlp, x, dirs), mlp),
        ]:
            parameter_gradients(est, model.params)
            assert est.counters.nested_passes == 0
            assert est.counters.max_tape_depth == 1

    def test_sm_exact_trace_costs_d_nested_passes(self, mlp):
        x = np.random.default_rng(0).normal(size=(4, 2))
        est = sm_exact(mlp, x)
        assert est.counters.nested_passes == 2
        assert est.counters.max_tape_depth == 3


class TestGradAngle:
    def test_identical_objectives_zero_angle(self, mlp):
        x = np.random.default_rng(0).normal(size=(8, 2))
        dirs = unit_dirs(8, 2, 0.1, 1)
        assert grad_angle("ssm", "ssm", mlp, x, dirs) == 0.0

    def test_quadratic_learnable_fd_matches_ssm(self):
        q = QuadraticEnergyModel(dim=2, learnable=True)
        x = np.random.default_rng(2).normal(size=(8, 2))
        dirs = unit_dirs(8, 2, 0.1, 3)
        assert grad_angle("fd-ssm", "ssm", q, x, dirs) < 1e-6

    def test_small_angle_on_random_mlp_at_eps_001(self, mlp):
        x = np.random.default_rng(4).normal(size=(16, 2))
        dirs = unit_dirs(16, 2, 0.01, 5)
        assert grad_angle("fd-ssm", "ssm", mlp, x, dirs) < 5.0

    def test_angle_decreases_as_eps_halves(self, mlp):
        x = np.random.default_rng(6).normal(size=(16, 2))
        base = unit_dirs(16, 2, 0.1, 7)
        angles = [
            grad_angle("fd-ssm", "ssm", mlp, x, base.with_epsilon(e)) for e in EPS_GRID
        ]
        inversions = sum(1 for a, b in zip(angles, angles[1:]) if b > a)
        assert inversions <= 1
        assert angles[-1] < angles[0]

    def test_zero_gradient_names_the_failing_side(self):
        flat = MlpEnergyModel((2, 4, 1), seed=0)
        for p in flat.params:
            p.value[...] = 0.0
        x = np.ones((4, 2))
        dirs = unit_dirs(4, 2, 0.1, 0)
        with pytest.raises(ZeroGradientError, match="objective-a"):
            grad_angle("ssm", "fd-ssm", flat, x, dirs)


class TestRegistry:
    def test_all_names_resolve(self):
        for name in ("sm", "dsm", "dsm-sliced", "ssm", "ssmvr", "fd-ssm", "fd-dsm",
                     "fd-ssmvr", "mpf-naive"):
            info = objective_info(name)
            assert info.name == name

    def test_unknown_name_lists_tokens(self):
        with pytest.raises(ValueError, match="fd-ssm"):
            objective_info("nce")

    def test_evaluate_objective_enforces_requirements(self, mlp):
        x = np.ones((2, 2))
        with pytest.raises(ValueError, match="directions"):
            evaluate_objective("ssm", mlp, x)
        with pytest.raises(ValueError, match="sigma"):
            evaluate_objective("fd-dsm", mlp, x, directions=unit_dirs(2, 2, 0.1, 0))
