import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpabc.kernels import (
    MLP,
    SE,
    KernelSpec,
    gram,
    gram_with_log_grads,
    kernel_deriv_first,
    kernel_deriv_mixed,
    kernel_eval,
)


def _kernel_ref(spec, t, tp):
    """Independent extended-precision evaluation of the kernel formulas.

    The finite-difference oracles difference this in float80 so that the
    mixed second difference at step 1e-5 is not drowned by float64
    cancellation noise.
    """
    t, tp = np.longdouble(t), np.longdouble(tp)
    if spec.family == "se":
        r = t - tp
        return np.longdouble(spec.variance) * np.exp(-0.5 * r * r / np.longdouble(spec.lengthscale_sq))
    p, b = np.longdouble(spec.weight_variance), np.longdouble(spec.bias_variance)
    z = (p * t * tp + b) / np.sqrt((p * t * t + b + 1) * (p * tp * tp + b + 1))
    return np.longdouble(spec.variance) * 2 / np.longdouble(np.pi) * np.arcsin(z)


def fd_first(spec, t, tp, h=1e-5):
    """Central finite difference in the first argument."""
    h = np.longdouble(h)
    return float((_kernel_ref(spec, t + h, tp) - _kernel_ref(spec, t - h, tp)) / (2 * h))


def fd_mixed(spec, t, tp, h=1e-5):
    """Second-order central finite difference in both arguments."""
    h = np.longdouble(h)
    return float(
        (
            _kernel_ref(spec, t + h, tp + h)
            - _kernel_ref(spec, t + h, tp - h)
            - _kernel_ref(spec, t - h, tp + h)
            + _kernel_ref(spec, t - h, tp - h)
        )
        / (4 * h * h)
    )


def random_spec(rng):
    if rng.random() < 0.5:
        return KernelSpec.se(10 ** rng.uniform(-1, 1), 10 ** rng.uniform(-1, 1))
    return KernelSpec.mlp(
        10 ** rng.uniform(-1, 1), 10 ** rng.uniform(-1, 1), 10 ** rng.uniform(-2, 1)
    )


class TestKernelEval:
    def test_se_at_coincident_inputs_equals_variance(self):
        spec = KernelSpec.se(1.0, 1.0)
        assert kernel_eval(spec, 0.0, 0.0) == pytest.approx(1.0, abs=0)

    def test_se_unit_separation(self):
        spec = KernelSpec.se(1.0, 1.0)
        assert kernel_eval(spec, 0.0, 1.0) == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_mlp_closed_form_point(self):
        # Z = 1/2 so k = (2/pi) asin(1/2) = 1/3
        spec = KernelSpec.mlp(1.0, 1.0, 0.0)
        assert kernel_eval(spec, 1.0, 1.0) == pytest.approx(1.0 / 3.0, rel=1e-12)

    def test_nonfinite_inputs_rejected(self):
        spec = KernelSpec.se(1.0, 1.0)
        with pytest.raises(ValueError):
            kernel_eval(spec, np.nan, 0.0)
        with pytest.raises(ValueError):
            kernel_eval(spec, 0.0, np.inf)

    def test_se_positive_and_bounded_by_variance(self):
        rng = np.random.default_rng(0)
        spec = KernelSpec.se(2.5, 0.7)
        for _ in range(200):
            t, tp = rng.uniform(-5, 5, size=2)
            v = kernel_eval(spec, t, tp)
            assert 0 < v <= 2.5 + 1e-15

    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_symmetry_se(self, t, tp):
        spec = KernelSpec.se(1.3, 0.8)
        assert kernel_eval(spec, t, tp) == pytest.approx(kernel_eval(spec, tp, t), rel=1e-14)

    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_symmetry_mlp(self, t, tp):
        spec = KernelSpec.mlp(0.9, 0.4, 1.1)
        assert kernel_eval(spec, t, tp) == pytest.approx(kernel_eval(spec, tp, t), rel=1e-14)

    @given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20))
    def test_se_stationarity(self, t, tp, shift):
        spec = KernelSpec.se(1.7, 2.3)
        assert kernel_eval(spec, t + shift, tp + shift) == pytest.approx(
            kernel_eval(spec, t, tp), rel=1e-9
        )


class TestKernelDerivatives:
    def test_se_first_deriv_vanishes_at_coincident_inputs(self):
        spec = KernelSpec.se(1.0, 1.0)
        assert kernel_deriv_first(spec, 0.3, 0.3) == 0.0

    def test_se_first_deriv_closed_form(self):
        spec = KernelSpec.se(1.0, 1.0)
        assert kernel_deriv_first(spec, 1.0, 0.0) == pytest.approx(-np.exp(-0.5), rel=1e-12)

    def test_mlp_first_deriv_matches_finite_difference(self):
        spec = KernelSpec.mlp(1.0, 1.0, 1.0)
        got = kernel_deriv_first(spec, 0.5, 1.0)
        assert got == pytest.approx(fd_first(spec, 0.5, 1.0), abs=1e-6)

    def test_se_mixed_deriv_closed_form(self):
        spec = KernelSpec.se(1.0, 1.0)
        assert kernel_deriv_mixed(spec, 0.5, 0.5) == pytest.approx(1.0, rel=1e-12)
        assert kernel_deriv_mixed(spec, 1.0, 0.0) == pytest.approx(0.0, abs=1e-12)

    def test_derivatives_match_finite_differences_1000_cases(self):
        rng = np.random.default_rng(1234)
        for _ in range(1000):
            spec = random_spec(rng)
            t, tp = rng.uniform(-3, 3, size=2)
            d1, d1_fd = kernel_deriv_first(spec, t, tp), fd_first(spec, t, tp)
            dm, dm_fd = kernel_deriv_mixed(spec, t, tp), fd_mixed(spec, t, tp)
            assert abs(d1 - d1_fd) <= 1e-4 * max(abs(d1), abs(d1_fd), 1e-6)
            assert abs(dm - dm_fd) <= 1e-4 * max(abs(dm), abs(dm_fd), 1e-6)

    def test_mixed_deriv_symmetric(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            spec = random_spec(rng)
            t, tp = rng.uniform(-3, 3, size=2)
            assert kernel_deriv_mixed(spec, t, tp) == pytest.approx(
                kernel_deriv_mixed(spec, tp, t), rel=1e-10, abs=1e-12
            )


class TestGram:
    def test_plain_two_point_grid(self):
        spec = KernelSpec.se(1.0, 1.0)
        k = gram(spec, [0.0, 1.0], [0.0, 1.0], "plain")
        e = np.exp(-0.5)
        assert np.allclose(k, [[1.0, e], [e, 1.0]], rtol=1e-14)

    def test_d_left_zero_diagonal_for_se(self):
        spec = KernelSpec.se(2.0, 0.5)
        grid = np.linspace(-1, 3, 7)
        d = gram(spec, grid, grid, "d_left")
        assert np.all(np.diag(d) == 0.0)

    def test_d_mixed_psd_on_equispaced_grid(self):
        spec = KernelSpec.se(1.0, 1.0)
        grid = np.linspace(0, 4, 5)
        m = gram(spec, grid, grid, "d_mixed")
        assert np.min(np.linalg.eigvalsh(m)) >= -1e-10

    def test_entries_match_scalar_operations(self):
        rng = np.random.default_rng(5)
        spec = random_spec(rng)
        ta, tb = rng.uniform(-2, 2, 4), rng.uniform(-2, 2, 3)
        for mode, scalar in [
            ("plain", kernel_eval),
            ("d_left", kernel_deriv_first),
            ("d_mixed", kernel_deriv_mixed),
        ]:
            m = gram(spec, ta, tb, mode)
            for i in range(4):
                for j in range(3):
                    assert m[i, j] == pytest.approx(scalar(spec, ta[i], tb[j]), rel=1e-14)

    def test_psd_on_random_grids(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            spec = random_spec(rng)
            grid = np.sort(rng.uniform(-3, 3, size=rng.integers(2, 51)))
            for mode in ("plain", "d_mixed"):
                m = gram(spec, grid, grid, mode)
                w = np.linalg.eigvalsh(m)
                assert w.min() >= -1e-8 * max(w.max(), 1e-12)

    def test_empty_grid_rejected(self):
        spec = KernelSpec.se(1.0, 1.0)
        with pytest.raises(ValueError):
            gram(spec, [], [0.0], "plain")

    def test_unknown_mode_rejected(self):
        spec = KernelSpec.se(1.0, 1.0)
        with pytest.raises(ValueError):
            gram(spec, [0.0], [0.0], "d_right")


class TestLogParamGrads:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            spec = random_spec(rng)
            times = np.sort(rng.uniform(0, 3, 5))
            _, grads = gram_with_log_grads(spec, times)
            lp = spec.log_params()
            for idx, name in enumerate(spec.param_names()):
                h = 1e-6
                up, dn = lp.copy(), lp.copy()
                up[idx] += h
                dn[idx] -= h
                k_up = gram(KernelSpec.from_log_params(spec.family, up), times, times)
                k_dn = gram(KernelSpec.from_log_params(spec.family, dn), times, times)
                fd = (k_up - k_dn) / (2 * h)
                assert np.allclose(grads[name], fd, rtol=1e-5, atol=1e-8), name


class TestKernelSpecValidation:
    def test_nonpositive_hyperparameters_rejected(self):
        with pytest.raises(ValueError):
            KernelSpec.se(0.0, 1.0)
        with pytest.raises(ValueError):
            KernelSpec.se(1.0, -1.0)
        with pytest.raises(ValueError):
            KernelSpec.mlp(1.0, 0.0, 0.1)
        with pytest.raises(ValueError):
            KernelSpec.mlp(1.0, 1.0, -0.1)

    def test_zero_bias_variance_allowed(self):
        KernelSpec.mlp(1.0, 1.0, 0.0)

    def test_log_param_round_trip(self):
        spec = KernelSpec.mlp(0.3, 2.0, 0.7)
        again = KernelSpec.from_log_params(MLP, spec.log_params())
        assert again == spec
        spec = KernelSpec.se(0.3, 2.0)
        assert KernelSpec.from_log_params(SE, spec.log_params()) == spec
