import numpy as np
import pytest

from gpabc.dynamics import (
    CASCADE,
    DATASET_PROTOCOLS,
    HES1,
    LOTKA_VOLTERRA,
    IntegrationError,
    ModelRHSError,
    ModelSpec,
    TimeSeriesDataset,
    generate_dataset,
    generate_reference_dataset,
    get_model,
    integrate_dde,
    integrate_ode,
    load_dataset,
    rhs_eval,
    save_dataset,
)


def make_model(name, rhs, dim=1, delayed=False, **kw):
    """Minimal test model with dummy priors."""
    return ModelSpec(
        name=name,
        state_dim=dim,
        param_dim=2,
        rhs=rhs,
        prior_lows=np.zeros(2),
        prior_highs=np.ones(2) * 2,
        true_params=np.array([1.0, 1.0]),
        initial_state=np.ones(dim),
        param_names=("a", "td"),
        state_names=tuple(f"x{i}" for i in range(dim)),
        is_delayed=delayed,
        delay_param_index=1 if delayed else None,
        **kw,
    )


DECAY = make_model("decay", lambda s, d, p: -s)
DECAY_AS_DDE = make_model("decay-dde", lambda s, d, p: -s, delayed=True)
ZERO_FIELD = make_model("zero", lambda s, d, p: np.zeros_like(s))


class TestRhsEval:
    def test_lotka_volterra_hand_evaluation(self):
        v = rhs_eval(LOTKA_VOLTERRA, [1.0, 0.5], [1.0, 0.5], [1.0, 1.0])
        assert np.allclose(v, [0.5, 0.0], atol=1e-15)

    def test_hes1_hand_evaluation(self):
        v = rhs_eval(HES1, [3.0, 3.0], [3.0, 3.0], [0.03, 0.03, 100.0, 25.0])
        expected_mu = 1.0 / (1.0 + (3.0 / 100.0) ** 5) - 0.09
        assert v[0] == pytest.approx(expected_mu, rel=1e-12)
        assert v[1] == pytest.approx(2.91, rel=1e-12)

    def test_cascade_hand_evaluation(self):
        v = rhs_eval(
            CASCADE,
            [1.0, 0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 1.0, 0.0, 0.0],
            [0.07, 0.6, 0.05, 0.3, 0.017, 0.3],
        )
        assert np.allclose(v, [-0.67, 0.07, -0.6, 0.6, 0.0], atol=1e-15)

    def test_cascade_zero_denominator_reports_params(self):
        params = [0.07, 0.6, 0.05, 0.3, 0.017, 0.0]
        with pytest.raises(ModelRHSError, match="0.017"):
            rhs_eval(CASCADE, [1.0, 0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 1.0, 0.0, 0.0], params)

    def test_purity(self):
        args = ([0.7, 1.3], [0.7, 1.3], [1.2, 0.8])
        first = rhs_eval(LOTKA_VOLTERRA, *args)
        for _ in range(5):
            assert np.array_equal(rhs_eval(LOTKA_VOLTERRA, *args), first)

    def test_vectorized_over_time_axis(self):
        states = np.array([[1.0, 2.0, 0.5], [0.5, 1.0, 2.0]])
        v = rhs_eval(LOTKA_VOLTERRA, states, states, [1.0, 1.0])
        assert v.shape == states.shape
        for j in range(3):
            assert np.allclose(
                v[:, j], rhs_eval(LOTKA_VOLTERRA, states[:, j], states[:, j], [1.0, 1.0])
            )

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            rhs_eval(LOTKA_VOLTERRA, [1.0], [1.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            rhs_eval(LOTKA_VOLTERRA, [1.0, 1.0], [1.0, 1.0], [1.0])


class TestIntegrateOde:
    def test_exponential_decay_analytic(self):
        traj = integrate_ode(DECAY, [1.0, 0.0], [1.0], np.linspace(0, 1, 5))
        assert abs(traj.states[0, -1] - np.exp(-1.0)) <= 1e-6

    def test_zero_field_constant_trajectory(self):
        traj = integrate_ode(ZERO_FIELD, [1.0, 0.0], [0.7], np.linspace(0, 5, 9))
        assert np.allclose(traj.states, 0.7, atol=0)

    def test_lv_self_convergence(self):
        grid = np.linspace(0, 10, 11)
        a = integrate_ode(LOTKA_VOLTERRA, [1.0, 1.0], [1.0, 0.5], grid, rtol=1e-6)
        b = integrate_ode(LOTKA_VOLTERRA, [1.0, 1.0], [1.0, 0.5], grid, rtol=5e-7)
        assert np.max(np.abs(a.states[:, -1] - b.states[:, -1])) <= 1e-5

    @pytest.mark.parametrize(
        "model,params,x0,grid",
        [
            (LOTKA_VOLTERRA, [1.0, 1.0], [1.0, 0.5], np.linspace(0, 10, 11)),
            (
                CASCADE,
                CASCADE.true_params,
                CASCADE.initial_state,
                DATASET_PROTOCOLS["cascade"]["t_grid"],
            ),
        ],
    )
    def test_monotone_convergence(self, model, params, x0, grid):
        ref = integrate_ode(model, params, x0, grid, rtol=1e-10, atol=1e-12)
        errs = [
            np.max(
                np.abs(integrate_ode(model, params, x0, grid, rtol=rt, atol=rt * 1e-2).states - ref.states)
            )
            for rt in (1e-3, 1e-5, 1e-7)
        ]
        assert errs[0] > errs[1] > errs[2]

    def test_blowup_raises_integration_error(self):
        grow = make_model("grow", lambda s, d, p: s * s)
        with pytest.raises(IntegrationError):
            integrate_ode(grow, [1.0, 0.0], [1.0], np.linspace(0, 10, 5))

    def test_delayed_model_rejected(self):
        with pytest.raises(ValueError):
            integrate_ode(HES1, HES1.true_params, [3.0, 3.0], np.linspace(0, 10, 5))


class TestIntegrateDde:
    def test_piecewise_exact_solution(self):
        # x' = -x(t - 1), constant history 1: linear then quadratic pieces
        lagged = make_model("lagged", lambda s, d, p: -d, delayed=True)
        grid = np.linspace(0, 2, 9)
        traj = integrate_dde(lagged, [0.0, 1.0], [1.0], grid, rtol=1e-8, atol=1e-10)

        def exact(t):
            return 1.0 - t if t <= 1 else (t**2 / 2 - 2 * t) - (0.5 - 2.0)

        assert np.max(np.abs(traj.states[0] - [exact(t) for t in grid])) <= 1e-8

    def test_hes1_paper_trajectory_stats(self):
        # the reference experiment reports the per-dimension standard
        # deviations of the noiseless samples as 6.0020 and 121.7670
        traj = integrate_dde(HES1, HES1.true_params, [3.0, 3.0], np.linspace(0, 300, 151))
        sd = np.std(traj.states, axis=1, ddof=1)
        assert sd[0] == pytest.approx(6.0020, rel=5e-3)
        assert sd[1] == pytest.approx(121.7670, rel=5e-3)
        assert np.all(traj.states > 0)
        assert np.all(np.isfinite(traj.states))

    def test_delay_independent_rhs_matches_ode(self):
        grid = np.linspace(0, 3, 7)
        dde = integrate_dde(DECAY_AS_DDE, [0.0, 0.7], [1.0], grid)
        ode = integrate_ode(DECAY, [1.0, 0.0], [1.0], grid)
        assert np.max(np.abs(dde.states - ode.states)) <= 10 * 1e-6

    def test_hes1_self_convergence(self):
        grid = np.linspace(0, 300, 151)
        a = integrate_dde(HES1, HES1.true_params, [3.0, 3.0], grid, rtol=1e-6)
        b = integrate_dde(HES1, HES1.true_params, [3.0, 3.0], grid, rtol=5e-7)
        rel = np.max(np.abs(a.states[:, -1] - b.states[:, -1]) / np.abs(b.states[:, -1]))
        assert rel <= 1e-4

    def test_nonpositive_delay_is_rejection(self):
        with pytest.raises(IntegrationError):
            integrate_dde(HES1, [0.03, 0.03, 100.0, 0.0], [3.0, 3.0], np.linspace(0, 300, 151))
        with pytest.raises(IntegrationError):
            integrate_dde(HES1, [0.03, 0.03, 100.0, -5.0], [3.0, 3.0], np.linspace(0, 300, 151))

    def test_tiny_delay_hits_budget_not_hang(self):
        with pytest.raises(IntegrationError):
            integrate_dde(HES1, [0.03, 0.03, 100.0, 1e-9], [3.0, 3.0], np.linspace(0, 300, 151))

    def test_non_delayed_model_rejected(self):
        with pytest.raises(ValueError):
            integrate_dde(LOTKA_VOLTERRA, [1.0, 1.0], [1.0, 0.5], np.linspace(0, 10, 11))


class TestGenerateDataset:
    def test_deterministic_given_seed(self):
        a = generate_reference_dataset("lotka-volterra", seed=7)
        b = generate_reference_dataset("lotka-volterra", seed=7)
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.times, b.times)

    def test_different_seeds_differ(self):
        a = generate_reference_dataset("lotka-volterra", seed=1)
        b = generate_reference_dataset("lotka-volterra", seed=2)
        assert not np.array_equal(a.observations, b.observations)

    def test_lv_protocol(self):
        ds = generate_reference_dataset("lotka-volterra", seed=1)
        assert ds.times.shape == (11,)
        assert ds.observations.shape == (2, 11)
        assert np.allclose(ds.noise_sd_true, 0.5)

    def test_hes1_relative_noise_rule(self):
        ds = generate_reference_dataset("hes1", seed=1)
        assert ds.observations.shape == (2, 151)
        traj = integrate_dde(HES1, HES1.true_params, [3.0, 3.0], ds.times)
        assert np.allclose(ds.noise_sd_true, 0.1 * np.std(traj.states, axis=1, ddof=1))

    def test_cascade_protocol(self):
        ds = generate_reference_dataset("cascade", seed=3)
        assert ds.observations.shape == (5, 15)
        assert ds.times[0] == 0.0 and ds.times[-1] == 100.0
        assert np.allclose(ds.noise_sd_true, 0.1)

    def test_absolute_noise_statistics(self):
        # noise realization matches the requested scale
        grid = np.linspace(0, 10, 201)
        ds = generate_dataset(ZERO_FIELD, [1.0, 0.0], [0.0], grid, ("absolute", 0.5), seed=0)
        assert 0.35 < np.std(ds.observations) < 0.65

    def test_csv_round_trip(self, tmp_path):
        ds = generate_reference_dataset("lotka-volterra", seed=5)
        csv_path, json_path = save_dataset(ds, tmp_path, stem="lv")
        assert csv_path.exists() and json_path.exists()
        loaded = load_dataset(csv_path)
        assert np.array_equal(loaded.times, ds.times)
        assert np.array_equal(loaded.observations, ds.observations)
        assert np.array_equal(loaded.noise_sd_true, ds.noise_sd_true)
        assert loaded.provenance["model"] == "lotka-volterra"
        assert loaded.provenance["seed"] == 5

    def test_csv_has_one_row_per_sample(self, tmp_path):
        ds = generate_reference_dataset("lotka-volterra", seed=1)
        csv_path, _ = save_dataset(ds, tmp_path)
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 1 + 11
        assert lines[0] == "t,x1,x2"


class TestModelRegistry:
    def test_known_models(self):
        for name in ("lotka-volterra", "hes1", "cascade"):
            m = get_model(name)
            assert m.name == name

    def test_unknown_model(self):
        with pytest.raises(KeyError, match="unknown model"):
            get_model("lorenz")

    def test_prior_bounds_validated(self):
        with pytest.raises(ValueError):
            make_model("bad", lambda s, d, p: s, dim=1).__class__(
                **{
                    **make_model("bad", lambda s, d, p: s).__dict__,
                    "prior_lows": np.array([1.0, 1.0]),
                    "prior_highs": np.array([0.0, 2.0]),
                }
            )

    def test_trajectory_times_validated(self):
        from gpabc.dynamics import Trajectory

        with pytest.raises(ValueError):
            Trajectory(times=np.array([0.0, 0.0, 1.0]), states=np.zeros((1, 3)))

    def test_dataset_shape_validated(self):
        with pytest.raises(ValueError):
            TimeSeriesDataset(times=np.array([0.0, 1.0]), observations=np.zeros((2, 3)))
