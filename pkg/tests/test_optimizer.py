import numpy as np
import pytest

from risbeam.channel import ChannelSample, gen_geometry, no_blockage_sample, normalize_problem
from risbeam.config import ScheduleConfig, StopConfig, load_config
from risbeam.errors import DegenerateError, SamplerExhaustedError, UsageError
from risbeam.optimizer import (
    TRACE_COLUMNS,
    BSGDOutMin,
    FixedSampler,
    RunTrace,
    SequenceSampler,
    StepSchedule,
    StopCriteria,
    StreamingSampler,
    TraceRecord,
    TrainingSetSampler,
    bsgd_outmin,
    channel_gain_objective,
    init_a,
    init_d,
    init_e,
    initial_state,
    make_sampler,
    project_a,
    project_d,
    project_e,
    step_size,
)
from risbeam.selftest import complex_normal, random_sample
from risbeam.surrogate import empirical_risk, hinge, lipschitz_constants, sinr_all


def _power(a_mat, d_mat):
    return np.linalg.norm(a_mat @ d_mat) ** 2


@pytest.fixture
def trained_setup(tiny_problem):
    """Tiny normalized problem whose targets put both users on the linear hinge branch."""
    config, geo, _ = tiny_problem
    h0 = no_blockage_sample(geo)
    state = initial_state(h0, config.n_rf, config.p_max, np.random.default_rng(0))
    targets = 3.0 * sinr_all(state, h0, 1.0)
    config = config.model_copy(update={"sinr_targets": targets.tolist()})
    return config, geo, h0, state


class TestProjectD:
    def test_on_boundary_is_unchanged(self, rng):
        a_mat = project_a(complex_normal(rng, (4, 2)))
        d_mat = project_d(complex_normal(rng, (2, 2)), a_mat, 3.0)
        np.testing.assert_allclose(project_d(d_mat, a_mat, 3.0), d_mat, rtol=1e-12)

    def test_identity_analog_precoder_halves(self, rng):
        z = complex_normal(rng, (3, 2))
        z *= 2.0 * np.sqrt(5.0) / np.linalg.norm(z)
        np.testing.assert_allclose(project_d(z, np.eye(3), 5.0), z / 2.0, rtol=1e-12)

    def test_full_power(self, rng):
        for _ in range(20):
            a_mat = project_a(complex_normal(rng, (6, 3)))
            d_mat = project_d(complex_normal(rng, (3, 2)), a_mat, 5.0)
            assert _power(a_mat, d_mat) == pytest.approx(5.0, rel=1e-12)

    def test_annihilated_candidate(self):
        with pytest.raises(DegenerateError):
            project_d(np.zeros((2, 2)), np.ones((4, 2)), 1.0)


class TestProjectA:
    def test_phase_is_preserved(self):
        np.testing.assert_allclose(project_a(np.array([[3 + 4j]])), [[0.6 + 0.8j]])

    def test_idempotent(self, rng):
        a_mat = project_a(complex_normal(rng, (4, 3)))
        np.testing.assert_allclose(project_a(a_mat), a_mat, rtol=0, atol=1e-12)

    def test_zero_entry_maps_to_one(self):
        assert project_a(np.zeros((1, 1), dtype=complex))[0, 0] == 1.0

    def test_entrywise_nearest_point(self, rng):
        z = complex_normal(rng, (5, 2))
        distance = np.abs(project_a(z) - z)
        np.testing.assert_allclose(distance, np.abs(np.abs(z) - 1.0), atol=1e-12)


class TestProjectE:
    def test_feasible_vector_is_unchanged(self):
        np.testing.assert_allclose(project_e(np.array([1j, 1.0])), [1j, 1.0])

    def test_global_scale_is_removed(self):
        np.testing.assert_allclose(project_e(np.array([2j, 2.0])), [1j, 1.0], atol=1e-15)

    def test_gauge_invariance(self, rng):
        z = complex_normal(rng, 9)
        e_vec = project_e(z)
        assert e_vec[-1] == 1
        np.testing.assert_allclose(np.abs(e_vec), 1.0, atol=1e-12)
        np.testing.assert_allclose(project_e((0.3 - 2.1j) * z), e_vec, atol=1e-12)

    def test_zero_last_entry(self):
        with pytest.raises(DegenerateError):
            project_e(np.array([1.0, 0.0], dtype=complex))


class TestInitE:
    def test_no_ris_elements(self, rng):
        sample = ChannelSample(ris_rows=np.zeros((1, 0, 4), dtype=complex), direct_rows=complex_normal(rng, (1, 4)))
        np.testing.assert_array_equal(init_e(sample), [1.0])

    def test_rank_one_converges_in_one_step(self, rng):
        u = complex_normal(rng, 6)
        sample = ChannelSample(ris_rows=u[:-1].reshape(1, 5, 1), direct_rows=u[-1:].reshape(1, 1))
        expected = np.exp(1j * np.angle(u / u[-1]))
        e_vec, history = init_e(sample, return_history=True)
        np.testing.assert_allclose(e_vec, expected, atol=1e-12)
        assert len(history) == 3
        assert history[2] == pytest.approx(history[1], rel=1e-12)

    def test_objective_is_nondecreasing(self, rng):
        for _ in range(20):
            sample = random_sample(rng, 4, 2, 9)
            _, history = init_e(sample, max_mm_iters=30, tol=0.0, return_history=True)
            steps = np.diff(history)
            assert np.all(steps >= -1e-9 * np.abs(history[:-1]))

    def test_history_matches_objective(self, rng):
        sample = random_sample(rng, 4, 2, 5)
        e_vec, history = init_e(sample, return_history=True)
        assert history[-1] == pytest.approx(channel_gain_objective(sample, e_vec), rel=1e-12)
        assert history[0] == pytest.approx(channel_gain_objective(sample, np.ones(5)), rel=1e-12)

    def test_zero_channel(self):
        sample = ChannelSample(ris_rows=np.zeros((2, 3, 4), dtype=complex), direct_rows=np.zeros((2, 4), dtype=complex))
        with pytest.raises(DegenerateError):
            init_e(sample)


class TestInitAD:
    def test_columns_follow_equivalent_channels(self, rng):
        sample = random_sample(rng, 4, 2, 5)
        e0 = init_e(sample)
        a0 = init_a(sample, e0, 2)
        for k in range(2):
            expected = np.exp(1j * np.angle(sample.h_eq[k].conj().T @ e0))
            np.testing.assert_allclose(a0[:, k], expected, atol=1e-12)

    def test_direct_only_gives_phase_aligned_beam(self, rng):
        direct = complex_normal(rng, (1, 8))
        sample = ChannelSample(ris_rows=np.zeros((1, 0, 8), dtype=complex), direct_rows=direct)
        a0 = init_a(sample, init_e(sample), 1)
        np.testing.assert_allclose(a0[:, 0], np.exp(1j * np.angle(direct[0].conj())), atol=1e-12)

    def test_extra_rf_chains(self, rng):
        sample = random_sample(rng, 6, 2, 5)
        e0 = init_e(sample)
        a0 = init_a(sample, e0, 4, np.random.default_rng(1))
        assert a0.shape == (6, 4)
        np.testing.assert_allclose(np.abs(a0), 1.0, atol=1e-12)
        np.testing.assert_array_equal(a0, init_a(sample, e0, 4, np.random.default_rng(1)))
        with pytest.raises(UsageError):
            init_a(sample, e0, 4)
        with pytest.raises(UsageError):
            init_a(sample, e0, 1)

    def test_digital_precoder_uses_full_power(self, rng):
        sample = random_sample(rng, 4, 2, 5)
        state = initial_state(sample, 2, 5.0)
        assert state.transmit_power == pytest.approx(5.0, rel=1e-12)
        state.check_feasible(5.0)

    def test_single_user_matched_filter(self, rng):
        sample = random_sample(rng, 6, 1, 5)
        e0 = init_e(sample)
        a0 = init_a(sample, e0, 3, rng)
        d0 = init_d(sample, a0, e0, 2.0)
        effective = a0.conj().T @ (sample.h_eq[0].conj().T @ e0)
        cosine = abs(np.vdot(effective, d0[:, 0])) / (np.linalg.norm(effective) * np.linalg.norm(d0[:, 0]))
        assert cosine == pytest.approx(1.0, rel=1e-12)


class TestStepSize:
    def test_constant(self):
        schedule = StepSchedule(kind="constant", alpha0=0.1)
        assert [step_size(schedule, t) for t in (1, 10, 10_000)] == [0.1, 0.1, 0.1]

    def test_inverse_t(self):
        assert step_size(StepSchedule(kind="inverse_t", alpha0=1.0, tau=100.0), 100) == pytest.approx(0.5)

    def test_cap_binds(self):
        schedule = StepSchedule(kind="constant", alpha0=0.5, lipschitz_cap=0.01)
        assert step_size(schedule, 1) == step_size(schedule, 500) == 0.01

    def test_positive_and_nonincreasing(self):
        schedule = StepSchedule()
        steps = [step_size(schedule, t) for t in range(1, 5000, 7)]
        assert min(steps) > 0
        assert np.all(np.diff(steps) <= 0)

    def test_iterations_start_at_one(self):
        with pytest.raises(UsageError):
            step_size(StepSchedule(), 0)

    def test_invalid_schedule(self):
        with pytest.raises(UsageError):
            StepSchedule(kind="cosine")
        with pytest.raises(UsageError):
            StepSchedule(alpha0=1.5)

    def test_cap_from_config(self, tiny_problem):
        config, geo, _ = tiny_problem
        constants = lipschitz_constants(config, geo)
        capped = StepSchedule.from_config(ScheduleConfig(lipschitz_cap=True), constants)
        assert capped.lipschitz_cap == pytest.approx(1.0 / constants.l_total)
        assert StepSchedule.from_config(ScheduleConfig(), constants).lipschitz_cap is None


class TestSamplers:
    def test_training_set_sampler(self, tiny_problem, rng):
        config, geo, _ = tiny_problem
        sampler = make_sampler("training_set", geo, config, 8, rng)
        assert isinstance(sampler, TrainingSetSampler)
        draws = [sampler.draw(rng) for _ in range(20)]
        assert all(any(d is s for s in sampler.samples) for d in draws)

    def test_streaming_sampler(self, tiny_problem, rng):
        config, geo, _ = tiny_problem
        sampler = make_sampler("streaming", geo, config, 8, rng)
        assert isinstance(sampler, StreamingSampler)
        assert sampler.draw(rng).h_eq.shape == (2, 5, 4)

    def test_fixed_sampler_repeats(self, tiny_problem, rng):
        _, geo, _ = tiny_problem
        h0 = no_blockage_sample(geo)
        sampler = FixedSampler(h0)
        assert all(sampler.draw(rng) is h0 for _ in range(5))

    def test_sequence_sampler_exhausts(self, sample_and_state, rng):
        sample, _ = sample_and_state
        sampler = SequenceSampler([sample, sample])
        sampler.draw(rng)
        sampler.draw(rng)
        with pytest.raises(SamplerExhaustedError):
            sampler.draw(rng)

    def test_invalid_samplers(self, tiny_problem, rng):
        config, geo, _ = tiny_problem
        with pytest.raises(UsageError):
            make_sampler("replay", geo, config, 8, rng)
        with pytest.raises(UsageError):
            TrainingSetSampler([])


class TestRunTrace:
    def test_records_must_increase(self):
        trace = RunTrace()
        trace.append(TraceRecord(2, 0.5, 1.0, 1.0, 1.0, 0.1))
        with pytest.raises(UsageError):
            trace.append(TraceRecord(2, 0.4, 1.0, 1.0, 1.0, 0.1))

    def test_csv_layout(self, tmp_path):
        trace = RunTrace()
        trace.append(TraceRecord(1, 0.5, 1.0, 2.0, 3.0, 0.1))
        trace.append(TraceRecord(2, 0.25, 1.0, 2.0, 3.0, 0.05))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_bytes().decode("utf-8").split("\n")
        assert lines[0] == ",".join(TRACE_COLUMNS)
        assert lines[1] == "1,0.5,1.0,2.0,3.0,0.1"
        assert len([line for line in lines if line]) == 3
        assert b"\r" not in path.read_bytes()

    def test_empty_trace_objective(self):
        assert np.isnan(RunTrace().final_objective)


class TestBSGDOutMin:
    def test_state_stays_feasible(self, trained_setup):
        config, geo, _, _ = trained_setup
        events = []
        state, trace = bsgd_outmin(
            config, geo, StreamingSampler(geo, config),
            StepSchedule(kind="constant", alpha0=0.05), StopCriteria(t_max=200, window=50, tol=0.0, log_every=10),
            np.random.default_rng(3), event_callback=lambda kind, data: events.append((kind, data)),
        )
        state.check_feasible(config.p_max)
        assert [r.t for r in trace.records] == list(range(10, 201, 10))
        assert len(events) == 20 and events[0][0] == "trace"
        assert trace.iterations == 200 and not trace.converged
        assert all(np.isfinite(r.objective_rolling) for r in trace.records)

    def test_tiny_step_is_a_fixed_point(self, trained_setup):
        config, geo, h0, state = trained_setup
        final, _ = bsgd_outmin(
            config, geo, FixedSampler(h0), StepSchedule(kind="constant", alpha0=1e-300),
            StopCriteria(t_max=5, window=5, tol=0.0), np.random.default_rng(0), initial=state,
        )
        np.testing.assert_allclose(final.d_mat, state.d_mat, rtol=1e-12)
        np.testing.assert_allclose(final.a_mat, state.a_mat, rtol=1e-12)
        np.testing.assert_allclose(final.e_vec, state.e_vec, rtol=1e-12)

    def test_unblocked_run_descends(self, trained_setup):
        config, geo, h0, state = trained_setup
        config = config.with_p_block(0.0)
        omegas = config.omega_vec
        final, trace = bsgd_outmin(
            config, geo, StreamingSampler(geo, config), StepSchedule(kind="constant", alpha0=1e-3),
            StopCriteria(t_max=400, window=20, tol=0.0, log_every=20), np.random.default_rng(0), initial=state,
        )
        before = empirical_risk(state, [h0], omegas, config.epsilon, 1.0)
        after = empirical_risk(final, [h0], omegas, config.epsilon, 1.0)
        assert after < before
        assert trace.window_means[-1] < trace.window_means[0]

    def test_frozen_reflection(self, trained_setup):
        config, geo, _, state = trained_setup
        final, _ = bsgd_outmin(
            config, geo, StreamingSampler(geo, config), StepSchedule(kind="constant", alpha0=0.01),
            StopCriteria(t_max=50, window=10, tol=0.0, log_every=10), np.random.default_rng(0),
            frozen=("e",), initial=state,
        )
        np.testing.assert_array_equal(final.e_vec, state.e_vec)
        assert not np.array_equal(final.d_mat, state.d_mat)

    def test_unknown_frozen_block(self, tiny_problem):
        config, _, _ = tiny_problem
        with pytest.raises(UsageError):
            BSGDOutMin(config, StepSchedule(), StopCriteria(), frozen=("z",))

    def test_step_reports_objective_before_update(self, trained_setup):
        config, _, h0, state = trained_setup
        optimizer = BSGDOutMin(config, StepSchedule(kind="constant", alpha0=0.01), StopCriteria())
        new_state, objective, norms = optimizer.step(state, h0, 0.01)
        expected = float(np.sum(hinge(config.omega_vec, config.epsilon, sinr_all(state, h0, 1.0))))
        assert objective == pytest.approx(expected, rel=1e-12)
        assert len(norms) == 3 and all(n > 0 for n in norms)
        new_state.check_feasible(config.p_max)

    def test_converges_when_objective_is_flat(self, tiny_problem):
        config, geo, _ = tiny_problem
        easy = config.model_copy(update={"sinr_targets": [1e-9, 1e-9]})
        _, trace = bsgd_outmin(
            easy, geo, StreamingSampler(geo, easy), StepSchedule(),
            StopCriteria(t_max=1000, window=10, tol=1e-4, log_every=100), np.random.default_rng(0),
        )
        assert trace.converged
        assert trace.iterations == 20
        assert trace.records[-1].t == 20
        assert trace.window_means == [0.0, 0.0]

    def test_sampler_exhaustion_propagates(self, trained_setup):
        config, geo, h0, state = trained_setup
        with pytest.raises(SamplerExhaustedError):
            bsgd_outmin(config, geo, SequenceSampler([h0] * 3), StepSchedule(), StopCriteria(t_max=10, window=5),
                        np.random.default_rng(0), initial=state)

    def test_same_seed_same_result(self, tiny_problem):
        config, geo, _ = tiny_problem
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(42)
            sampler = make_sampler("training_set", geo, config, 32, rng)
            runs.append(bsgd_outmin(config, geo, sampler, StepSchedule(), StopCriteria(t_max=100, window=25, tol=0.0),
                                    rng))
        np.testing.assert_array_equal(runs[0][0].d_mat, runs[1][0].d_mat)
        np.testing.assert_array_equal(runs[0][0].e_vec, runs[1][0].e_vec)

    def test_stop_from_config(self):
        stop = StopCriteria.from_config(StopConfig(t_max=300, window=30, tol=1e-3, log_every=3))
        assert (stop.t_max, stop.window, stop.tol, stop.log_every) == (300, 30, 1e-3, 3)


@pytest.mark.slow
class TestDeskConvergence:
    @staticmethod
    def _window_means(experiment, geo, p, g):
        config, geo, _ = normalize_problem(experiment.system.with_p_block(p), geo)
        rng = np.random.default_rng(np.random.SeedSequence([0, g, 1, 0]))
        initial = initial_state(no_blockage_sample(geo), config.n_rf, config.p_max, rng)
        sampler = make_sampler(experiment.training.sampler, geo, config, experiment.training.n_samples, rng)
        _, trace = bsgd_outmin(config, geo, sampler, StepSchedule.from_config(experiment.schedule),
                               StopCriteria.from_config(experiment.stop), rng, initial=initial)
        return np.array(trace.window_means)

    def test_settles_at_low_blockage_and_fluctuates_at_high(self, config_path):
        experiment = load_config(config_path.parent / "desk.yaml")
        for g in range(8):
            geo = gen_geometry(experiment.system, np.random.default_rng(np.random.SeedSequence([0, g, 0])))
            low = self._window_means(experiment, geo, 0.1, g)
            high = self._window_means(experiment, geo, 0.9, g)
            if low[0] > 0 and high[0] > 0:
                break
        else:
            pytest.fail("every geometry starts with a zero objective")
        assert low[-1] < 0.5 * low[0]
        assert len(high) >= 2
        assert high[-1] < high[0]
        assert np.var(high) > 0
