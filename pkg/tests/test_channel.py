import numpy as np
import pytest

from risbeam.channel import (
    BlockageDraw,
    ChannelSample,
    assemble_equivalent,
    draw_pathloss_gain,
    gen_geometry,
    load_geometry,
    no_blockage_sample,
    normalize_problem,
    pathloss_variance,
    sample_blockage,
    sample_blockages,
    save_geometry,
    training_set,
    ula_steering,
    upa_steering,
)
from risbeam.config import PathlossParams
from risbeam.errors import DimensionError, DomainError, UsageError
from risbeam.surrogate import sinr_all
from risbeam.selftest import random_state, tiny_system


class TestSteering:
    def test_ula_broadside_is_all_ones(self):
        np.testing.assert_allclose(ula_steering(0.0, 8), np.ones(8))

    def test_ula_entries(self):
        theta = 0.3
        expected = np.exp(1j * np.pi * np.arange(5) * np.sin(theta))
        np.testing.assert_allclose(ula_steering(theta, 5), expected)

    def test_ula_batched_shape(self):
        assert ula_steering(np.zeros((3, 2)), 4).shape == (3, 2, 4)

    def test_upa_is_kronecker_of_factors(self):
        theta, phi = 0.4, -0.2
        vertical = np.exp(1j * np.pi * np.arange(3) * np.sin(theta) * np.sin(phi))
        horizontal = np.exp(1j * np.pi * np.arange(2) * np.cos(theta))
        np.testing.assert_allclose(upa_steering(theta, phi, 3, 2), np.kron(vertical, horizontal))

    def test_unit_modulus(self, rng):
        values = upa_steering(rng.uniform(-1, 1, 10), rng.uniform(-1, 1, 10), 4, 4)
        np.testing.assert_allclose(np.abs(values), 1.0)


class TestPathloss:
    def test_variance_formula(self):
        params = PathlossParams(c0_db=61.4, exponent=2.0, shadowing_std_db=0.0)
        expected = 10 ** ((-61.4 - 20.0 * np.log10(40.0)) / 10)
        assert pathloss_variance(40.0, params) == pytest.approx(expected)

    def test_non_positive_distance(self, rng):
        params = PathlossParams()
        with pytest.raises(DomainError):
            draw_pathloss_gain(0.0, params, rng)

    def test_gain_power_matches_variance_without_shadowing(self):
        params = PathlossParams(exponent=2.0, shadowing_std_db=0.0)
        rng = np.random.default_rng(3)
        gains = np.array([draw_pathloss_gain(10.0, params, rng) for _ in range(20_000)])
        assert np.mean(np.abs(gains) ** 2) == pytest.approx(pathloss_variance(10.0, params), rel=0.05)


class TestGeometry:
    def test_shapes(self, tiny_config):
        geo = gen_geometry(tiny_config, np.random.default_rng(0))
        assert geo.bu_gain.shape == (2, 2)
        assert geo.iu_gain.shape == (1, 2, 2)
        assert geo.bi_gain.shape == (1, 2)
        assert geo.ris_rows.shape == (2, 4, 4)
        assert geo.ris_elements == 4

    def test_users_inside_disc(self, tiny_config):
        geo = gen_geometry(tiny_config, np.random.default_rng(1))
        center = np.array(tiny_config.geometry.user_center)
        assert np.all(np.linalg.norm(geo.user_positions - center, axis=1) <= tiny_config.geometry.user_radius)

    def test_same_seed_same_geometry(self, tiny_config):
        a = gen_geometry(tiny_config, np.random.default_rng(5))
        b = gen_geometry(tiny_config, np.random.default_rng(5))
        np.testing.assert_array_equal(a.bu_gain, b.bu_gain)
        np.testing.assert_array_equal(a.ris_rows, b.ris_rows)

    def test_geometry_does_not_depend_on_blockage(self, tiny_config):
        a = gen_geometry(tiny_config.with_p_block(0.1), np.random.default_rng(5))
        b = gen_geometry(tiny_config.with_p_block(0.9), np.random.default_rng(5))
        np.testing.assert_array_equal(a.bu_gain, b.bu_gain)

    def test_ris_rows_match_cascade(self, tiny_problem):
        _, geo, _ = tiny_problem
        h_i = geo.ris_user_channels[0, 1]
        h_bi = geo.bs_ris_channels[0]
        np.testing.assert_allclose(geo.ris_rows[1], np.diag(h_i.conj()) @ h_bi)

    def test_without_ris_keeps_direct_links(self, tiny_problem):
        _, geo, _ = tiny_problem
        reduced = geo.without_ris()
        assert reduced.ris_elements == 0
        assert reduced.ris_rows.shape == (2, 0, 4)
        np.testing.assert_array_equal(reduced.bu_gain, geo.bu_gain)


class TestBlockage:
    def test_all_blocked_and_none_blocked(self, tiny_config, rng):
        assert np.all(sample_blockage(tiny_config.with_p_block(1.0), rng).gamma == 0)
        assert np.all(sample_blockage(tiny_config.with_p_block(0.0), rng).gamma == 1)

    def test_blockage_frequency(self, tiny_config, rng):
        gammas = sample_blockages(tiny_config.with_p_block(0.3), rng, 20_000)
        assert gammas.mean() == pytest.approx(0.7, abs=0.01)

    def test_batched_draws_match_sequential(self, tiny_config):
        batched = sample_blockages(tiny_config, np.random.default_rng(9), 4)
        rng = np.random.default_rng(9)
        sequential = np.stack([sample_blockage(tiny_config, rng).gamma for _ in range(4)])
        np.testing.assert_array_equal(batched, sequential)

    def test_invalid_draw(self):
        with pytest.raises(DomainError):
            BlockageDraw(gamma=np.array([[0.5, 1.0]]))

    def test_shape_mismatch(self, tiny_problem):
        _, geo, _ = tiny_problem
        with pytest.raises(DimensionError):
            assemble_equivalent(geo, BlockageDraw(gamma=np.ones((2, 3), dtype=np.int8)))


class TestEquivalentChannel:
    def test_layout(self, tiny_problem):
        _, geo, _ = tiny_problem
        sample = no_blockage_sample(geo)
        assert sample.h_eq.shape == (2, 5, 4)
        assert sample.n_rows == 5
        np.testing.assert_allclose(sample.h_eq[:, :-1], geo.ris_rows)

    def test_direct_row_is_conjugate_channel(self, tiny_problem):
        _, geo, _ = tiny_problem
        draw = BlockageDraw(gamma=np.array([[1, 0], [0, 1]], dtype=np.int8))
        sample = assemble_equivalent(geo, draw)
        steering = ula_steering(geo.bu_aod, geo.n_tx)
        h_b0 = geo.bu_gain[0, 0] * steering[0, 0] / np.sqrt(2)
        np.testing.assert_allclose(sample.direct_rows[0], h_b0.conj())

    def test_fully_blocked_direct_rows_vanish(self, tiny_problem):
        config, geo, _ = tiny_problem
        sample = assemble_equivalent(geo, sample_blockage(config.with_p_block(1.0), np.random.default_rng(0)))
        np.testing.assert_array_equal(sample.direct_rows, 0)

    def test_inconsistent_sample(self):
        with pytest.raises(DimensionError):
            ChannelSample(ris_rows=np.zeros((2, 4, 4)), direct_rows=np.zeros((2, 3)))

    def test_training_set_shares_ris_rows(self, tiny_problem, rng):
        config, geo, _ = tiny_problem
        samples = training_set(geo, config, 16, rng)
        assert len(samples) == 16
        assert all(s.ris_rows is geo.ris_rows for s in samples)

    def test_training_set_size(self, tiny_problem, rng):
        config, geo, _ = tiny_problem
        with pytest.raises(UsageError):
            training_set(geo, config, 0, rng)

    def test_training_set_fully_blocked_fraction(self, rng):
        config = tiny_system(p_block=0.5, n_paths_bu=5)
        geo = gen_geometry(config, rng)
        samples = training_set(geo, config, 1000, rng)
        blocked = np.array([[not np.any(s.direct_rows[k]) for k in range(config.n_users)] for s in samples])
        expected = 0.5 ** config.n_paths_bu
        se = np.sqrt(expected * (1 - expected) / blocked.size)
        assert blocked.mean() == pytest.approx(expected, abs=4 * se)

    def test_mean_direct_channel_scales_with_survival(self, tiny_config):
        config = tiny_config.with_p_block(0.3)
        geo = gen_geometry(config, np.random.default_rng(5))
        n_draws = 40_000
        gammas = sample_blockages(config, np.random.default_rng(6), n_draws)
        mean = geo.direct_channels(gammas).mean(axis=0)
        expected = 0.7 * geo.direct_channels(np.ones((config.n_users, config.n_paths_bu)))
        path_power = (np.abs(geo.bu_gain) ** 2).sum(axis=1) / geo.n_paths_bu
        se = np.sqrt(0.3 * 0.7 * path_power / n_draws)[:, None]
        assert np.all(np.abs(mean - expected) <= 5 * se)


class TestNormalization:
    def test_sinr_is_invariant(self, tiny_config, rng):
        geo = gen_geometry(tiny_config, np.random.default_rng(4))
        scaled_config, scaled_geo, scale = normalize_problem(tiny_config, geo)
        assert scale == pytest.approx(np.sqrt(1e-13))
        np.testing.assert_allclose(scaled_config.noise_vec, 1.0)
        state = random_state(rng, 4, 2, 2, 5)
        draw = sample_blockage(tiny_config, rng)
        raw = sinr_all(state, assemble_equivalent(geo, draw), tiny_config.noise_vec)
        normalized = sinr_all(state, assemble_equivalent(scaled_geo, draw), scaled_config.noise_vec)
        np.testing.assert_allclose(normalized, raw, rtol=1e-10)


class TestSerialization:
    def test_yaml_round_trip_preserves_channels(self, tiny_problem, tmp_path):
        _, geo, _ = tiny_problem
        path = tmp_path / "geometry.yaml"
        save_geometry(geo, path)
        restored = load_geometry(path)
        np.testing.assert_allclose(restored.ris_rows, geo.ris_rows, rtol=1e-12)
        np.testing.assert_allclose(restored.bu_gain, geo.bu_gain, rtol=1e-12)

    def test_round_trip_without_ris(self, tiny_problem, tmp_path):
        _, geo, _ = tiny_problem
        path = tmp_path / "geometry.yaml"
        save_geometry(geo.without_ris(), path)
        restored = load_geometry(path)
        assert restored.ris_elements == 0
        np.testing.assert_allclose(restored.bu_gain, geo.bu_gain, rtol=1e-12)
