import itertools

import numpy as np
import pytest

from hetfl.data import generate_synthetic
from hetfl.engine import (
    DegenerateError,
    Federation,
    GEstimates,
    ProtocolError,
    SamplingScheme,
    SchemeError,
    SimConfig,
    StopRule,
    aggregate,
    aggregate_full,
    full_scheme,
    multiplicities,
    run_rounds,
    sample_multiset,
    statistical_sampling_probs,
    statistical_scheme,
    uniform_scheme,
    validate_probs,
    weighted_scheme,
)
from hetfl.model import DivergenceError, ModelParams
from hetfl.timing import SystemProfile, draw_profile


@pytest.fixture(scope="module")
def federation():
    ds, part = generate_synthetic(1, 1, 12, 8, 4, seed=0, total_samples=900, power_exponent=1.0)
    return Federation(ds, part, draw_profile("exponential", {"scale": 1.0}, 12, seed=3))


def _models(rng, N, classes=2, dim=3):
    server = ModelParams(rng.normal(size=(classes, dim)), rng.normal(size=classes))
    return server, {i: ModelParams(rng.normal(size=(classes, dim)), rng.normal(size=classes)) for i in range(N)}


class TestSchemes:
    def test_uniform(self):
        np.testing.assert_allclose(uniform_scheme(4).q, 0.25)

    def test_weighted_uses_p(self):
        np.testing.assert_array_equal(weighted_scheme([0.1, 0.9]).q, [0.1, 0.9])

    def test_statistical_hand_value(self):
        np.testing.assert_allclose(statistical_sampling_probs([0.5, 0.5], [1.0, 3.0]), [0.25, 0.75])

    def test_statistical_degenerate(self):
        with pytest.raises(DegenerateError):
            statistical_scheme([0.5, 0.5], [0.0, 0.0])

    def test_unknown_kind(self):
        with pytest.raises(SchemeError):
            SamplingScheme(np.array([1.0]), "random")

    @pytest.mark.parametrize("q", [[0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0], []])
    def test_invalid_probabilities(self, q):
        with pytest.raises(SchemeError):
            validate_probs(q)

    def test_strict_rejects_zero(self):
        validate_probs([0.0, 1.0])
        with pytest.raises(SchemeError):
            validate_probs([0.0, 1.0], strict=True)


class TestSampling:
    def test_shape_and_order(self):
        draw = sample_multiset([0.2, 0.3, 0.5], 10, np.random.default_rng(0))
        assert draw.size == 10
        assert np.all(np.diff(draw) >= 0)

    def test_zero_probability_never_drawn(self):
        draw = sample_multiset([0.5, 0.0, 0.5], 1000, np.random.default_rng(1))
        assert 1 not in draw

    def test_frequencies(self):
        q = np.array([0.1, 0.2, 0.3, 0.4])
        counts = multiplicities(sample_multiset(q, 200_000, np.random.default_rng(2)), 4)
        se = np.sqrt(q * (1 - q) / 200_000)
        assert np.all(np.abs(counts / 200_000 - q) <= 4 * se)

    def test_bad_K(self):
        with pytest.raises(SchemeError):
            sample_multiset([1.0], 0, np.random.default_rng(0))


class TestAggregation:
    def test_hand_value(self):
        server = ModelParams(np.zeros((1, 1)), np.zeros(1))
        updates = {0: ModelParams(np.ones((1, 1)), np.ones(1)), 2: ModelParams(np.full((1, 1), 3.0), np.zeros(1))}
        # multiset (0, 0, 2): weights 2*p0/(3 q0) and p2/(3 q2)
        q, p = np.array([0.5, 0.25, 0.25]), np.array([0.2, 0.3, 0.5])
        out = aggregate(server, updates, [0, 0, 2], q, 3, p)
        w0, w2 = 2 * 0.2 / 1.5, 0.5 / 0.75
        np.testing.assert_allclose(out.flat(), [w0 * 1 + w2 * 3, w0 * 1], atol=1e-15)

    def test_single_draw_with_q_equal_p_returns_client_model(self):
        rng = np.random.default_rng(0)
        server, updates = _models(rng, 3)
        p = np.array([0.2, 0.3, 0.5])
        out = aggregate(server, {1: updates[1]}, [1], p, 1, p)
        np.testing.assert_allclose(out.flat(), updates[1].flat(), atol=1e-14)

    def test_full_average(self):
        rng = np.random.default_rng(1)
        server, updates = _models(rng, 3)
        p = np.array([0.2, 0.3, 0.5])
        expected = sum(p[i] * updates[i].flat() for i in range(3))
        np.testing.assert_allclose(aggregate_full(server, updates, p).flat(), expected, atol=1e-15)

    @pytest.mark.parametrize("N,K", [(2, 3), (3, 2), (4, 2)])
    def test_expectation_by_enumeration(self, N, K):
        rng = np.random.default_rng(N + K)
        server, updates = _models(rng, N)
        q = rng.dirichlet(np.ones(N))
        p = rng.dirichlet(np.ones(N))
        expected = np.zeros_like(server.flat())
        for draw in itertools.product(range(N), repeat=K):
            expected += np.prod(q[list(draw)]) * aggregate(server, updates, draw, q, K, p).flat()
        np.testing.assert_allclose(expected, aggregate_full(server, updates, p).flat(), atol=1e-12, rtol=0)

    def test_missing_update(self):
        rng = np.random.default_rng(2)
        server, updates = _models(rng, 2)
        with pytest.raises(ProtocolError):
            aggregate(server, {0: updates[0]}, [0, 1], [0.5, 0.5], 2, [0.5, 0.5])
        with pytest.raises(ProtocolError):
            aggregate_full(server, {0: updates[0]}, [0.5, 0.5])

    def test_wrong_draw_count(self):
        rng = np.random.default_rng(3)
        server, updates = _models(rng, 2)
        with pytest.raises(ProtocolError):
            aggregate(server, updates, [0, 1, 1], [0.5, 0.5], 2, [0.5, 0.5])


class TestGEstimates:
    def test_running_mean_of_squares(self):
        g = GEstimates.empty(3)
        g.update(1, 4.0)
        g.update(1, 16.0)
        assert g.G[1] == pytest.approx(np.sqrt(10.0))
        assert g.observation_counts[1] == 2

    def test_filled_uses_observed_mean(self):
        g = GEstimates.empty(3)
        g.update(0, 1.0)
        g.update(2, 9.0)
        np.testing.assert_allclose(g.filled(), [1.0, 2.0, 3.0])

    def test_filled_needs_an_observation(self):
        with pytest.raises(DegenerateError):
            GEstimates.empty(2).filled()

    def test_copy_is_independent(self):
        g = GEstimates.empty(2)
        h = g.copy()
        h.update(0, 4.0)
        assert g.observation_counts[0] == 0


class TestSimConfig:
    def test_schedules(self):
        assert SimConfig(lr0=0.1).lr(4) == pytest.approx(0.02)
        assert SimConfig(lr_schedule="constant", lr0=0.3).lr(9) == 0.3
        assert SimConfig(lr_schedule="theory", mu=0.5, gamma=3.0).lr(1) == pytest.approx(1.0)

    def test_unknown_schedule(self):
        with pytest.raises(ValueError):
            SimConfig(lr_schedule="cosine").lr(0)


class TestRunRounds:
    def _cfg(self, **kw):
        base = dict(K=3, E=5, batch_size=8, lr0=0.1, seed=7)
        base.update(kw)
        return SimConfig(**base)

    def test_trace_bookkeeping(self, federation):
        res = run_rounds(federation, uniform_scheme(12), StopRule(max_rounds=8), self._cfg())
        assert res.rounds == 8
        t = federation.profile.t_by_client
        for rec in res.trace:
            assert len(rec.sampled_multiset) == 3
            assert rec.round_time == t[list(rec.sampled_multiset)].max()
        np.testing.assert_allclose(
            [r.cumulative_time for r in res.trace], np.cumsum([r.round_time for r in res.trace]), rtol=1e-15
        )

    def test_deterministic(self, federation):
        a = run_rounds(federation, weighted_scheme(federation.p), StopRule(max_rounds=5), self._cfg())
        b = run_rounds(federation, weighted_scheme(federation.p), StopRule(max_rounds=5), self._cfg())
        assert a.trace == b.trace

    def test_seed_changes_sampling(self, federation):
        a = run_rounds(federation, uniform_scheme(12), StopRule(max_rounds=5), self._cfg(seed=1))
        b = run_rounds(federation, uniform_scheme(12), StopRule(max_rounds=5), self._cfg(seed=2))
        assert [r.sampled_multiset for r in a.trace] != [r.sampled_multiset for r in b.trace]

    def test_full_participation_uses_everyone(self, federation):
        res = run_rounds(federation, full_scheme(12), StopRule(max_rounds=2), self._cfg())
        assert res.trace[0].sampled_multiset == tuple(range(12))
        assert res.trace[0].round_time == federation.profile.t.max()
        assert np.all(res.g_estimates.observation_counts == 2)

    def test_full_participation_lowers_loss(self, federation):
        res = run_rounds(federation, full_scheme(12), StopRule(max_rounds=10), self._cfg())
        assert res.trace[-1].global_loss < res.initial_loss

    def test_resume_matches_single_run(self, federation):
        cfg = self._cfg()
        whole = run_rounds(federation, uniform_scheme(12), StopRule(max_rounds=6), cfg)
        first = run_rounds(federation, uniform_scheme(12), StopRule(max_rounds=3), cfg)
        second = run_rounds(
            federation, uniform_scheme(12), StopRule(max_rounds=3), cfg, first.params, first.g_estimates, round_offset=3
        )
        assert [r.sampled_multiset for r in whole.trace] == [r.sampled_multiset for r in first.trace + second.trace]
        np.testing.assert_allclose(second.params.flat(), whole.params.flat(), atol=1e-12)
        np.testing.assert_allclose(second.g_estimates.G, whole.g_estimates.G, rtol=1e-12)

    def test_stops_at_target(self, federation):
        res = run_rounds(federation, full_scheme(12), StopRule(max_rounds=50, target_loss=1.2), self._cfg())
        assert res.reached_target
        assert res.trace[-1].global_loss <= 1.2
        assert all(r.global_loss > 1.2 for r in res.trace[:-1])
        assert res.time_to_loss(1.2) == res.total_time
        assert res.rounds_to_loss(1.2) == res.rounds

    def test_already_at_target(self, federation):
        res = run_rounds(federation, full_scheme(12), StopRule(max_rounds=5, target_loss=10.0), self._cfg())
        assert res.reached_target
        assert res.rounds == 0

    def test_cap_reports_timeout(self, federation):
        res = run_rounds(federation, uniform_scheme(12), StopRule(max_rounds=2, target_loss=1e-6), self._cfg())
        assert res.timed_out
        assert not res.reached_target

    def test_time_budget(self, federation):
        res = run_rounds(federation, uniform_scheme(12), StopRule(max_rounds=100, time_budget=3.0), self._cfg())
        assert res.total_time >= 3.0
        assert res.trace[-2].cumulative_time < 3.0

    def test_scheme_size_mismatch(self, federation):
        with pytest.raises(SchemeError):
            run_rounds(federation, uniform_scheme(5), StopRule(max_rounds=1), self._cfg())

    def test_divergence_carries_trace(self, federation):
        cfg = self._cfg(lr0=1e300, lr_schedule="constant")
        with pytest.raises(DivergenceError) as info, np.errstate(all="ignore"):
            run_rounds(federation, uniform_scheme(12), StopRule(max_rounds=5), cfg)
        assert isinstance(info.value.trace, list)

    def test_profile_size_must_match(self, federation):
        with pytest.raises(ValueError):
            Federation(federation.train, federation.partition, SystemProfile.from_times([1.0, 2.0]))
