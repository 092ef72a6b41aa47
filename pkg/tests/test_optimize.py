"""Tests for the configuration strategies and the linear surrogate."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmasim import optimize, physics
from dmasim.optimize import (
    CostKind,
    CostSpec,
    SampleSet,
    Strategy,
    coordinate_descent,
    descend,
    fit_linear_surrogate,
    optimize_lin,
    optimize_opt,
    random_search,
)
from dmasim.physics import ChannelPair, ModelOracle, build_model

F0 = 19.25e9
BN = CostSpec(CostKind.BEAM_AND_NULL, F0)


def db_to_h(g):
    return 10 ** (g / 20)


class GainOracle:
    """Oracle returning fixed gains regardless of configuration."""

    n_atoms = 4
    band = (0.0, np.inf)

    def __init__(self, g_des, g_und):
        self.h = ChannelPair(db_to_h(g_des), db_to_h(g_und) * 1j)

    def __call__(self, config, f):
        return self.h


class CountingObjective:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, c):
        self.calls += 1
        return self.fn(c)


@pytest.fixture(scope="module")
def model96():
    return build_model(1, 96, 2.0)


class TestCost:
    def test_strong_discrimination(self):
        assert optimize.cost(GainOracle(-34, -77), np.zeros(4), BN) == pytest.approx(-43.0)

    def test_poor_discrimination(self):
        assert optimize.cost(GainOracle(-33, -47), np.zeros(4), BN) == pytest.approx(-14.0)

    def test_beam_only_sign(self):
        spec = CostSpec(CostKind.BEAM_ONLY, F0)
        assert optimize.cost(GainOracle(-33, -47), np.zeros(4), spec) == pytest.approx(33.0)

    def test_vectorised_costs_match(self):
        h = np.array([[0.1, 0.01j], [1e-3, 1e-5]])
        np.testing.assert_allclose(optimize.costs_of(h, CostKind.BEAM_AND_NULL), [-20, -40])
        np.testing.assert_allclose(optimize.costs_of(h, CostKind.BEAM_ONLY), [20, 60])

    def test_spec_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            CostSpec("Nulling", F0)

    def test_oracle_domain_error_propagates(self, model96):
        with pytest.raises(physics.BandError):
            optimize.cost(ModelOracle(model96), np.zeros(96), CostSpec(CostKind.BEAM_ONLY, 30e9))


class TestRandomSearch:
    def test_single_sample(self, model96):
        oracle = ModelOracle(model96)
        cfg, c = random_search(oracle, BN, k=1, rng=np.random.default_rng(0))
        expected = optimize.rand_config(96, np.random.default_rng(0))
        np.testing.assert_array_equal(cfg, expected)
        assert c == pytest.approx(optimize.cost(oracle, cfg, BN), abs=1e-9)

    def test_best_not_above_median(self, model96):
        oracle = ModelOracle(model96)
        samples = optimize.draw_samples(oracle, 96, F0, 500, np.random.default_rng(1))
        _, c = random_search(oracle, BN, samples=samples)
        assert c <= np.median(optimize.costs_of(samples.channels, BN.kind))

    def test_enumeration_equals_exhaustive_optimum(self):
        m = build_model(4, 12, 2.0)
        oracle = ModelOracle(m)
        cfgs = np.array(list(itertools.product([0, 1], repeat=12)), np.uint8)
        samples = SampleSet(cfgs, oracle.batch(cfgs, F0), F0)
        best, c = random_search(oracle, BN, samples=samples)
        brute = min((optimize.cost(oracle, x, BN), i) for i, x in enumerate(cfgs))
        assert c == pytest.approx(brute[0], abs=1e-9)
        np.testing.assert_array_equal(best, cfgs[brute[1]])

    def test_rejects_zero_k(self, model96):
        with pytest.raises(ValueError):
            random_search(ModelOracle(model96), BN, k=0, rng=np.random.default_rng(0))


class TestCoordinateDescent:
    def test_popcount_converges_in_one_sweep(self):
        obj = CountingObjective(lambda c: float(c.sum()))
        init = np.random.default_rng(0).integers(0, 2, 20)
        res = descend(obj, init)
        assert not res.config.any()
        assert res.sweeps == 2  # one productive sweep plus the verification sweep
        assert obj.calls == 1 + 2 * 20 == res.oracle_calls

    def test_constant_cost_runs_exactly_one_sweep(self):
        obj = CountingObjective(lambda c: 1.0)
        res = descend(obj, np.ones(30, np.uint8))
        assert res.sweeps == 1
        assert obj.calls == 1 + 30
        np.testing.assert_array_equal(res.config, np.ones(30))

    def test_ties_are_rejected(self):
        res = descend(lambda c: 0.0 if c[0] == 0 else 0.0, np.array([1, 0], np.uint8))
        np.testing.assert_array_equal(res.config, [1, 0])

    def test_sweep_budget_respected(self):
        # Flipping bit i is only profitable after bit i + 1 has flipped, which
        # forces one accepted flip per sweep when visiting in ascending order.
        n = 8

        def chain(c):
            k = 0
            while k < n and c[n - 1 - k] == 1:
                k += 1
            return -float(k)

        res = descend(chain, np.zeros(n, np.uint8), max_sweeps=3)
        assert res.sweeps == 3
        assert res.config.sum() == 3
        assert res.oracle_calls == 1 + 3 * n

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 24))
    def test_trace_monotone_and_budget(self, seed, n):
        rng = np.random.default_rng(seed)
        Q = rng.normal(size=(n, n))
        obj = CountingObjective(lambda c: float(c @ Q @ c))
        res = descend(obj, rng.integers(0, 2, n))
        costs = [c for _, c in res.trace]
        assert all(b < a for a, b in zip(costs, costs[1:]))
        assert res.cost <= res.init_cost
        assert res.cost == pytest.approx(obj.fn(res.config))
        assert obj.calls == res.oracle_calls <= 5 * n + n + 1
        idx = [i for i, _ in res.trace]
        assert idx == sorted(idx)

    def test_on_model_oracle(self, model96):
        oracle = ModelOracle(model96)
        init = optimize.rand_config(96, np.random.default_rng(2))
        res = coordinate_descent(oracle, BN, init)
        assert res.cost <= res.init_cost
        assert res.cost == pytest.approx(optimize.cost(oracle, res.config, BN))

    def test_fraction_of_ones(self):
        m = build_model(1, 96, 1.0)
        res = optimize_opt(ModelOracle(m), BN, np.random.default_rng(0))
        assert 0.30 <= res.config.mean() <= 0.70


class TestLinearSurrogate:
    def test_mc_free_model_is_exact(self):
        m = build_model(1, 96, 0.0)
        oracle = ModelOracle(m)
        samples = optimize.draw_samples(oracle, 96, F0, 500, np.random.default_rng(0))
        sur = fit_linear_surrogate(samples)
        assert np.all(sur.residual_rms < 1e-10)
        ops = m.operators(F0)
        increments = (ops.feed * (ops.chi_on - ops.chi_off))[:, None] * ops.tx
        np.testing.assert_allclose(sur.coefficients, increments, rtol=1e-8, atol=1e-12 * np.abs(increments).max())

    @pytest.mark.parametrize("phase", [1.0, 1j, np.exp(0.7j)])
    def test_planted_affine_map(self, phase):
        n = 40
        rng = np.random.default_rng(3)
        beta = np.arange(1, n + 1) * 1e-2 * phase
        cfgs = rng.integers(0, 2, (300, n))
        h = 1.0 + cfgs @ beta
        pairs = [(c, ChannelPair(x, 2 * x)) for c, x in zip(cfgs, h)]
        sur = fit_linear_surrogate(pairs)
        np.testing.assert_allclose(sur.intercept, [1.0, 2.0], atol=1e-10)
        np.testing.assert_allclose(sur.coefficients[:, 0], beta, atol=1e-10)
        np.testing.assert_allclose(sur.coefficients[:, 1], 2 * beta, atol=1e-10)
        assert sur.n_samples == 300

    def test_prediction_is_affine(self):
        rng = np.random.default_rng(4)
        sur = optimize.LinearSurrogate(intercept=np.array([1 + 1j, 2.0]),
                                       coefficients=rng.normal(size=(5, 2)) + 0j,
                                       residual_rms=np.zeros(2), n_samples=6)
        c = np.array([1, 0, 1, 1, 0])
        p = sur.predict(c)
        assert p.h_des == pytest.approx(1 + 1j + sur.coefficients[[0, 2, 3], 0].sum())
        np.testing.assert_allclose(sur.predict_many([c])[0], [p.h_des, p.h_und])

    def test_strong_coupling_holdout_error(self, model96):
        oracle = ModelOracle(model96)
        train = optimize.draw_samples(oracle, 96, F0, 500, np.random.default_rng(5))
        test = optimize.draw_samples(oracle, 96, F0, 200, np.random.default_rng(6))
        sur = fit_linear_surrogate(train)
        err = np.linalg.norm(sur.predict_many(test.configs) - test.channels, axis=0) / np.linalg.norm(
            test.channels, axis=0)
        assert np.all(err > 1e-2)

    def test_constant_bit_flagged(self, caplog):
        rng = np.random.default_rng(7)
        cfgs = rng.integers(0, 2, (50, 6))
        cfgs[:, 2] = 1
        h = cfgs @ (np.arange(6) + 1.0) + 0.5
        sur = fit_linear_surrogate([(c, ChannelPair(x, x)) for c, x in zip(cfgs, h)])
        assert sur.flagged_bits == [2]
        assert np.all(sur.coefficients[2] == 0)
        assert sur.warnings and "constant" in caplog.text

    def test_too_few_samples(self):
        cfgs = np.eye(4, 5, dtype=np.uint8)
        with pytest.raises(ValueError, match="at least"):
            fit_linear_surrogate([(c, ChannelPair(1, 1)) for c in cfgs])

    def test_identical_configs(self):
        with pytest.raises(ValueError, match="identical"):
            fit_linear_surrogate([(np.ones(3), ChannelPair(1, 1))] * 10)


class TestStrategies:
    def test_lin_equals_opt_without_coupling(self):
        m = build_model(2, 96, 0.0)
        oracle = ModelOracle(m)
        samples = optimize.draw_samples(oracle, 96, F0, 500, np.random.default_rng(0))
        lin = optimize_lin(oracle, BN, samples=samples)
        init, _ = random_search(oracle, BN, samples=samples)
        ref = coordinate_descent(oracle, BN, init)
        np.testing.assert_array_equal(lin.config, ref.config)
        assert lin.cost == pytest.approx(ref.cost, abs=1e-6)

    def test_lin_reports_true_cost(self, model96):
        oracle = ModelOracle(model96)
        samples = optimize.draw_samples(oracle, 96, F0, 500, np.random.default_rng(1))
        lin = optimize_lin(oracle, BN, samples=samples)
        assert lin.cost == optimize.cost(oracle, lin.config, BN)
        assert lin.predicted_cost is not None and lin.predicted_cost != lin.cost
        assert lin.oracle_calls == 501

    def test_shared_init(self, model96):
        oracle = ModelOracle(model96)
        samples = optimize.draw_samples(oracle, 96, F0, 500, np.random.default_rng(2))
        opt = optimize_opt(oracle, BN, samples=samples)
        lin = optimize_lin(oracle, BN, samples=samples)
        assert opt.init_cost == pytest.approx(lin.init_cost, abs=1e-9)

    def test_max_uses_beam_only(self, model96):
        oracle = ModelOracle(model96)
        res = optimize.optimize_max(oracle, F0, np.random.default_rng(3))
        assert res.strategy == "MAX"
        assert res.cost == pytest.approx(-physics.gain_db(oracle(res.config, F0).h_des))

    def test_seeded_determinism(self, model96):
        oracle = ModelOracle(model96)
        runs = [optimize.optimize_strategy(s, oracle, F0, np.random.default_rng(9))
                for s in ("OPT", "OPT", "RAND", "RAND")]
        np.testing.assert_array_equal(runs[0].config, runs[1].config)
        np.testing.assert_array_equal(runs[2].config, runs[3].config)
        assert runs[0].trace == runs[1].trace


class TestRandConfig:
    def test_shape_and_values(self):
        c = optimize.rand_config(96, np.random.default_rng(0))
        assert c.shape == (96,) and set(np.unique(c)) <= {0, 1}

    def test_reproducible(self):
        a = optimize.rand_config(96, np.random.default_rng(11))
        b = optimize.rand_config(96, np.random.default_rng(11))
        np.testing.assert_array_equal(a, b)

    def test_bit_means(self):
        rng = np.random.default_rng(12)
        draws = np.array([optimize.rand_config(96, rng) for _ in range(10_000)])
        means = draws.mean(axis=0)
        # 4.5 sigma of a fair coin over 1e4 draws is 0.0225; the band below is wider.
        assert np.all((means >= 0.45) & (means <= 0.55))

    def test_rejects_zero_length(self):
        with pytest.raises(ValueError):
            optimize.rand_config(0, np.random.default_rng(0))


class TestCodebook:
    def test_round_trip(self, tmp_path, model96):
        oracle = ModelOracle(model96)
        res = optimize_opt(oracle, BN, np.random.default_rng(0))
        entry = optimize.CodebookEntry.from_result(res, F0, oracle(res.config, F0))
        path = tmp_path / "codebook.csv"
        optimize.write_codebook(path, [entry])
        back = optimize.read_codebook(path)
        assert len(back) == 1
        np.testing.assert_array_equal(back[0].config, res.config)
        assert back[0].cost_db == res.cost
        assert optimize.lookup(back, Strategy.OPT, F0) is not None
        assert optimize.lookup(back, Strategy.LIN, F0) is None
        assert path.read_text().splitlines()[0] == ",".join(optimize.CODEBOOK_FIELDS)

    def test_traces_written(self, tmp_path):
        res = descend(lambda c: float(c.sum()), np.ones(4, np.uint8))
        res.strategy = "OPT"
        path = tmp_path / "traces.csv"
        optimize.write_traces(path, [(F0, res)])
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(optimize.TRACE_FIELDS)
        assert len(lines) == 1 + len(res.trace)
