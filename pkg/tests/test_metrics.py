import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from voltscope.metrics import (
    MisalignmentParams,
    SnrParams,
    TvlaReport,
    covariance_decomposition_check,
    exceedance_count,
    make_tvla_batches,
    pipeline_batch_trace,
    predict_misaligned_rho,
    predicted_rho,
    snr_analytic,
    snr_empirical,
    snr_general,
    tvla_fixed_vs_random,
    welch_t,
)
from voltscope.synth import PulseModel, SynthPlan, synthesize
from voltscope.traces import IslandConfig

KEY = bytes(range(16))
LEVELS = (0.6, 0.7, 0.8, 0.9, 1.0)


def covariance_oracle(p: SnrParams, supply_of):
    """SNR from the full island covariance matrix; island 0 is attacked."""
    var = p.sigma2_va * p.sigma2_T + p.sigma2_va * p.mu_T ** 2 + p.mu_va ** 2 * p.sigma2_T
    same = p.sigma2_va * p.mu_T ** 2
    noise = 0.0
    for i in range(1, p.n):
        for j in range(1, p.n):
            if i == j:
                noise += var
            elif supply_of[i] == supply_of[j]:
                noise += same
    return var / noise


def oracle_triple(p):
    n, h = p.n, p.n // 2
    return (covariance_oracle(p, list(range(n))),
            covariance_oracle(p, [i // h for i in range(n)]),
            covariance_oracle(p, [0] * n))


class TestSnrAnalytic:
    def test_worked_values(self):
        p = SnrParams.from_levels(LEVELS, 2.0, n=4)
        got = snr_analytic(p)
        for a, b in zip(got, oracle_triple(p)):
            assert a == pytest.approx(b, rel=0, abs=1e-9)
        assert got == pytest.approx((0.3333, 0.3134, 0.2798), abs=5e-5)

    @settings(max_examples=1000, deadline=None)
    @given(h=st.integers(1, 8), s2t=st.floats(0.01, 100), mt=st.floats(-100, 100),
           s2v=st.floats(0, 100), mv=st.floats(0.01, 100))
    def test_ordering(self, h, s2t, mt, s2v, mv):
        p = SnrParams(2 * h, 2 * h, s2t, mt, s2v, mv)
        a, b, c = snr_analytic(p)
        tol = 1e-12 * max(a, 1.0)
        assert a + tol >= b and b + tol >= c

    @settings(max_examples=200, deadline=None)
    @given(h=st.integers(1, 6), s2t=st.floats(0.01, 10), mt=st.floats(-10, 10),
           s2v=st.floats(0.001, 10), mv=st.floats(0.01, 10))
    def test_matches_covariance_oracle(self, h, s2t, mt, s2v, mv):
        p = SnrParams(2 * h, 2 * h, s2t, mt, s2v, mv)
        np.testing.assert_allclose(snr_analytic(p), oracle_triple(p), rtol=1e-9)

    def test_two_islands(self):
        p = SnrParams.from_levels(LEVELS, 2.0, n=2)
        a, b, _ = snr_analytic(p)
        assert a == pytest.approx(1.0) and b == pytest.approx(1.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            snr_analytic(SnrParams(3, 3, 1, 1, 1, 1))
        with pytest.raises(ValueError):
            snr_analytic(SnrParams(1, 1, 1, 1, 1, 1))
        with pytest.raises(ValueError):
            SnrParams(2, 3, 1, 1, 1, 1)
        with pytest.raises(ValueError):
            SnrParams(2, 2, -1, 1, 1, 1)
        with pytest.raises(ValueError):
            SnrParams(2, 2, 1, 1, 1, 0)

    def test_nothing_varies(self):
        assert all(np.isnan(snr_analytic(SnrParams(2, 2, 0.0, 1.0, 0.0, 1.0))))


class TestSnrGeneral:
    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        moments, draws = [], []
        for lv, alpha, mt, st_ in (((0.6, 1.0), 2.0, 3.0, 1.0), ((0.7, 0.8, 0.9), 1.5, 1.0, 2.0),
                                   ((0.5, 1.0), 1.0, 0.5, 0.5)):
            va = np.asarray(lv) ** alpha
            moments.append((va.var(), va.mean(), st_ ** 2, mt))
            draws.append(rng.choice(va, 10 ** 6) * rng.normal(mt, st_, 10 ** 6))
        mc = draws[0].var() / (draws[1] + draws[2]).var()
        assert snr_general(moments) == pytest.approx(mc, rel=0.02)

    def test_no_noise(self):
        assert snr_general([(1.0, 1.0, 1.0, 1.0)]) == float("inf")
        assert snr_general([(1.0, 1.0, 1.0, 1.0), (0.0, 1.0, 0.0, 5.0)]) == float("inf")
        with pytest.raises(ValueError):
            snr_general([])


class TestSnrEmpirical:
    @pytest.mark.parametrize("n", [2, 4])
    def test_agrees_with_analytic(self, n):
        ts = synthesize(SynthPlan(IslandConfig.independent(n), 50_000, 7, KEY, keep_components=True))
        expect = snr_analytic(SnrParams.from_levels(LEVELS, 2.0, n=n)).snr_m_eq_n
        assert snr_empirical(ts) == pytest.approx(expect, rel=0.10)

    def test_requires_components(self):
        ts = synthesize(SynthPlan(IslandConfig.independent(2), 20, 7, KEY))
        with pytest.raises(ValueError, match="decomposition unavailable"):
            snr_empirical(ts)

    def test_explicit_arrays(self):
        rng = np.random.default_rng(1)
        sig = rng.normal(0, 2, (5000, 3))
        noise = rng.normal(0, 4, (5000, 3))
        assert snr_empirical(signal_island_samples=sig, noise_samples=noise) == pytest.approx(0.25, rel=0.1)
        assert snr_empirical(signal_island_samples=sig, noise_samples=np.zeros_like(sig)) == float("inf")


class TestCovariance:
    def _check(self, cfg):
        pulse = PulseModel(baseline=64.0)
        ts = synthesize(SynthPlan(cfg, 40_000, 3, KEY, pulse=pulse, keep_components=True))
        chk = covariance_decomposition_check(ts)
        a = ts.components["signal"][:, :].astype(np.float64)
        b = ts.components["noise"].astype(np.float64)
        idx = int(np.argmax(a.mean(axis=0)))
        prod = (a[:, idx] - a[:, idx].mean()) * (b[:, idx] - b[:, idx].mean())
        return chk, prod.std() / np.sqrt(prod.size)

    def test_identity(self):
        chk, _ = self._check(IslandConfig.alternating(2, 1))
        assert chk.var_sum == pytest.approx(chk.var_parts + 2 * chk.cov_term, rel=1e-9)

    def test_shared_supply_positive(self):
        chk, se = self._check(IslandConfig.alternating(2, 1))
        assert chk.cov_term > 3 * se

    def test_independent_supply_null(self):
        chk, se = self._check(IslandConfig.independent(2))
        assert abs(chk.cov_term) < 4 * se

    def test_wrong_island_count(self):
        ts = synthesize(SynthPlan(IslandConfig.independent(3), 10, 3, KEY, keep_components=True))
        with pytest.raises(ValueError, match="wrong island count"):
            covariance_decomposition_check(ts)


class TestMisalignment:
    @pytest.mark.parametrize("rho,p,vs,vt", [(0.9, 0.5, 1.0, 4.0), (0.3, 0.2, 2.5, 10.0),
                                              (-0.7, 1.0, 3.0, 3.0)])
    def test_hand_values(self, rho, p, vs, vt):
        hand = {(0.9, 0.5, 1.0, 4.0): 0.225, (0.3, 0.2, 2.5, 10.0): 0.03,
                (-0.7, 1.0, 3.0, 3.0): -0.7}[(rho, p, vs, vt)]
        assert predict_misaligned_rho(MisalignmentParams(rho, p, vs, vt)) == pytest.approx(hand, abs=1e-12)

    def test_validation(self):
        for args in ((1.5, 0.5, 1, 2), (0.5, 1.5, 1, 2), (0.5, 0.5, 1, 0), (0.5, 0.5, 3, 2),
                     (0.5, 0.5, -1, 2)):
            with pytest.raises(ValueError):
                MisalignmentParams(*args)

    def test_noise_rho(self):
        assert predicted_rho(0.8, float("inf")) == 0.8
        assert predicted_rho(0.8, 1.0) == pytest.approx(0.8 / np.sqrt(2))
        assert predicted_rho(0.8, 0.0) == 0.0


class TestWelch:
    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(0, 1, (40, 7)), rng.normal(0.3, 2, (25, 7))
        ref = stats.ttest_ind(a, b, equal_var=False).statistic
        np.testing.assert_allclose(welch_t(a, b), ref, rtol=1e-12)
        np.testing.assert_allclose(welch_t(b, a), -ref, rtol=1e-12)

    def test_zero_variance(self):
        a = np.ones((3, 2))
        b = np.stack([np.ones(2), np.ones(2), np.ones(2)]) * [1.0, 2.0]
        t = welch_t(a, b)
        assert t[0] == 0 and t[1] == -np.inf

    def test_minimum(self):
        with pytest.raises(ValueError):
            welch_t(np.zeros((1, 3)), np.zeros((5, 3)))
        with pytest.raises(ValueError):
            welch_t(np.zeros((3, 3)), np.zeros((3, 4)))


def _null_sets(seed, n=400, length=50):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, length)), rng.normal(size=(n, length))


class TestTvla:
    def test_null_passes(self):
        f, r = _null_sets(0)
        rep = tvla_fixed_vs_random(f, r, seed=3)
        assert rep.verdict == "pass" and rep.fail_sample_count == 0
        assert rep.group_sizes == (200, 200, 200, 200)

    def test_leak_fails(self):
        f, r = _null_sets(1)
        f[:, 10] += 1.0
        rep = tvla_fixed_vs_random(f, r)
        assert rep.verdict == "fail" and rep.fail_sample_count >= 1

    def test_order_invariant(self):
        f, r = _null_sets(2)
        perm = np.random.default_rng(0).permutation(len(f))
        a = tvla_fixed_vs_random(f, r, seed=5)
        b = tvla_fixed_vs_random(f[perm], r[perm[::-1]], seed=5)
        assert a.t_scores_group1.tobytes() == b.t_scores_group1.tobytes()
        assert a.t_scores_group2.tobytes() == b.t_scores_group2.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000), c1=st.floats(0, 8), c2=st.floats(0, 8))
    def test_threshold_monotone(self, seed, c1, c2):
        f, r = _null_sets(seed, n=20, length=30)
        f[:, :5] += 1.0
        rep = tvla_fixed_vs_random(f, r, seed=seed)
        lo, hi = sorted((c1, c2))
        assert rep.count_exceeding(lo) >= rep.count_exceeding(hi)
        assert rep.count_exceeding(rep.threshold) == rep.fail_sample_count

    def test_too_few(self):
        with pytest.raises(ValueError, match="at least 4"):
            tvla_fixed_vs_random(np.zeros((3, 5)), np.zeros((10, 5)))

    def test_ragged_interpolated(self):
        rng = np.random.default_rng(3)
        f = [rng.normal(size=int(n)) for n in rng.integers(40, 60, 30)]
        r = [rng.normal(size=int(n)) for n in rng.integers(40, 60, 30)]
        rep = tvla_fixed_vs_random(f, r)
        assert rep.n_samples == int(np.floor(np.median([x.size for x in f + r]) + 0.5))

    def test_report_dict(self):
        rep = TvlaReport(np.array([np.inf, 1.0]), np.array([-np.inf, 0.0]), 4.5, 1, 2)
        d = rep.to_dict()
        assert d["t_scores_group1"][0] == "inf" and d["t_scores_group2"][0] == "-inf"
        assert d["verdict"] == "fail"

    def test_exceedance_count(self):
        assert exceedance_count([5, 5, 1], [5, 1, 5], 4.5) == 1


class TestBatches:
    def _plan(self, n_batches=6, **kw):
        cfg = IslandConfig.alternating(8, 4, voltage_levels=(0.6, 0.65, 0.7, 0.75, 0.8))
        return SynthPlan(cfg, n_batches, 2, KEY, pulse=PulseModel(pulse_width=160, padding=0, **kw))

    def test_batch_size_one(self):
        f, r = make_tvla_batches(self._plan(), bytes(16), batch_size=1, position=0)
        assert len(f) == len(r) == 6
        assert (f.plaintexts == 0).all()
        assert f.batch_size == 1 and f.provenance == "tvla-batch"

    def test_length_window(self):
        f, r = make_tvla_batches(self._plan(40), bytes(16))
        lengths = [row.size for row in list(f.samples) + list(r.samples)]
        assert 5_000 <= min(lengths) and max(lengths) <= 15_000

    def test_fixed_at_position(self):
        pt = bytes(range(100, 116))
        f, r = make_tvla_batches(self._plan(), pt, batch_size=5)
        assert all(bytes(p) == pt for p in f.plaintexts)
        assert not all(bytes(p) == pt for p in r.plaintexts)
        with pytest.raises(ValueError):
            make_tvla_batches(self._plan(), pt, batch_size=4, position=4)

    def test_deterministic(self):
        a = make_tvla_batches(self._plan(), bytes(16))
        b = make_tvla_batches(self._plan(), bytes(16))
        assert a[0] == b[0] and a[1] == b[1]

    def test_pipeline_unit_voltage(self):
        cfg = IslandConfig.independent(2, voltage_levels=(1.0,))
        pulse = PulseModel(pulse_width=4, pulse_shape="rectangular", padding=0)
        out = pipeline_batch_trace(np.array([1.0, 3.0]), np.array([1.0, 1.0]), cfg, pulse)
        np.testing.assert_array_equal(out, [1] * 4 + [4] * 4 + [3] * 4)


@pytest.mark.parametrize("n", [2, 4])
def test_correlation_follows_snr(n):
    from voltscope.cpa import cpa_attack
    fixed = (1.0,)
    one = synthesize(SynthPlan(IslandConfig(voltage_levels=fixed), 20_000, 4, KEY))
    many = synthesize(SynthPlan(IslandConfig.independent(n, voltage_levels=fixed), 20_000, 4, KEY,
                                keep_components=True))
    rho_ap = cpa_attack(one, 0, known_key=KEY).peak_correlation[KEY[0]]
    rho = cpa_attack(many, 0, known_key=KEY).peak_correlation[KEY[0]]
    assert rho == pytest.approx(predicted_rho(rho_ap, snr_empirical(many)), abs=0.05)
