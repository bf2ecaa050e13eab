import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from towerlab.dynamics import DoublingMap, IntermittentMap, ShiftSystem, orbit_batch
from towerlab.errors import InputError
from towerlab.observables import (
    KernelSpec,
    LipFunction,
    autocovariance_reference,
    besov_modulus,
    birkhoff,
    certify_lipschitz,
    constant,
    cosine,
    empirical_covariance,
    empirical_measure_Dn,
    empirical_measure_observable,
    identity,
    integrated_periodogram,
    kantorovich_1d,
    kantorovich_empirical,
    kde_estimate,
    l1_on_grid,
    periodogram_limit,
    periodogram_lip_bound,
    periodogram_quadrature,
    periodogram_sup_observable,
    reference_mean,
    sup_periodogram_gap,
    tracing_stats,
)
from towerlab.transfer import ulam_build


def unit_sampler(n):
    return lambda g: g.random(n)


# -- ergodic sums -------------------------------------------------------------


def test_birkhoff_examples():
    K = birkhoff(constant(2.0), 5)
    assert K(np.zeros(5)) == 10.0 and not K.lip.any()
    assert birkhoff(identity(), 3)(np.array([0.2, 0.4, 0.8])) == pytest.approx(1.4)
    with pytest.raises(InputError):
        K(np.zeros(4))


def test_birkhoff_variance_matches_autocovariance_sum():
    # cos(2 pi x) under doubling is uncorrelated, so Var(S_n / sqrt n) = C(0) = 1/2
    n, trials = 2**10, 4000
    X = orbit_batch(DoublingMap(), np.random.default_rng(3), trials, n, 100)
    s = birkhoff(cosine(), n)(X) / np.sqrt(n)
    se = 0.5 * np.sqrt(2.0 / (trials - 1))
    assert s.var(ddof=1) == pytest.approx(0.5, abs=4 * se)


def test_covariance_examples():
    x = np.random.default_rng(0).random(12)
    assert empirical_covariance(constant(0.0), 8, 4)(x) == 0.0
    f = cosine()
    np.testing.assert_allclose(empirical_covariance(f, 12, 0)(x), birkhoff(f.squared(), 12)(x) / 12)
    with pytest.raises(InputError):
        empirical_covariance(f, 4, -1)


def test_covariance_lag_one_vanishes_for_doubling_cosine():
    n = 2**16
    X = orbit_batch(DoublingMap(), np.random.default_rng(4), 32, n + 1, 100)
    est = empirical_covariance(cosine(), n, 1)(X)
    assert abs(est.mean()) <= 3 * est.std(ddof=1) / np.sqrt(est.size)


def test_reference_mean_examples():
    assert reference_mean(DoublingMap(), identity()) == pytest.approx(0.5, abs=1e-12)
    assert reference_mean(DoublingMap(), cosine()) == pytest.approx(0.0, abs=1e-12)
    # invariant density mass piles up near 0, so the mean of x falls below 1/2
    assert reference_mean(IntermittentMap(0.5), identity()) < 0.45


def test_autocovariance_doubling_oracles():
    C = autocovariance_reference(DoublingMap(), cosine(), 8)["C"]
    np.testing.assert_allclose(C, [0.5] + [0.0] * 8, atol=1e-12)
    centred = LipFunction(lambda x: x - 0.5, 1.0, 0.5)
    C = autocovariance_reference(DoublingMap(), centred, 10)["C"]
    np.testing.assert_allclose(C, 2.0 ** -np.arange(11) / 12, atol=1e-12)
    zero = autocovariance_reference(DoublingMap(), constant(0.0), 5)["C"]
    assert not zero.any()


def test_autocovariance_shift_matches_enumeration():
    P = np.array([[0.7, 0.3], [0.4, 0.6]])
    pi = np.array([4 / 7, 3 / 7])
    system = ShiftSystem(2, matrix=P, stationary=pi)
    g = np.array([1.0, -4 / 3])  # centred: pi . g = 0
    C = autocovariance_reference(system, g, 4)["C"]
    for l in range(5):
        brute = 0.0
        for w in itertools.product(range(2), repeat=l + 1):
            p = pi[w[0]] * np.prod([P[a, b] for a, b in zip(w, w[1:])])
            brute += p * g[w[0]] * g[w[-1]]
        assert C[l] == pytest.approx(brute, abs=1e-14)


def test_autocovariance_intermittent_decays():
    f = identity().shifted(reference_mean(IntermittentMap(0.4), identity()))
    out = autocovariance_reference(IntermittentMap(0.4), f, 40, orbit_len=2 * 10**6, n_batches=20)
    C = out["C"]
    assert C[0] > 0
    assert abs(C[40]) < 0.2 * C[0]


# -- Kantorovich ---------------------------------------------------------------


def test_kantorovich_examples():
    assert kantorovich_1d(np.array([0.5])) == pytest.approx(0.25)
    assert kantorovich_1d(np.array([0.0])) == pytest.approx(0.5)
    n = 10_000
    assert kantorovich_1d((np.arange(n) + 0.5) / n) < 1e-4
    with pytest.raises(InputError):
        kantorovich_1d(np.array([0.6, 0.2]))
    assert empirical_measure_Dn(DoublingMap(), 0.5, 1) == pytest.approx(0.25)


@settings(max_examples=30)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_kantorovich_matches_piecewise_trapezoid(xs):
    # |F_n(s) - s| is linear between sample points and the levels k/n,
    # so the trapezoid rule on those breakpoints is exact
    x = np.sort(np.array(xs))
    n = x.size
    br = np.unique(np.concatenate([[0.0, 1.0], x, np.arange(n + 1) / n]))
    mid = 0.5 * (br[:-1] + br[1:])
    # evaluate one-sided limits through segment midpoints
    Fm = np.searchsorted(x, mid, side="right") / n
    left = np.abs(Fm - br[:-1])
    right = np.abs(Fm - br[1:])
    direct = float(np.sum(0.5 * (left + right) * np.diff(br)))
    assert kantorovich_1d(x) == pytest.approx(direct, abs=1e-12)


def test_kantorovich_against_ulam_cdf():
    op = ulam_build(IntermittentMap(0.3), 512)
    cdf = op.cdf()
    x = np.sort(np.random.default_rng(1).random(7))
    n = x.size
    # both CDFs are piecewise linear; add the crossings F(s) = k/n as knots
    br = np.unique(np.concatenate([op.edges, x, cdf.quantile(np.arange(n + 1) / n)]))
    mid = 0.5 * (br[:-1] + br[1:])
    Fm = np.searchsorted(x, mid, side="right") / n
    left = np.abs(Fm - cdf.cdf(br[:-1]))
    right = np.abs(Fm - cdf.cdf(br[1:]))
    direct = float(np.sum(0.5 * (left + right) * np.diff(br)))
    assert kantorovich_1d(x, cdf) == pytest.approx(direct, abs=1e-12)


arrays = st.lists(st.floats(0, 1), min_size=1, max_size=15).map(np.array)


@given(arrays, arrays, arrays)
def test_kantorovich_is_a_metric(a, b, c):
    ab, ba = kantorovich_empirical(a, b), kantorovich_empirical(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert kantorovich_empirical(a, a) == 0.0
    assert ab <= kantorovich_empirical(a, c) + kantorovich_empirical(c, b) + 1e-12
    assert ab == pytest.approx(stats.wasserstein_distance(a, b), abs=1e-12)


def test_dn_observable_lipschitz():
    obs = empirical_measure_observable(16)
    cert = certify_lipschitz(obs, unit_sampler(16), np.random.default_rng(2), trials=1000)
    assert cert["ok"], cert


# -- kernel density -------------------------------------------------------------


def test_kde_single_point_triangle():
    s = np.linspace(-1, 2, 30001)
    h = kde_estimate(np.array([0.5]), s)
    assert integrate.trapezoid(h, s) == pytest.approx(1.0, abs=1e-3)
    assert s[np.argmax(h)] == pytest.approx(0.5, abs=1e-3)
    assert KernelSpec().mass() == pytest.approx(1.0)


def test_kde_doubling_l1():
    s = np.linspace(0, 1, 2001)
    x = orbit_batch(DoublingMap(), np.random.default_rng(0), 1, 2**16, 100)[0]
    assert l1_on_grid(kde_estimate(x, s), np.ones_like(s), s) <= 0.05


@pytest.mark.slow
def test_kde_intermittent_error_decreases():
    s = np.linspace(0, 1, 2001)
    op = ulam_build(IntermittentMap(0.5), 2**12)
    target = np.interp(s, 0.5 * (op.edges[:-1] + op.edges[1:]), op.density)
    X = orbit_batch(IntermittentMap(0.5), np.random.default_rng(0), 16, 2**16, 10_000)
    err = [np.mean([l1_on_grid(kde_estimate(x[: 2**k], s), target, s) for x in X]) for k in range(12, 17)]
    assert np.all(np.diff(err) < 0), err


def test_kde_rejects_bad_bandwidth():
    with pytest.raises(InputError):
        KernelSpec(exponent=0.0)
    with pytest.raises(InputError):
        kde_estimate(np.array([0.1]), np.array([0.0]), a=-1.0)


def test_besov_examples():
    out = besov_modulus(np.ones(1025), [0.01, 0.1])
    assert not out["modulus"].any() and out["tau_hat"] is None
    op = ulam_build(IntermittentMap(0.5), 2**12)
    out = besov_modulus(op.density, [2.0**-j for j in range(3, 9)])
    assert out["tau_hat"] >= 0.4
    with pytest.raises(InputError):
        besov_modulus(np.ones(9), [1e-4])


# -- periodogram -----------------------------------------------------------------


def test_periodogram_examples():
    assert integrated_periodogram(np.zeros(16), 2.0)["J"] == 0.0
    assert integrated_periodogram(np.ones(1), 1.7)["J"] == pytest.approx(1.7)
    f = np.random.default_rng(7).standard_normal(64)
    assert integrated_periodogram(f, 1.3)["J"] == pytest.approx(periodogram_quadrature(f, 1.3), abs=1e-8)
    with pytest.raises(InputError):
        integrated_periodogram(f, -0.1)


def test_periodogram_closed_form_matches_gauss_quadrature():
    g = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        n = int(g.integers(1, 257))
        f = g.standard_normal(n)
        w = float(g.uniform(0, 2 * np.pi))
        ref = periodogram_quadrature(f, w, panels=200, rule="gauss")
        worst = max(worst, abs(integrated_periodogram(f, w)["J"] - ref))
    assert worst < 1e-8


def test_periodogram_truncation_reported():
    f = np.random.default_rng(9).standard_normal(50)
    full = integrated_periodogram(f, 1.0)
    cut = integrated_periodogram(f, 1.0, m_max=10)
    assert full["truncation"] == 0.0
    assert abs(full["J"] - cut["J"]) <= cut["truncation"] + 1e-12


def test_periodogram_limit_examples():
    C = np.array([0.5, 0.0, 0.0, 0.0])
    w = np.linspace(0, 2 * np.pi, 9)
    np.testing.assert_allclose(periodogram_limit(C, w)["J"], w / 2, atol=1e-15)
    assert periodogram_limit(np.array([0.3, 0.2, 0.1]), 0.0)["J"] == 0.0
    assert periodogram_limit(np.array([0.7, 0.0]), 2 * np.pi)["J"] == pytest.approx(2 * np.pi * 0.7)
    assert periodogram_limit(np.array([1.0, 0.5, 0.25]), 1.0, lag_max=1)["tail_bound"] == pytest.approx(0.25)


def test_sup_gap_examples():
    assert sup_periodogram_gap(np.zeros(32), np.zeros(4))["gap"] == 0.0
    with pytest.raises(InputError):
        sup_periodogram_gap(np.zeros(8), np.zeros(2), N=1)


def test_sup_gap_doubling_cosine():
    n = 2**14
    X = orbit_batch(DoublingMap(), np.random.default_rng(10), 64, n, 100)
    C = np.array([0.5, 0.0])
    gaps = [sup_periodogram_gap(cosine()(x), C)["gap"] for x in X]
    assert np.mean(gaps) <= 0.05


def test_sup_gap_grid_refinement():
    x = orbit_batch(DoublingMap(), np.random.default_rng(11), 1, 2**12, 100)[0]
    f = cosine()(x)
    C = np.array([0.5, 0.0])
    for N in (64, 128, 256):
        a = sup_periodogram_gap(f, C, N)
        b = sup_periodogram_gap(f, C, 2 * N)
        assert abs(b["gap"] - a["gap"]) <= a["c_disc"] / N


def test_periodogram_observable_certified():
    for n in (16, 64, 256):
        obs = periodogram_sup_observable(cosine(), n, N=64)
        cert = certify_lipschitz(obs, unit_sampler(n), np.random.default_rng(n), trials=200)
        assert cert["ok"], (n, cert)


def test_periodogram_lip_constant_stable():
    n = 2.0 ** np.arange(8, 15)
    c = np.array([periodogram_lip_bound(int(k), 2 * np.pi, 1.0) * k / (1 + np.log(k)) for k in n])
    assert c.max() / c.min() < 1.25


# -- tracing ------------------------------------------------------------------------


def test_tracing_examples():
    x = np.random.default_rng(1).random(50)
    out = tracing_stats(x, np.vstack([x, 1 - x]), 0.1)
    assert out["S_A"] == 0.0 and out["M_A"] == 0.0
    shadow = np.clip(x + 0.05, None, None)
    assert tracing_stats(x, shadow[None], 0.01)["S_A"] == pytest.approx(0.05)
    assert tracing_stats(x, shadow[None], 0.01)["M_A"] == 1.0
    assert tracing_stats(x, shadow[None], 0.1)["M_A"] == 0.0
    with pytest.raises(InputError):
        tracing_stats(x, np.empty((0, 50)), 0.1)
    with pytest.raises(InputError):
        tracing_stats(x, x[None], 0.0)


def test_tracing_monotone_under_pool_growth():
    g = np.random.default_rng(12)
    n = 2**10
    x = orbit_batch(DoublingMap(), g, 1, n, 100)[0]
    # candidates start in A = [0, 1/2]
    pool = orbit_batch(DoublingMap(), g, 1000, n, 0)
    pool = pool[pool[:, 0] <= 0.5]
    prev = (np.inf, np.inf)
    for size in (10, 50, 200, pool.shape[0]):
        out = tracing_stats(x, pool[:size], 0.05)
        assert out["S_A"] <= prev[0] and out["M_A"] <= prev[1]
        prev = (out["S_A"], out["M_A"])


# -- Lipschitz certification ----------------------------------------------------------


@pytest.mark.parametrize(
    "obs",
    [
        birkhoff(cosine(), 10),
        birkhoff(identity(), 10),
        empirical_covariance(cosine(), 8, 3),
        empirical_covariance(identity().shifted(0.5), 8, 0),
    ],
    ids=["birkhoff-cos", "birkhoff-id", "cov-cos", "cov-id"],
)
def test_builtin_observables_certified(obs):
    cert = certify_lipschitz(obs, unit_sampler(obs.arity), np.random.default_rng(0), trials=1000)
    assert cert["ok"], cert


def test_certification_catches_understated_constant():
    obs = birkhoff(cosine(), 4)
    obs.lip[:] = 1.0
    cert = certify_lipschitz(obs, unit_sampler(4), np.random.default_rng(0), trials=500)
    assert not cert["ok"]
