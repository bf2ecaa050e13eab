import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from towerlab.dynamics import ShiftSystem
from towerlab.errors import BudgetExceeded, InputError
from towerlab.martingale import (
    ExactShiftContext,
    check_hoeffding_azuma,
    difference_decay,
    decompose,
    distance_probe,
    evaluate,
    exact_Dp,
    exact_Kp,
    feature_probe,
    first_symbol_probe,
    hoeffding_azuma_ratio,
    integral_closeness,
    martingale_residual,
    random_observable,
    telescoping_residual,
    tower_residual,
)
from towerlab.observables import Observable


def ctx_for(n=4, depth=4, probs=(0.5, 0.5), beta=0.5):
    return ExactShiftContext(ShiftSystem(len(probs), probs=probs, beta=beta), n, depth)


def const_obs(ctx, c=1.5):
    return Observable(ctx.n, lambda pts: np.full(pts.shape[:-2], c), np.zeros(ctx.n), "const")


def test_context_validation():
    with pytest.raises(BudgetExceeded):
        ExactShiftContext(ShiftSystem(2, probs=(0.5, 0.5)), 20, 6)
    markov = ShiftSystem(2, matrix=((0.5, 0.5), (0.5, 0.5)), stationary=(0.5, 0.5))
    with pytest.raises(InputError):
        ExactShiftContext(markov, 3, 3)
    ctx = ctx_for(3, 3, (0.2, 0.3, 0.5))
    w = ctx.word_weights(ctx.all_words())
    assert math.fsum(w) == pytest.approx(1.0, abs=1e-12)


def test_Kp_examples():
    ctx = ctx_for(probs=(0.3, 0.7))
    K = random_observable(ctx, np.random.default_rng(0))
    suffix = np.array([1, 0, 1, 1, 0, 0, 1], np.int8)
    assert exact_Kp(ctx, K, 0, suffix) == pytest.approx(float(evaluate(ctx, K, suffix[None])[0]))
    # x_0 read as 0/1 under Bernoulli(q): conditioning away x_0 gives q
    x0 = first_symbol_probe(ctx)
    for s in itertools.product(range(2), repeat=3):
        assert exact_Kp(ctx, x0, 1, np.array(s, np.int8)) == pytest.approx(0.7)
    with pytest.raises(InputError):
        exact_Kp(ctx, K, -1, suffix)


def test_Kp_of_late_coordinates_is_unchanged():
    ctx = ctx_for(n=4, depth=3)
    K = feature_probe(ctx, [0.5, -0.3, 0.2], 2)
    g = np.random.default_rng(1)
    for _ in range(10):
        word = g.integers(0, 2, ctx.length).astype(np.int8)
        base = exact_Kp(ctx, K, 0, word)
        for p in (1, 2):
            assert exact_Kp(ctx, K, p, word[p:]) == pytest.approx(base, abs=1e-15)


def test_Dp_examples():
    ctx = ctx_for()
    c = const_obs(ctx)
    x0 = first_symbol_probe(ctx)
    g = np.random.default_rng(2)
    for p in range(ctx.length - 1):
        suffix = g.integers(0, 2, ctx.length - p).astype(np.int8)
        assert exact_Dp(ctx, c, p, suffix) == 0.0
        if p >= 1:
            assert exact_Dp(ctx, x0, p, suffix) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=20)
@given(st.integers(0, 2**31), st.integers(1, 6), st.floats(0.1, 0.9))
def test_decomposition_identities(seed, n, q):
    ctx = ctx_for(n=n, depth=3, probs=(q, 1 - q))
    K = random_observable(ctx, np.random.default_rng(seed))
    dec = decompose(ctx, K)
    assert martingale_residual(dec) < 1e-12
    assert telescoping_residual(dec) < 1e-12
    assert tower_residual(ctx, K, dec, np.random.default_rng(seed), draws=10) < 1e-12


def test_martingale_identity_exhaustive_small():
    ctx = ctx_for(n=4, depth=5)  # 8 symbols, every p <= 8
    K = random_observable(ctx, np.random.default_rng(3))
    for p in range(ctx.length):
        for tail in itertools.product(range(2), repeat=ctx.length - p - 1):
            tail = np.array(tail, np.int8)
            s = sum(0.5 * exact_Dp(ctx, K, p, np.concatenate([[a], tail]).astype(np.int8)) for a in range(2))
            assert abs(s) < 1e-12


def test_hoeffding_azuma_examples():
    ctx = ctx_for()
    out = hoeffding_azuma_ratio(ctx, const_obs(ctx))
    assert out["ratio"] == 1.0
    out = hoeffding_azuma_ratio(ctx, first_symbol_probe(ctx))
    assert out["lhs"] == pytest.approx(math.cosh(0.5))
    # only D_0 = x_0 - 1/2 is nonzero, so the exponent is 1/4
    assert out["bound"] == pytest.approx(math.exp(0.25))
    assert out["ratio"] < 1


def test_hoeffding_azuma_random_batch():
    ctx = ExactShiftContext(ShiftSystem(2, probs=(0.5, 0.5)), 8, 6)
    g = np.random.default_rng(4)
    batch = [random_observable(ctx, g) for _ in range(100)]
    assert check_hoeffding_azuma(ctx, batch) <= 1.0


def test_difference_decay_first_symbol_is_exact_zero():
    ctx = ctx_for()
    fit = difference_decay(ctx, first_symbol_probe(ctx), window=(1, ctx.length - 1))
    assert fit["exact_zero"]
    assert fit["sup_D"][0] == pytest.approx(0.5)


@pytest.mark.parametrize("beta", [0.3, 0.5, 0.7])
def test_difference_decay_distance_probe_decays(beta):
    ctx = ExactShiftContext(ShiftSystem(2, probs=(0.5, 0.5), beta=beta), 2, 10)
    fit = difference_decay(ctx, distance_probe(ctx, np.zeros(10, np.int8)), window=(0, 9))
    assert not fit["exact_zero"]
    assert fit["rho"] < 1
    assert fit["rho"] <= beta + 0.05


def test_difference_decay_shifted_probe_starts_late():
    ctx = ctx_for(n=5, depth=4)
    J = 3
    fit = difference_decay(ctx, feature_probe(ctx, [0.4, 0.3, -0.2, 0.1], J))
    sup = fit["sup_D"]
    assert np.all(sup[:J] < 1e-15)
    assert sup[J] > 0


def test_integral_closeness_geometric():
    ctx = ExactShiftContext(ShiftSystem(2, probs=(0.5, 0.5), beta=0.5), 2, 10)
    fit = integral_closeness(ctx, distance_probe(ctx, np.zeros(10, np.int8)))
    assert fit["rho"] < 1
    assert fit["gap"][-1] == pytest.approx(0.0, abs=1e-15)
