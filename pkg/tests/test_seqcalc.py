import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from towerlab.errors import InputError
from towerlab.seqcalc import (
    MomentSeq,
    WeightSystem,
    build_weight_v,
    convolve,
    decade_increment,
    domination_violation,
    random_order1_sequence,
    random_weight_system,
    tail_sum,
    weight_sum_over_r,
)

H = 2**12


def power(p, Q, horizon=H):
    return MomentSeq.from_function(lambda n: n**-p, Q, horizon, start=1)


def test_delta_is_identity():
    delta = MomentSeq(np.array([1.0]), 5.0, H)
    c = power(4.0, 2.0)
    np.testing.assert_allclose(convolve(delta, c).values, c.values, rtol=0, atol=0)


def test_geometric_self_convolution():
    g = MomentSeq.from_function(lambda n: 2.0**-n, 3.0, 200)
    n = np.arange(200)
    np.testing.assert_allclose(convolve(g, g).values, (n + 1) * 2.0**-n, rtol=1e-12, atol=1e-300)


def test_convolution_tag_is_min_and_is_honest():
    w = convolve(power(4.0, 2.0), power(3.0, 1.0))
    assert w.Q == 1.0
    assert w.check(1.0)
    assert not w.check(2.0)


def test_convolve_rejects_unverified_claims():
    with pytest.raises(InputError) as err:
        convolve(power(3.0, 2.0), power(4.0, 2.0))
    assert err.value.code == "TAG_VERIFICATION"


def test_negative_entries_rejected():
    with pytest.raises(InputError):
        MomentSeq(np.array([1.0, -1e-3]), 1.0)


def test_tail_sum_lowers_order_and_slope():
    d = tail_sum(power(4.0, 2.0, 2**14))
    assert d.Q == 1.0
    n = np.arange(10, 1000)
    slope = np.polyfit(np.log(n), np.log(d.values[n]), 1)[0]
    assert slope == pytest.approx(-3.0, abs=0.1)


def test_tail_sum_needs_order_one():
    with pytest.raises(InputError):
        tail_sum(MomentSeq(np.ones(3), 0.5, 3))


def test_decade_increment_examples():
    assert decade_increment(np.zeros(50)) == 0.0
    assert decade_increment(np.full(100, 2.0)) == 0.0
    assert decade_increment(np.arange(1, 101, dtype=float)) == pytest.approx(0.9)


seqs = st.integers(0, 2**31).map(lambda s: random_order1_sequence(np.random.default_rng(s), 512))


@settings(max_examples=25)
@given(seqs, seqs, seqs)
def test_convolution_associative(a, b, c):
    left = np.convolve(np.convolve(a.values, b.values), c.values)[:512]
    right = np.convolve(a.values, np.convolve(b.values, c.values))[:512]
    np.testing.assert_allclose(left, right, rtol=1e-10, atol=1e-14 * max(left.max(), 1e-300))


@settings(max_examples=25)
@given(seqs, seqs)
def test_convolution_commutative(a, b):
    if a.check() and b.check():
        np.testing.assert_allclose(convolve(a, b).values, convolve(b, a).values, rtol=1e-12, atol=0)


@given(seqs)
def test_tail_sum_nonincreasing(c):
    d = tail_sum(c).values
    assert np.all(np.diff(d) <= 0)
    assert d[0] == pytest.approx(c.total)


def test_weight_u_examples():
    M = np.array([4.0, 2.0, 1.0, 0.5])
    t1 = WeightSystem("Type1", M)
    t2 = WeightSystem("Type2", M)
    assert t1.u(0, 2) == 1.0
    assert t2.u(0, 2) == 3.0
    assert t2.u(1, 4) == pytest.approx(3.5 / 3)
    assert t1.u(0, 10) == 0.0
    with pytest.raises(InputError):
        t1.u(2, 2)


def test_weight_sum_examples():
    M = 0.5 ** np.arange(30)
    t1 = WeightSystem("Type1", M)
    assert weight_sum_over_r(t1, 3) == pytest.approx(M[3:].sum())
    t2 = WeightSystem("Type2", M)
    assert weight_sum_over_r(t2, 1) == pytest.approx(M.sum())
    with pytest.raises(InputError):
        weight_sum_over_r(t1, 0)


weights = st.integers(0, 2**31).map(lambda s: random_weight_system(np.random.default_rng(s)))


@given(weights, st.integers(1, 120))
def test_weight_sum_bounded_by_sigma(w, m):
    assert weight_sum_over_r(w, m) <= w.Sigma * (1 + 1e-12)


@settings(max_examples=30)
@given(weights, st.integers(0, 2**31))
def test_built_weights_dominate(u, s):
    c = random_order1_sequence(np.random.default_rng(s), 256)
    assume(c.check(1.0))
    v = build_weight_v(u, c, check_kmax=None)
    assert v.kind == u.kind
    assert domination_violation(u, c, v, 48) <= 0


def test_build_weight_v_type1_scaling():
    u = WeightSystem("Type1", np.array([1.0, 2.0, 3.0]))
    c = MomentSeq(np.array([0.0, 0.25, 0.25]), 1.0, 64)
    np.testing.assert_allclose(build_weight_v(u, c).M, 0.5 * u.M)


def test_build_weight_v_needs_order_one():
    u = WeightSystem("Type1", np.ones(4))
    with pytest.raises(InputError):
        build_weight_v(u, MomentSeq(np.ones(3), 0.0, 3))


def test_domination_violation_detects_too_small_v():
    u = WeightSystem("Type2", 0.7 ** np.arange(40))
    c = MomentSeq(np.array([0.0, 1.0, 0.5]), 1.0, 64)
    v = build_weight_v(u, c)
    shrunk = WeightSystem("Type2", 0.5 * v.M)
    assert domination_violation(u, c, shrunk, 30) > 0
