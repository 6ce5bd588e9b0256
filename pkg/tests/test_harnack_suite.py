import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parabolic_mvf.gaussian_core import GaussianSpec, gaussian_value
from parabolic_mvf.harnack_suite import (Cylinder, HarnackConfigError, build_chain, chain_constants,
                                         compact_set_Krm, compute_constants, cut_depth, exact_factory,
                                         harnack_ball_check, harnack_ball_constant, invariant_harnack_check,
                                         m_minus, write_chain_csv)


def _heat_translate(xi, tau):
    spec = GaussianSpec(np.eye(1))
    return lambda x, t: gaussian_value(spec, x, t, np.array(xi, float), tau)


@pytest.fixture(scope="module")
def ball_constants(heat1, heat_field1):
    return compute_constants(heat_field1, exact_factory(heat1), 3, [0.3])


@pytest.fixture(scope="module")
def chain_consts(heat1, heat_field1):
    return chain_constants(heat_field1, exact_factory(heat1), 3, 4.0)


def test_m_minus_against_mpmath():
    mp.mp.dps = 30
    ref = (3 * (4 * mp.pi / 3) / 5) / (2 * mp.pi) * (4 * mp.log(mp.mpf(5) / 4)) ** mp.mpf(2.5)
    assert m_minus(1, 3, 1.0, 1.0) == pytest.approx(float(ref), rel=1e-13)
    # radius and ellipticity dependence
    assert m_minus(1, 3, 0.5, 1.0) == pytest.approx(float(ref) * 0.25, rel=1e-13)
    assert m_minus(2, 4, 1.0, 2.0) == pytest.approx(
        float(mp.mpf(2) ** (mp.mpf(-2) / 3) * (4 * mp.pi ** 2 / 2 / 6) * mp.mpf(1) / (2 * mp.pi) ** 2
              * (6 * mp.log(mp.mpf(5) / 4)) ** 3), rel=1e-12)


def test_cut_depth_formula():
    assert cut_depth(1.0, 1, 3, 1.0) == pytest.approx(1 / (4 * math.pi))
    assert cut_depth(0.5, 2, 2, 16.0) == pytest.approx(0.25 / (4 * math.pi * 4.0))


def test_literal_cut_gives_bottom_point(heat_field1):
    K = compact_set_Krm(heat_field1, 0.3, 3)
    assert K.single_point and not K.empty
    assert K.points_t[0] == pytest.approx(-K.ball_depth)


def test_wider_cut_gives_region(heat_field1):
    K = compact_set_Krm(heat_field1, 0.1, 3, cut_lambda=4.0)
    assert not K.empty and not K.single_point
    assert np.all(-K.points_t >= K.cut_depth - 1e-15)
    assert len(K.points_t) > 10


def test_small_cut_lambda_is_empty(heat_field1):
    K = compact_set_Krm(heat_field1, 0.3, 3, cut_lambda=0.5)
    assert K.empty


def test_misconfigured_cut_raises(heat1, heat_field1):
    with pytest.raises(HarnackConfigError):
        compute_constants(heat_field1, exact_factory(heat1), 3, [0.3], cut_lambda=0.5)
    with pytest.raises(HarnackConfigError):
        compute_constants(heat_field1, exact_factory(heat1), 2, [0.3])


def test_ball_constant_identity(ball_constants):
    c = ball_constants
    assert c.identity_defect() == 0.0
    assert c.C_K == harnack_ball_constant(c.M_plus, c.m_minus, c.theta, c.N, c.m)
    assert 0 < c.theta < 1 and c.M_plus > 0
    # the closed-form lower bound is below the sampled kernel minimum
    assert c.claim_iv_min_ratio >= 1


@pytest.mark.parametrize("u", [
    lambda x, t: np.ones(np.shape(t)),
    _heat_translate([2.0], -5.0),
    lambda x, t: _heat_translate([0.5], -2.0)(x, t) + _heat_translate([-1.0], -5.0)(x, t),
])
def test_ball_harnack(heat_field1, ball_constants, u):
    rep = harnack_ball_check(u, heat_field1, 0.3, 3, ball_constants)
    assert rep.passed and rep.ratio <= rep.C_K


def test_ball_harnack_needs_positive_value(heat_field1, ball_constants):
    with pytest.raises(ValueError):
        harnack_ball_check(lambda x, t: np.zeros(np.shape(t)), heat_field1, 0.3, 3, ball_constants)


def test_small_slope_chain():
    ch = build_chain(([0.0], 0.0), ([0.0], -0.5), 0.5, 0.2, 0.3)
    assert ch.case == "small-slope" and ch.m == 10
    assert ch.r == pytest.approx(0.5)
    assert all(ch.invariants().values())


def test_large_slope_chain():
    ch = build_chain(([0.0], 0.0), ([1.0], -0.1), 0.5, 0.2, 0.3)
    assert ch.case == "large-slope"
    assert ch.m == math.ceil(0.2 * 1.0 / (0.09 * 0.1))
    assert np.linalg.norm(ch.y) <= 0.3
    assert all(ch.invariants().values())


def test_chain_rejects_wrong_time_order():
    with pytest.raises(ValueError):
        build_chain(([0.0], -1.0), ([0.0], 0.0), 0.5, 0.2, 0.3)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(0.01, 0.75), st.floats(-0.5, 0.5), st.floats(0.0, 0.25))
def test_chain_invariants_random(xp, tp_depth, xm, gap):
    tp = -gap * 0.25
    tm = tp - tp_depth
    ch = build_chain(([xp], tp), ([xm], tm), 0.5, 0.05, 0.15)
    inv = ch.invariants()
    assert all(inv.values()), inv


def test_cylinder_intervals():
    c = Cylinder([0.0], 0.0, 2.0, "lower")
    assert c.time_interval() == (-0.75 * 4, -0.5 * 4)
    assert c.spatial_radius() == 1.0
    u = Cylinder([0.0], 0.0, 2.0, "upper")
    assert u.time_interval() == (-1.0, 0.0)
    assert Cylinder([0.0], 0.0, 2.0).contains(np.array([[1.9]]), np.array([-3.9]))[0]
    with pytest.raises(ValueError):
        Cylinder([0.0], 0.0, 1.0, iota=0.6)
    x, t = c.grid(5, 5)
    assert np.all(c.contains(x, t))


def test_chain_constants(chain_consts):
    c = chain_consts
    assert c.kappa1 > 0 and c.theta1 > 0 and c.delta1 > 0
    assert c.r0 == 0.5
    expo = max(1 / (c.kappa1 * c.r0 ** 2), 4 * c.kappa1 / (c.theta1 ** 2 * 0.25))
    assert c.log_C_H == pytest.approx(expo * math.log(c.C_D), rel=1e-14)


@pytest.mark.parametrize("u", [
    lambda x, t: np.ones(np.shape(t)),
    _heat_translate([0.0], -10.0),
    lambda x, t: _heat_translate([0.5], -2.0)(x, t) + _heat_translate([-1.0], -5.0)(x, t),
])
def test_invariant_harnack(chain_consts, u):
    rep = invariant_harnack_check(u, ([0.0], 0.0), 1.0, chain_consts, n_pairs=20, seed=3)
    assert rep.passed
    assert len(rep.chains) == 20
    for ch in rep.chains:
        assert all(ch["invariants"].values()) and ch["inside_Q"]
        assert ch["log_ratio"] <= ch["log_bound"]


def test_chain_csv(tmp_path):
    ch = build_chain(([0.0], 0.0), ([0.2], -0.3), 0.5, 0.2, 0.3)
    p = tmp_path / "chain.csv"
    write_chain_csv(ch, p)
    rows = p.read_text().splitlines()
    assert rows[0] == "j,t,x1" and len(rows) == ch.m + 2


def test_pure_time_descent_chain():
    k1, r0 = 0.2, 0.5
    ch = build_chain(([0.3], 0.0), ([0.3], -2.5 * k1 * r0 ** 2), r0, k1, 0.3)
    assert ch.case == "small-slope" and ch.m == 3
    assert np.all(ch.y == 0)
    assert all(ch.invariants().values())
