import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parabolic_mvf.operator_model import (OperatorError, SolutionField, SpaceTimePoint, apply_adjoint,
                                          apply_operator, fd_gradient, holder_quotient, make_operator,
                                          sample_points, time_reversed_adjoint, verify_hypotheses)


def poly_x2(N=1):
    return SolutionField(N, lambda x, t: x[..., 0] ** 2 + 2 * t)


def const(v, N=1):
    return SolutionField(N, lambda x, t: np.full(np.shape(x)[:-1], float(v)))


def test_point_validation():
    p = SpaceTimePoint.of([0.5, 1.0], 2.0)
    assert p.N == 2 and np.allclose(p.xa, [0.5, 1.0])
    with pytest.raises(Exception):
        SpaceTimePoint.of([np.nan], 0.0)


def test_apply_operator_caloric_polynomial(heat1, rng):
    x, t = sample_points(1, 50, 2.0, (-1, 1), seed=1)
    assert np.max(np.abs(apply_operator(heat1, poly_x2(), x, t))) < 1e-6


def test_apply_operator_linear(heat1):
    x, t = sample_points(1, 50, 2.0, (-1, 1), seed=2)
    u = SolutionField(1, lambda x, t: x[..., 0])
    assert np.max(np.abs(apply_operator(heat1, u, x, t))) < 1e-8


def test_apply_operator_constant_gives_c():
    op = make_operator("heat", 1, {"potential": 1.0})
    x, t = sample_points(1, 20, 2.0, (-1, 1), seed=3)
    assert np.array_equal(apply_operator(op, const(1.0), x, t), np.ones(20))


def test_apply_adjoint_examples():
    op = make_operator("heat", 2)
    x, t = sample_points(2, 30, 1.0, (-1, 1), seed=4)
    v = SolutionField(2, lambda x, t: np.sin(x[..., 0]) * np.exp(0.3 * t) + x[..., 1] ** 2)
    # time reflection: L* v(x, t) = L w(x, -t) with w(x, s) = v(x, -s)
    w = SolutionField(2, lambda x, s: v.value(x, -s))
    assert np.allclose(apply_adjoint(op, v, x, t), apply_operator(op, w, x, -t), atol=1e-6)
    op_c = make_operator("heat", 1, {"potential": -0.7})
    x1, t1 = sample_points(1, 10, 1.0, (-1, 1), seed=5)
    assert np.allclose(apply_adjoint(op_c, const(1.0), x1, t1), -0.7)
    op_b = make_operator("heat", 2, {"drift_matrix": [[0.3, 0.1], [0.0, -0.5]], "potential": 0.2})
    got = apply_adjoint(op_b, const(1.0, 2), x, t)
    assert np.allclose(got, 0.2 - (0.3 - 0.5))


def test_time_reversed_adjoint_consistency():
    op = make_operator("trig_perturbed", 1, {"epsilon": 0.2, "drift": [0.3], "potential": 0.1})
    rev = time_reversed_adjoint(op)
    x, t = sample_points(1, 20, 2.0, (-1, 1), seed=6)
    v = SolutionField(1, lambda x, t: np.cos(x[..., 0]) * np.exp(0.5 * t))
    w = SolutionField(1, lambda x, s: v.value(x, -s))
    assert np.allclose(apply_adjoint(op, v, x, t), apply_operator(rev, w, x, -t), atol=1e-6)


def test_verify_hypotheses_constant():
    op = make_operator("diagonal", 2, {"diag": [1.0, 2.0]})
    x, t = sample_points(2, 40, 2.0, (0, 1), seed=7)
    rep = verify_hypotheses(op, x, t)
    assert rep.passed
    assert all(v == 0.0 for v in rep.holder_quotients.values())


def test_verify_hypotheses_trig_grid():
    # grid maximisation over [-pi, pi] x [0, 1]
    op = make_operator("trig_perturbed", 1, {"epsilon": 0.1}, lam=0.9, Lam=1.1)
    xs = np.linspace(-math.pi, math.pi, 61)
    ts = np.linspace(0, 1, 5)
    X, T = np.meshgrid(xs, ts, indexing="ij")
    rep = verify_hypotheses(op, X.reshape(-1, 1), T.ravel(), directions=[[1.0], [-1.0]])
    assert rep.passed, rep.violations
    assert rep.ellipticity_min >= 0.9 - 1e-12 and rep.ellipticity_max <= 1.1 + 1e-12
    assert rep.holder_quotients["a"] <= 0.1 + 1e-12


def test_verify_hypotheses_forced_violation():
    op = make_operator("diagonal", 1, {"diag": [2.0]}, lam=1.0, Lam=1.0)
    x, t = sample_points(1, 10, 1.0, (0, 1), seed=8)
    rep = verify_hypotheses(op, x, t)
    assert not rep.passed
    assert any("ellipticity" in v for v in rep.violations)


def test_make_operator_errors():
    with pytest.raises(OperatorError):
        make_operator("unknown", 1)
    with pytest.raises(OperatorError):
        make_operator("diagonal", 2, {"diag": [1.0, -1.0]})


def test_fd_gradient_matches_analytic(rng):
    u = SolutionField(2, lambda x, t: np.sin(x[..., 0]) * np.cos(x[..., 1]) * np.exp(t),
                      grad=lambda x, t: np.stack([np.cos(x[..., 0]) * np.cos(x[..., 1]),
                                                  -np.sin(x[..., 0]) * np.sin(x[..., 1])], -1)
                      * np.exp(t)[..., None])
    x = rng.uniform(-1, 1, (20, 2))
    t = rng.uniform(-1, 1, 20)
    assert np.allclose(fd_gradient(u.value, x, t, 2, 1e-3), u.gradient(x, t), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 15), extra=st.integers(1, 10), seed=st.integers(0, 1000))
def test_holder_quotient_monotone_in_samples(n, extra, seed):
    op = make_operator("trig_perturbed", 1, {"epsilon": 0.3})
    x, t = sample_points(1, n + extra, 2.0, (0, 1), seed=seed)
    small = verify_hypotheses(op, x[:n], t[:n])
    big = verify_hypotheses(op, x, t)
    for k in small.holder_quotients:
        assert big.holder_quotients[k] >= small.holder_quotients[k]
    assert big.ellipticity_min <= small.ellipticity_min and big.ellipticity_max >= small.ellipticity_max


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=3), st.floats(-2, 2))
def test_constant_field_gives_c(xs, t):
    N = len(xs)
    op = make_operator("heat", N, {"potential": 0.4, "drift": [0.1] * N})
    x = np.array([xs])
    assert apply_operator(op, const(1.0, N), x, np.array([t]))[0] == 0.4


def test_holder_quotient_simple():
    x = np.array([[0.0], [1.0]])
    t = np.array([0.0, 0.0])
    assert holder_quotient(np.array([0.0, 2.0]), x, t, 1.0) == 2.0


def test_unknown_parameter_rejected():
    with pytest.raises(OperatorError, match="eps"):
        make_operator("trig_perturbed", 1, {"eps": 0.1})
    with pytest.raises(OperatorError, match="scale"):
        make_operator("heat", 1, {"scale": 2.0})
    assert make_operator("scaled_heat", 1, {"scale": 2.0}).Lam == 2.0
