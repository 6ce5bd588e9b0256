import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from parabolic_mvf.gaussian_core import (GaussianSpec, KernelError, check_gaussian_derivative_bounds,
                                         check_reproduction, gamma_const, gamma_plus, gaussian_dt,
                                         gaussian_gradient, gaussian_hessian, gaussian_value, parametrix,
                                         parametrix_adjoint)
from parabolic_mvf.operator_model import make_operator

I1 = GaussianSpec(np.eye(1))


def test_spec_validation():
    with pytest.raises(KernelError):
        GaussianSpec(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(KernelError):
        GaussianSpec(np.array([[-1.0]]))
    sp = GaussianSpec(np.array([[2.0, 0.3], [0.3, 1.0]]))
    assert np.allclose(sp.Ainv @ sp.A, np.eye(2), atol=1e-12)


def test_gamma_const_values():
    # oracle: the closed form evaluated at 30 digits
    mp.mp.dps = 30
    ref = float(1 / mp.sqrt(4 * mp.pi))
    assert ref == pytest.approx(0.2820947918, abs=1e-10)
    assert gamma_const(I1, ([0.0], 1.0), ([0.0], 0.0)) == pytest.approx(ref, rel=1e-14)
    assert gamma_const(I1, ([0.3], 1 / (4 * math.pi)), ([0.3], 0.0)) == pytest.approx(1.0, rel=1e-14)


def test_gamma_const_symmetry(rng):
    sp = GaussianSpec(np.array([[1.5, 0.2], [0.2, 0.8]]))
    x, xi = rng.normal(size=(2, 10, 2))
    t = rng.uniform(0.1, 2, 10)
    assert np.allclose(gamma_const(sp, (x, t), (xi, 0.0)), gamma_const(sp, (xi, t), (x, 0.0)), rtol=1e-14)


def test_order_errors():
    with pytest.raises(KernelError):
        gamma_const(I1, ([0.0], 0.0), ([0.0], 0.0))
    with pytest.raises(KernelError):
        gamma_plus(1.0, 1, [0.0], 0.0, [0.0], 1.0)
    op = make_operator("heat", 1)
    with pytest.raises(KernelError):
        parametrix(op, [0.0], -1.0, [0.0], 0.0)
    with pytest.raises(KernelError):
        parametrix_adjoint(op, [0.0], 1.0, [0.0], 0.0)


def test_gamma_plus():
    mp.mp.dps = 30
    assert gamma_plus(2.0, 1, [0.0], 1.0, [0.0], 0.0) == pytest.approx(float(1 / mp.sqrt(8 * mp.pi)), rel=1e-14)
    assert float(1 / mp.sqrt(8 * mp.pi)) == pytest.approx(0.1994711402, abs=1e-10)
    x = np.linspace(-2, 2, 9)[:, None]
    assert np.allclose(gamma_plus(1.0, 1, x, 0.7, [0.1], 0.0), gamma_const(I1, (x, 0.7), ([0.1], 0.0)))
    mass, _ = integrate.quad(lambda xi: gamma_plus(1.3, 1, [0.2], 1.0, [xi], 0.4), -np.inf, np.inf)
    assert mass == pytest.approx(1.0, abs=1e-10)


def test_parametrix_examples(rng):
    op = make_operator("diagonal", 2, {"diag": [1.0, 3.0]})
    sp = GaussianSpec(np.diag([1.0, 3.0]))
    x = rng.normal(size=(8, 2))
    t = rng.uniform(0.1, 1, 8)
    assert np.allclose(parametrix(op, x, t, [0.0, 0.0], 0.0), gamma_const(sp, (x, t), ([0.0, 0.0], 0.0)))
    trig = make_operator("trig_perturbed", 1, {"epsilon": 0.1})
    x1 = rng.normal(size=(8, 1))
    assert np.allclose(parametrix(trig, x1, t, [0.0], 0.0), gamma_plus(1.0, 1, x1, t, [0.0], 0.0))
    # adjoint parametrix with constant A mirrors the forward one
    for xp, tp in zip(x, t):
        assert parametrix_adjoint(op, xp, -tp, [0.2, 0.1], 0.0) == pytest.approx(
            float(parametrix(op, [0.2, 0.1], 0.0, xp, -tp)), rel=1e-14)


def test_derivatives(rng):
    assert np.allclose(gaussian_gradient(I1, [0.4], 1.0, [0.4], 0.0), 0.0)
    g = gaussian_value(I1, [1.0], 1.0, [0.0], 0.0)
    assert gaussian_gradient(I1, [1.0], 1.0, [0.0], 0.0)[0] == pytest.approx(-0.5 * g, rel=1e-14)
    sp = GaussianSpec(np.array([[1.5, 0.2], [0.2, 0.8]]))
    x = rng.normal(size=(30, 2))
    t = rng.uniform(0.05, 2, 30)
    H = gaussian_hessian(sp, x, t, [0.0, 0.0], 0.0)
    res = np.einsum("ij,pij->p", sp.A, H) - gaussian_dt(sp, x, t, [0.0, 0.0], 0.0)
    assert np.max(np.abs(res)) < 1e-10
    # finite differences, relative 1e-6
    h = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (gaussian_value(sp, x + e, t, [0.0, 0.0], 0.0) - gaussian_value(sp, x - e, t, [0.0, 0.0], 0.0)) / (2 * h)
        an = gaussian_gradient(sp, x, t, [0.0, 0.0], 0.0)[:, i]
        scale = np.abs(gaussian_value(sp, x, t, [0.0, 0.0], 0.0)) / np.sqrt(t)
        assert np.max(np.abs(fd - an) / scale) < 1e-6


def test_drift_and_rate_solve_pde(rng):
    sp = GaussianSpec(np.array([[1.2]]), drift=np.array([0.4]), rate=-0.3)
    x = rng.normal(size=(20, 1))
    t = rng.uniform(0.1, 2, 20)
    g = gaussian_value(sp, x, t, [0.0], 0.0)
    res = (1.2 * gaussian_hessian(sp, x, t, [0.0], 0.0)[:, 0, 0] + 0.4 * gaussian_gradient(sp, x, t, [0.0], 0.0)[:, 0]
           - 0.3 * g - gaussian_dt(sp, x, t, [0.0], 0.0))
    assert np.max(np.abs(res)) < 1e-10


@pytest.mark.parametrize("z,s,zeta,tol", [
    (([0.0], 1.0), 0.5, ([0.0], 0.0), 1e-8),
    (([0.0], 1.0), 1e-3, ([0.0], 0.0), 1e-6),
    (([0.0], 20.0), 10.0, ([0.0], 0.0), 1e-8),
])
def test_reproduction(z, s, zeta, tol):
    rep = check_reproduction(I1, z, (None, s), zeta)
    assert rep.residual < tol
    assert not rep.domain_warning


def test_reproduction_anisotropic_and_warning():
    sp = GaussianSpec(np.array([[1.5, 0.3], [0.3, 0.7]]), drift=np.array([0.2, -0.1]))
    rep = check_reproduction(sp, ([0.1, 0.2], 1.0), (None, 0.4), ([-0.2, 0.0], 0.0), n_nodes=121)
    assert rep.residual < 1e-8
    assert check_reproduction(I1, ([0.0], 1.0), (None, 0.5), ([0.0], 0.0), domain=0.5).domain_warning
    with pytest.raises(KernelError):
        check_reproduction(I1, ([0.0], 1.0), (None, 1.5), ([0.0], 0.0))


def test_derivative_bounds():
    t = np.linspace(0.01, 1.0, 50)
    x = np.linspace(-4, 4, 81)
    X, T = np.meshgrid(x, t, indexing="ij")
    rep = check_gaussian_derivative_bounds(I1, 1.5, 10.0, X[..., None], T, [0.0], 0.0)
    assert rep.passed and 0 < rep.empirical_C < 10
    assert not check_gaussian_derivative_bounds(I1, 1.5, 0.5 * rep.empirical_C, X[..., None], T, [0.0], 0.0).passed
    at_pole = check_gaussian_derivative_bounds(I1, 1.5, 10.0, np.zeros((5, 1)), t[:5], [0.0], 0.0)
    assert at_pole.worst_first == 0.0


def test_positive_and_unit_mass():
    sp = GaussianSpec(np.array([[0.7]]))
    for d in (1e-3, 0.1, 3.0):
        f = lambda xi: float(gamma_const(sp, ([0.3], d), ([xi], 0.0)))
        mass = integrate.quad(f, -np.inf, 0.3, epsabs=1e-13)[0] + integrate.quad(f, 0.3, np.inf, epsabs=1e-13)[0]
        assert abs(mass - 1) < 1e-8
    assert np.all(gaussian_value(sp, np.linspace(-5, 5, 11)[:, None], 1.0, [0.0], 0.0) > 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.01, 3), st.floats(-3, 3), st.floats(0.2, 3))
def test_translation_and_scaling_invariance(x, xi, d, shift, scale):
    sp = GaussianSpec(np.array([[1.3]]))
    g = gamma_const(sp, ([x], d), ([xi], 0.0))
    g_shift = gamma_const(sp, ([x + shift], d + 1.0), ([xi + shift], 1.0))
    g_scale = gamma_const(sp, ([scale * x], scale ** 2 * d), ([scale * xi], 0.0))
    assert g_shift == pytest.approx(g, rel=1e-10, abs=1e-300)
    assert g_scale == pytest.approx(g / scale, rel=1e-10, abs=1e-300)
