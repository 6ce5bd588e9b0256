"""Constant-coefficient Gaussian kernels and their derivatives.

The kernel with matrix A, drift b and rate c is

    G(x, t; xi, tau) = exp(c d) (4 pi d)^(-N/2) det(A)^(-1/2) exp(-<A^-1 w, w> / (4 d)),

with d = t - tau and w = x + b d - xi. With b = 0 and c = 0 this is the
fundamental solution of div(A grad u) - du/dt.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from .operator_model import ParabolicOperator


class KernelError(ValueError):
    pass


@dataclass
class GaussianSpec:
    A: np.ndarray
    drift: Optional[np.ndarray] = None
    rate: float = 0.0
    Ainv: np.ndarray = field(init=False, repr=False)
    detA: float = field(init=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise KernelError("A must be square")
        if not np.allclose(A, A.T, atol=1e-13):
            raise KernelError("A must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise KernelError("A must be positive definite")
        self.A = A
        # LU with partial pivoting (LAPACK getrf) for both inverse and determinant
        self.Ainv = np.linalg.inv(A)
        self.detA = float(np.linalg.det(A))
        self.drift = np.zeros(A.shape[0]) if self.drift is None else np.asarray(self.drift, float).reshape(-1)

    @property
    def N(self) -> int:
        return self.A.shape[0]


def _prep(spec: GaussianSpec, x, t, xi, tau):
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    d = np.asarray(t, dtype=float) - np.asarray(tau, dtype=float)
    pos = d > 0
    dd = np.where(pos, d, 1.0)
    w = x + spec.drift * dd[..., None] - xi
    Aw = np.einsum("ij,...j->...i", spec.Ainv, w)
    q = np.einsum("...i,...i->...", w, Aw)
    g = (np.exp(spec.rate * dd - q / (4 * dd)) / (4 * np.pi * dd) ** (spec.N / 2)
         / math.sqrt(spec.detA))
    g = np.where(pos, g, 0.0)
    return g, w, Aw, q, dd, pos


def gaussian_value(spec: GaussianSpec, x, t, xi, tau) -> np.ndarray:
    """Kernel value; zero when t <= tau."""
    return _prep(spec, x, t, xi, tau)[0]


def gaussian_gradient(spec: GaussianSpec, x, t, xi, tau) -> np.ndarray:
    """Gradient in the first spatial argument."""
    g, w, Aw, q, dd, pos = _prep(spec, x, t, xi, tau)
    return -g[..., None] * Aw / (2 * dd[..., None])


def gaussian_hessian(spec: GaussianSpec, x, t, xi, tau) -> np.ndarray:
    g, w, Aw, q, dd, pos = _prep(spec, x, t, xi, tau)
    d = dd[..., None, None]
    outer = Aw[..., :, None] * Aw[..., None, :]
    return g[..., None, None] * (outer / (4 * d ** 2) - spec.Ainv / (2 * d))


def gaussian_dt(spec: GaussianSpec, x, t, xi, tau) -> np.ndarray:
    """Derivative in the first time argument."""
    g, w, Aw, q, dd, pos = _prep(spec, x, t, xi, tau)
    core = -spec.N / (2 * dd) + q / (4 * dd ** 2)
    drift_term = -np.einsum("...i,i->...", Aw, spec.drift) / (2 * dd)
    return g * (spec.rate + core + drift_term)


def _require_order(t, tau):
    if np.any(np.asarray(t, float) - np.asarray(tau, float) <= 0):
        raise KernelError("kernel needs t > tau")


def gamma_const(spec: GaussianSpec, z, zeta) -> np.ndarray:
    """Fundamental solution of the constant-coefficient operator at z = (x, t), zeta = (xi, tau)."""
    _require_order(z[1], zeta[1])
    return gaussian_value(spec, z[0], z[1], zeta[0], zeta[1])


def gamma_plus(lam_plus: float, N: int, x, t, xi, tau, strict: bool = True) -> np.ndarray:
    """Isotropic comparison Gaussian with diffusivity lam_plus.

    With ``strict=False`` points with t <= tau give 0 instead of an error.
    """
    if not lam_plus > 0:
        raise KernelError("lam_plus must be positive")
    if strict:
        _require_order(t, tau)
    spec = GaussianSpec(lam_plus * np.eye(N))
    return gaussian_value(spec, x, t, xi, tau)


def frozen_spec(op: ParabolicOperator, xi, tau) -> GaussianSpec:
    return GaussianSpec(op.a(np.asarray(xi, float), np.asarray(tau, float)))


def parametrix(op: ParabolicOperator, x, t, xi, tau) -> np.ndarray:
    """Gaussian with the coefficient matrix frozen at the pole (xi, tau)."""
    _require_order(t, tau)
    return gaussian_value(frozen_spec(op, xi, tau), x, t, xi, tau)


def parametrix_adjoint(op: ParabolicOperator, x, t, x0, t0) -> np.ndarray:
    """Adjoint parametrix: the Gaussian frozen at the upper point z0 = (x0, t0), evaluated at (x, t)."""
    _require_order(t0, t)
    return gaussian_value(frozen_spec(op, x0, t0), x0, t0, x, t)


# ---------------------------------------------------------------------------
# checks


@dataclass
class ReproductionReport:
    residual: float
    relative: float
    exact: float
    quadrature: float
    domain_warning: bool


def check_reproduction(spec: GaussianSpec, z, w, zeta, n_nodes: int = 201, half_width: float = 10.0,
                       domain: Optional[float] = None) -> ReproductionReport:
    """Chapman-Kolmogorov: integral over y of G(z; y, s) G(y, s; zeta) equals G(z; zeta).

    ``w`` supplies the intermediate time s (its spatial part is ignored). The y grid is
    centred at the Brownian-bridge mean and spans ``half_width`` bridge standard
    deviations (largest eigenvalue of A). If ``domain`` is given the grid is clipped to
    [-domain, domain]^N and a warning flag is raised when that cuts the 8-std window.
    """
    x, t = np.asarray(z[0], float), float(z[1])
    xi, tau = np.asarray(zeta[0], float), float(zeta[1])
    s = float(w[1])
    if not tau < s < t:
        raise KernelError("need tau < s < t")
    N = spec.N
    d1, d2 = s - tau, t - s
    # with drift the two Gaussians centre at xi - b d1 and x + b d2
    m = (d2 * (xi - spec.drift * d1) + d1 * (x + spec.drift * d2)) / (d1 + d2)
    lmax = float(np.linalg.eigvalsh(spec.A).max())
    sd = math.sqrt(2 * lmax * d1 * d2 / (d1 + d2))
    lo = m - half_width * sd
    hi = m + half_width * sd
    warn = False
    if domain is not None:
        lo8, hi8 = m - 8 * sd, m + 8 * sd
        warn = bool(np.any(lo8 < -domain) or np.any(hi8 > domain))
        lo = np.maximum(lo, -domain)
        hi = np.minimum(hi, domain)
    axes = [np.linspace(lo[i], hi[i], n_nodes) for i in range(N)]
    grids = np.meshgrid(*axes, indexing="ij")
    Y = np.stack(grids, axis=-1)
    f = gaussian_value(spec, x, t, Y, s) * gaussian_value(spec, Y, s, xi, tau)
    for i in range(N):
        f = trapezoid(f, axes[i], axis=0)
    quad = float(f)
    exact = float(gaussian_value(spec, x, t, xi, tau))
    res = abs(quad - exact)
    return ReproductionReport(residual=res, relative=res / max(exact, 1e-300), exact=exact,
                              quadrature=quad, domain_warning=warn)


@dataclass
class DerivativeBoundReport:
    passed: bool
    empirical_C: float
    declared_C: float
    worst_first: float
    worst_second: float


def check_gaussian_derivative_bounds(spec: GaussianSpec, lam_plus: float, C_plus: float, x, t, xi, tau
                                     ) -> DerivativeBoundReport:
    """Empirical constant in |d_j G| <= C (t-tau)^(-1/2) G+ and |d_ij G| <= C (t-tau)^(-1) G+."""
    d = np.asarray(t, float) - np.asarray(tau, float)
    gp = gamma_plus(lam_plus, spec.N, x, t, xi, tau)
    gr = gaussian_gradient(spec, x, t, xi, tau)
    he = gaussian_hessian(spec, x, t, xi, tau)
    ok = gp > 1e-300
    first = np.abs(gr).max(axis=-1) * np.sqrt(d) / np.where(ok, gp, 1.0)
    second = np.abs(he).reshape(he.shape[:-2] + (-1,)).max(axis=-1) * d / np.where(ok, gp, 1.0)
    w1 = float(np.where(ok, first, 0).max())
    w2 = float(np.where(ok, second, 0).max())
    emp = max(w1, w2)
    return DerivativeBoundReport(passed=emp <= C_plus, empirical_C=emp, declared_C=C_plus,
                                 worst_first=w1, worst_second=w2)
