"""Mean value formulas on parabolic balls: surface, volume and extended-dimension versions."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special

from .fields import FundamentalSolutionField
from .level_set_geometry import GeometryConfig, ParabolicBall
from .operator_model import ParabolicOperator, SolutionField
from .quadrature_engine import QuadratureResult, radial_profile_integral, surface_integral, volume_integral


def unit_ball_volume(m: int) -> float:
    return math.pi ** (m / 2) / math.gamma(m / 2 + 1)


# ---------------------------------------------------------------------------
# lower incomplete gamma


def gamma_lower_incomplete(a: float, x, tol: float = 1e-15, max_iter: int = 1000) -> np.ndarray:
    """int_0^x tau^(a-1) e^(-tau) d tau for a > 0, x >= 0 (not regularised).

    Power series for x < a + 1, Lentz continued fraction for the complement otherwise.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("x must be non-negative")
    out = np.zeros_like(x)
    lg = math.lgamma(a)
    ser = (x < a + 1) & (x > 0)
    if np.any(ser):
        xs = x[ser]
        ap = a
        term = np.full_like(xs, 1.0 / a)
        total = term.copy()
        for _ in range(max_iter):
            ap += 1
            term = term * xs / ap
            total += term
            if np.all(np.abs(term) < np.abs(total) * tol):
                break
        out[ser] = total * np.exp(-xs + a * np.log(xs))
    cf = x >= a + 1
    if np.any(cf):
        xc = x[cf]
        tiny = 1e-300
        b = xc + 1 - a
        c = np.full_like(xc, 1 / tiny)
        d = 1 / b
        h = d.copy()
        for i in range(1, max_iter):
            an = -i * (i - a)
            b = b + 2
            d = an * d + b
            d = np.where(np.abs(d) < tiny, tiny, d)
            c = b + an / c
            c = np.where(np.abs(c) < tiny, tiny, c)
            d = 1 / d
            delta = d * c
            h = h * delta
            if np.all(np.abs(delta - 1) < tol):
                break
        upper = np.exp(-xc + a * np.log(xc) - lg) * h
        out[cf] = math.exp(lg) * (1 - upper)
    return out


# ---------------------------------------------------------------------------
# kernels


class KernelEvaluator:
    def __init__(self, field: FundamentalSolutionField, op: Optional[ParabolicOperator] = None):
        self.field = field
        self.op = op or field.op
        self.N = field.N

    def energy(self, x, t):
        """<A(z) grad Gamma, grad Gamma>."""
        g = self.field.grad_x(x, t)
        A = self.op.a(x, t)
        return np.einsum("...i,...ij,...j->...", g, A, g)

    def K(self, x, t, grad_eps: float = 1e-300):
        e = self.energy(x, t)
        g = self.field.grad_x(x, t)
        dt = self.field.dt(x, t)
        n = np.sqrt(np.einsum("...i,...i->...", g, g) + dt ** 2)
        return np.where(n < grad_eps, 0.0, e / np.where(n < grad_eps, 1.0, n))

    def M(self, x, t):
        v = self.field.value(x, t)
        return self.energy(x, t) / v ** 2

    def extended(self, x, t, r: float, m: int):
        """(N_r, M_r^(m), W_r^(m)) at points of the order-m ball of radius r."""
        N = self.N
        s = self.field.t0 - np.asarray(t, float)
        G = self.field.value(x, t)
        arg = np.log(np.maximum(r ** (N + m) * G / (4 * np.pi * s) ** (m / 2), 1.0))
        Nr = 2 * np.sqrt(s) * np.sqrt(arg)
        om = unit_ball_volume(m)
        Mr = om * Nr ** m * (self.M(x, t) + m / (m + 2) * Nr ** 2 / (4 * s ** 2))
        # y-integral of exp(-|y|^2/4s) over |y| < N_r equals 2^(m-1) m om s^(m/2) times the incomplete gamma
        Wr = om / r ** (N + m) * Nr ** m - (m / 2) * om * 2 ** m / (4 * np.pi) ** (m / 2) * G \
            * gamma_lower_incomplete(m / 2, Nr ** 2 / (4 * s))
        return Nr, Mr, Wr


def kernel_extended(field: FundamentalSolutionField, x, t, r: float, m: int):
    return KernelEvaluator(field).extended(x, t, r, m)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MeanValueReport:
    formula: str
    r: float
    m: int
    u0: float
    terms: list
    residual: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return math.fsum(t["value"] for t in self.terms)

    @property
    def scaled_residual(self) -> float:
        return self.residual / max(1.0, abs(self.u0))

    def to_dict(self) -> dict:
        return {"formula": self.formula, "r": self.r, "m": self.m, "u0": self.u0,
                "terms": list(self.terms), "residual": self.residual, "diagnostics": dict(self.diagnostics)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float)


def _value_of(u, x, t):
    return np.asarray(u.value(x, t) if isinstance(u, SolutionField) else u(x, t), dtype=float)


def _qdiag(q: QuadratureResult) -> dict:
    return {"value": q.value, "last_partial": q.partial[-1], "converged": q.converged, "warning": q.warning}


def _zero_order(op, x, t):
    return op.div_b(x, t) - op.c(x, t)


def _needs(op, ball) -> bool:
    x, t, _, _ = ball.volume_points(2)
    return bool(np.any(_zero_order(op, x, t) != 0))


def surface_mvf(u, f: Optional[Callable], field: FundamentalSolutionField, r: float,
                cfg: Optional[GeometryConfig] = None) -> MeanValueReport:
    """u(z0) = int_psi K u dH + int_Omega f (r^-N - Gamma) + r^-N int_Omega (div b - c) u."""
    op = field.op
    N = field.N
    ball = ParabolicBall(field, r, 0, cfg)
    mesh = ball.surface_mesh()
    ev = KernelEvaluator(field)
    u0 = float(_value_of(u, field.x0[None, :], np.array([field.t0]))[0])
    vals = ev.energy(mesh.points_x, mesh.points_t) * _value_of(u, mesh.points_x, mesh.points_t)
    q_s = surface_integral(vals, mesh, ball.cfg.k_max, ball.eps0, radial=True)
    terms = [{"name": "surface", "value": q_s.value}]
    diag = {"surface": _qdiag(q_s), "n_surface_points": int(len(mesh.points_t)),
            "n_critical": int(mesh.critical.sum()), "depth": ball.depth}
    if f is not None:
        q_f = volume_integral(lambda x, t: f(x, t) * (r ** -N - field.value(x, t)), ball)
        terms.append({"name": "source", "value": q_f.value})
        diag["source"] = _qdiag(q_f)
    if _needs(op, ball):
        q_c = volume_integral(lambda x, t: _zero_order(op, x, t) * _value_of(u, x, t), ball)
        terms.append({"name": "zero_order", "value": q_c.value / r ** N})
        diag["zero_order"] = _qdiag(q_c)
    total = math.fsum(t["value"] for t in terms)
    return MeanValueReport("surface", r, 0, u0, terms, abs(u0 - total), diag)


def volume_mvf(u, f: Optional[Callable], field: FundamentalSolutionField, r: float,
               cfg: Optional[GeometryConfig] = None, n_rho: int = 8) -> MeanValueReport:
    """u(z0) = r^-N int M u + N r^-N int_0^r rho^(N-1) int f (rho^-N - Gamma) + N r^-N int_0^r rho^-1 int (div b - c) u."""
    op = field.op
    N = field.N
    ball = ParabolicBall(field, r, 0, cfg)
    ev = KernelEvaluator(field)
    u0 = float(_value_of(u, field.x0[None, :], np.array([field.t0]))[0])
    q_m = volume_integral(lambda x, t: ev.M(x, t) * _value_of(u, x, t), ball)
    terms = [{"name": "volume", "value": q_m.value / r ** N}]
    diag = {"volume": _qdiag(q_m), "depth": ball.depth}
    fam = lambda rho: ParabolicBall(field, rho, 0, ball.cfg)
    if f is not None:
        inner = lambda b: volume_integral(lambda x, t: f(x, t) * (b.r ** -N - field.value(x, t)), b).value
        val, skipped = radial_profile_integral(fam, inner, lambda rho: rho ** (N - 1), r, n_rho)
        terms.append({"name": "source", "value": N * val / r ** N})
        diag["source_skipped_radii"] = skipped
    if _needs(op, ball):
        inner = lambda b: volume_integral(lambda x, t: _zero_order(op, x, t) * _value_of(u, x, t), b).value
        val, skipped = radial_profile_integral(fam, inner, lambda rho: 1.0 / rho, r, n_rho)
        terms.append({"name": "zero_order", "value": N * val / r ** N})
        diag["zero_order_skipped_radii"] = skipped
    total = math.fsum(t["value"] for t in terms)
    return MeanValueReport("volume", r, 0, u0, terms, abs(u0 - total), diag)


def extended_mvf(u, f: Optional[Callable], field: FundamentalSolutionField, r: float, m: int,
                 cfg: Optional[GeometryConfig] = None, n_rho: int = 8) -> MeanValueReport:
    """Volume formula on the order-m ball with kernels M_r^(m), W_r^(m) and N_r."""
    if m < 1:
        raise ValueError("extended formula needs m >= 1")
    op = field.op
    N = field.N
    ball = ParabolicBall(field, r, m, cfg)
    ev = KernelEvaluator(field)
    u0 = float(_value_of(u, field.x0[None, :], np.array([field.t0]))[0])
    q_m = volume_integral(lambda x, t: ev.extended(x, t, r, m)[1] * _value_of(u, x, t), ball)
    terms = [{"name": "volume", "value": q_m.value / r ** (N + m)}]
    xs, ts, _, _ = ball.volume_points()
    Mr = ev.extended(xs, ts, r, m)[1]
    diag = {"volume": _qdiag(q_m), "depth": ball.depth, "sup_M_kernel": float(Mr.max())}
    fam = lambda rho: ParabolicBall(field, rho, m, ball.cfg)
    om = unit_ball_volume(m)
    if f is not None:
        def inner(b):
            return volume_integral(lambda x, t: ev.extended(x, t, b.r, m)[2] * f(x, t), b).value
        val, skipped = radial_profile_integral(fam, inner, lambda rho: rho ** (N + m - 1), r, n_rho)
        terms.append({"name": "source", "value": (N + m) * val / r ** (N + m)})
        diag["source_skipped_radii"] = skipped
        xs, ts, _, _ = ball.volume_points(4)
        W = ev.extended(xs, ts, r, m)[2]
        diag["W_range"] = [float(W.min()), float(W.max())]
    if _needs(op, ball):
        def inner(b):
            return volume_integral(lambda x, t: ev.extended(x, t, b.r, m)[0] ** m * _zero_order(op, x, t)
                                   * _value_of(u, x, t), b).value
        val, skipped = radial_profile_integral(fam, inner, lambda rho: om / rho, r, n_rho)
        terms.append({"name": "zero_order", "value": (N + m) * val / r ** (N + m)})
        diag["zero_order_skipped_radii"] = skipped
    total = math.fsum(t["value"] for t in terms)
    return MeanValueReport("extended", r, m, u0, terms, abs(u0 - total), diag)


def kernel_masses(field: FundamentalSolutionField, r: float, cfg: Optional[GeometryConfig] = None) -> dict:
    """int_psi K dH and r^-N int_Omega M dz (both equal 1 when b = c = 0)."""
    ball = ParabolicBall(field, r, 0, cfg)
    mesh = ball.surface_mesh()
    ev = KernelEvaluator(field)
    qk = surface_integral(ev.energy(mesh.points_x, mesh.points_t), mesh, ball.cfg.k_max, ball.eps0, radial=True)
    qm = volume_integral(ev.M, ball)
    return {"K_mass": qk.value, "M_mass": qm.value / r ** field.N, "K": qk, "M": qm}


def coarea_radial_identity(u, field: FundamentalSolutionField, r: float, cfg: Optional[GeometryConfig] = None,
                           n_rho: int = 8) -> tuple[float, float]:
    """Both sides of int_0^r rho^(N-1) (int_psi_rho K u) d rho = (1/N) int_Omega_r M u."""
    N = field.N
    ev = KernelEvaluator(field)
    base = cfg or GeometryConfig()

    def surf(b):
        mesh = b.surface_mesh()
        vals = ev.energy(mesh.points_x, mesh.points_t) * _value_of(u, mesh.points_x, mesh.points_t)
        return surface_integral(vals, mesh, b.cfg.k_max, b.eps0, radial=True).value

    lhs, _ = radial_profile_integral(lambda rho: ParabolicBall(field, rho, 0, base), surf,
                                     lambda rho: rho ** (N - 1), r, n_rho)
    ball = ParabolicBall(field, r, 0, base)
    rhs = volume_integral(lambda x, t: ev.M(x, t) * _value_of(u, x, t), ball).value / N
    return lhs, rhs
