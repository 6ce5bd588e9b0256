"""Fundamental solution of a variable-coefficient operator by the parametrix series.

The forward solution is Gamma(x, th; xi, tau) = Z + int int Z(x, th; y, s) Phi(y, s) dy ds
with Z the Gaussian frozen at the lower point and Phi = sum_k Phi_k, where
Phi_1 = L Z and Phi_{k+1} = int int L Z(x, th; y, s) Phi_k(y, s) dy ds.

Time integrals use Gauss-Legendre nodes after a polynomial grading map that
clusters nodes at both ends of (tau, th) and absorbs the algebraic end-point
singularities; space integrals use trapezoid rules on windows centred at the
Brownian-bridge mean. The iterates Phi_k (k >= 2) are tabulated once per pole
in similarity variables (log d, (y - xi)/sqrt(d)) and read back through cubic
spline interpolation.

``SeriesField`` gives z -> Gamma(z0; z) for the adjoint orientation used by the
mean value machinery: it is the forward series of the time-reversed adjoint
operator.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special
from scipy.ndimage import map_coordinates, spline_filter
from scipy.optimize import minimize

from .fields import FundamentalSolutionField
from .gaussian_core import gamma_plus
from .operator_model import ParabolicOperator, SolutionField, apply_adjoint, time_reversed_adjoint


@dataclass
class SeriesConfig:
    K: int = 3
    T: float = 1.0
    n_time: int = 24
    n_space: int = 48
    window: float = 8.0
    n_tab_d: int = 64
    n_tab_eta: int = 161
    d_min_frac: float = 1e-6
    eta_max: Optional[float] = None
    C_tilde: Optional[float] = None
    chunk: int = 400
    # N = 1: tabulate Gamma_K - Z once per pole instead of integrating at every point
    field_table: bool = True
    field_tab_d: int = 300
    field_tab_d_min_frac: float = 1e-10
    field_tab_eta: int = 161
    field_tab_order: int = 5


def tail_bound(k0: int, dt: float, alpha: float, C_tilde: float, norm: float = 1.0,
               rtol: float = 1e-17, max_terms: int = 100000) -> float:
    """sum_{k >= k0} (G(a/2) C)^k / G(a k / 2) dt^(k a/2 - 1), times ``norm``.

    Summed in log space until the terms stop contributing.
    """
    la = math.log(special.gamma(alpha / 2) * C_tilde) if C_tilde > 0 else -math.inf
    if la == -math.inf:
        return 0.0
    total = 0.0
    for k in range(max(k0, 1), max(k0, 1) + max_terms):
        lt = k * la - special.gammaln(alpha * k / 2) + (alpha * k / 2 - 1) * math.log(dt)
        term = math.exp(lt)
        total += term
        if k > k0 + 5 and term <= rtol * total:
            break
    return norm * total


def gamma_tail_bound(K: int, dt, alpha: float, C_tilde: float, lam_plus: float, lam: float, N: int):
    """Coefficient c(dt) with |Gamma - Gamma_K| <= c(dt) G+ pointwise.

    Integrating the iterate majorant against Z <= (lam_plus/lam)^(N/2) G+ and using the
    reproduction property of G+ gives the factor dt^(k a/2) / G(k a/2 + 1).
    """
    dt = np.asarray(dt, dtype=float)
    cz = (lam_plus / lam) ** (N / 2)
    out = np.zeros_like(dt)
    if C_tilde <= 0:
        return out
    la = math.log(special.gamma(alpha / 2) * C_tilde)
    for k in range(K + 1, K + 400):
        lt = k * la - special.gammaln(alpha * k / 2 + 1) + (alpha * k / 2) * np.log(dt)
        term = np.exp(lt)
        out = out + term
        if np.all(term <= 1e-18 * np.maximum(out, 1e-300)):
            break
    return cz * out


# ---------------------------------------------------------------------------
# frozen Gaussians with pointwise matrices


def _frozen(x, th, y, s, A):
    """Value, gradient and Hessian in x of the Gaussian with matrix A (..., N, N)."""
    d = th - s
    N = x.shape[-1]
    pos = d > 0
    dd = np.where(pos, d, 1.0)
    if N == 1:
        a = A[..., 0, 0]
        w = (x - y)[..., 0]
        g = np.exp(-w * w / (4 * a * dd)) / np.sqrt(4 * np.pi * dd * a)
        g = np.where(pos, g, 0.0)
        Aw = (w / a)[..., None]
        grad = -g[..., None] * Aw / (2 * dd[..., None])
        hess = (g * ((w / a) ** 2 / (4 * dd ** 2) - 1 / (2 * a * dd)))[..., None, None]
        return g, grad, hess
    Ainv = np.linalg.inv(A)
    det = np.linalg.det(A)
    w = x - y
    Aw = np.einsum("...ij,...j->...i", Ainv, w)
    q = np.einsum("...i,...i->...", w, Aw)
    g = np.exp(-q / (4 * dd)) / (4 * np.pi * dd) ** (N / 2) / np.sqrt(det)
    g = np.where(pos, g, 0.0)
    grad = -g[..., None] * Aw / (2 * dd[..., None])
    dq = dd[..., None, None]
    hess = g[..., None, None] * (Aw[..., :, None] * Aw[..., None, :] / (4 * dq ** 2) - Ainv / (2 * dq))
    return g, grad, hess


def _graded_rule(n: int, p: int):
    """Nodes u in (0, 1) and weights for int_0^1 f(u) du with u = I_w(p, p)."""
    w, wt = np.polynomial.legendre.leggauss(n)
    w = 0.5 * (w + 1)
    wt = 0.5 * wt
    u = special.betainc(p, p, w)
    du = w ** (p - 1) * (1 - w) ** (p - 1) / special.beta(p, p)
    return u, wt * du


def _space_rule(n: int, window: float, N: int):
    """Trapezoid nodes on [-window, window]^N as offsets in units of one standard deviation."""
    e = np.linspace(-window, window, n)
    h = e[1] - e[0]
    wt = np.full(n, h)
    wt[0] = wt[-1] = h / 2
    if N == 1:
        return e[:, None], wt
    grids = np.meshgrid(*([e] * N), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.ones(1)
    for _ in range(N):
        wts = np.multiply.outer(wts, wt).ravel()
    return nodes, wts


class ParametrixSeries:
    """Forward series for ``op`` with lower pole (xi, tau)."""

    def __init__(self, op: ParabolicOperator, xi, tau: float, cfg: SeriesConfig | None = None):
        self.op = op
        self.cfg = cfg or SeriesConfig()
        self.N = op.N
        self.xi = np.asarray(xi, dtype=float).reshape(self.N)
        self.tau = float(tau)
        self.alpha = op.holder_alpha
        self.lam_plus = op.lam_plus
        self.A0 = op.a(self.xi, np.asarray(self.tau))
        p = max(2, int(math.ceil(2.0 / self.alpha - 1e-12)))
        self.time_u, self.time_w = _graded_rule(self.cfg.n_time, p)
        self.space_e, self.space_w = _space_rule(self.cfg.n_space, self.cfg.window, self.N)
        self.eta_max = self.cfg.eta_max or 7.0 * math.sqrt(2 * self.lam_plus)
        self._tables: dict[int, np.ndarray] = {}
        self._C_tilde = self.cfg.C_tilde

    # -- building blocks ----------------------------------------------------
    def Z(self, x, th, y, s):
        A = self.op.a(y, s)
        return _frozen(x, th, y, s, A)

    def LZ(self, x, th, y, s):
        """L applied in (x, th) to the Gaussian frozen at (y, s)."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        th = np.asarray(th, float)
        s = np.asarray(s, float)
        shp = np.broadcast_shapes(x.shape[:-1], y.shape[:-1], th.shape, s.shape)
        x = np.broadcast_to(x, shp + (self.N,))
        y = np.broadcast_to(y, shp + (self.N,))
        th = np.broadcast_to(th, shp)
        s = np.broadcast_to(s, shp)
        Ay = self.op.a(y, s)
        g, gr, he = _frozen(x, th, y, s, Ay)
        Ax = self.op.a(x, th)
        dv = self.op.divergence_vector(x, th) + self.op.b(x, th)
        return (np.einsum("...ij,...ij->...", Ax - Ay, he) + np.einsum("...j,...j->...", dv, gr)
                + self.op.c(x, th) * g)

    def phi1(self, y, s):
        return self.LZ(y, s, self.xi, np.asarray(self.tau))

    def Z0(self, x, th):
        return _frozen(np.asarray(x, float), np.asarray(th, float), self.xi, np.asarray(self.tau),
                       np.broadcast_to(self.A0, np.shape(th) + (self.N, self.N)))

    # -- tabulated iterates ---------------------------------------------------
    def _tab_axes(self):
        c = self.cfg
        d_min = c.T * c.d_min_frac
        # a few nodes past T keep the spline boundary treatment away from the usable range
        step = (math.log(c.T) - math.log(d_min)) / (c.n_tab_d - 1)
        ld = math.log(d_min) + step * np.arange(c.n_tab_d + 4)
        eta = np.linspace(-self.eta_max, self.eta_max, c.n_tab_eta)
        return ld, eta

    def _scale(self, k, d):
        return d ** (self.N / 2 + 1 - k * self.alpha / 2)

    def phi(self, k: int, y, s):
        """Phi_k at points (y, s); k = 1 is analytic, k >= 2 read from the table."""
        if k == 1:
            return self.phi1(y, s)
        tab = self.table(k)
        y = np.asarray(y, float)
        s = np.asarray(s, float)
        d = s - self.tau
        pos = d > 0
        dd = np.where(pos, d, self.cfg.T)
        ld, eta = self._tab_axes()
        cd = (np.log(dd) - ld[0]) / (ld[1] - ld[0])
        cd = np.clip(cd, 0.0, len(ld) - 1)
        e = (y - self.xi) / np.sqrt(dd)[..., None]
        ce = (e + self.eta_max) / (eta[1] - eta[0])
        inside = np.all(np.abs(e) <= self.eta_max, axis=-1) & pos
        coords = np.stack([cd] + [ce[..., i] for i in range(self.N)], axis=0)
        flat = coords.reshape(self.N + 1, -1)
        vals = map_coordinates(tab, flat, order=3, mode="nearest", prefilter=False).reshape(cd.shape)
        return np.where(inside, vals / self._scale(k, dd), 0.0)

    def phi_direct(self, k: int, x, th):
        """Phi_k at (x, th) by one explicit space-time integral over Phi_{k-1}."""
        if k == 1:
            return self.phi1(x, th)
        return self._integrate(x, th, kernel="LZ", ks=[k - 1])

    def table(self, k: int) -> np.ndarray:
        if k in self._tables:
            return self._tables[k]
        if k < 2:
            raise ValueError("only k >= 2 are tabulated")
        if k - 1 >= 2:
            self.table(k - 1)
        ld, eta = self._tab_axes()
        d = np.exp(ld)
        grids = np.meshgrid(d, *([eta] * self.N), indexing="ij")
        D = grids[0]
        E = np.stack(grids[1:], axis=-1)
        X = self.xi + np.sqrt(D)[..., None] * E
        TH = self.tau + D
        vals = self.phi_direct(k, X.reshape(-1, self.N), TH.reshape(-1)).reshape(D.shape)
        scaled = vals * self._scale(k, D)
        self._tables[k] = spline_filter(scaled, order=3, mode="nearest")
        return self._tables[k]

    # -- generic double integral ------------------------------------------------
    def _integrate(self, x, th, kernel: str, ks, deriv: bool = False):
        """int_tau^th int K(x, th; y, s) sum_{k in ks} Phi_k(y, s) dy ds for K in {LZ, Z}."""
        x = np.asarray(x, float)
        th = np.asarray(th, float)
        shp = np.broadcast_shapes(x.shape[:-1], th.shape)
        x = np.broadcast_to(x, shp + (self.N,)).reshape(-1, self.N)
        th = np.broadcast_to(th, shp).reshape(-1)
        nout = self.N + 1 if kernel == "Zboth" else (self.N if deriv else 1)
        out = np.zeros((len(th), nout))
        ch = self.cfg.chunk
        for lo in range(0, len(th), ch):
            out[lo:lo + ch] = self._integrate_chunk(x[lo:lo + ch], th[lo:lo + ch], kernel, ks, deriv)
        out = out.reshape(shp + (nout,))
        return out if (deriv or kernel == "Zboth") else out[..., 0]

    def _integrate_chunk(self, x, th, kernel, ks, deriv):
        P = len(th)
        d = th - self.tau
        pos = d > 0
        d = np.where(pos, d, 1.0)
        u = self.time_u
        s = self.tau + d[:, None] * u[None, :]                      # (P, T)
        d1 = s - self.tau
        d2 = th[:, None] - s
        mean = self.xi + (d1 / d[:, None])[..., None] * (x[:, None, :] - self.xi)   # (P, T, N)
        sd = np.sqrt(np.maximum(2 * self.lam_plus * d1 * d2 / d[:, None], 0.0))      # (P, T)
        Y = mean[:, :, None, :] + sd[:, :, None, None] * self.space_e[None, None, :, :]  # (P,T,S,N)
        S = Y.shape[2]
        Sb = np.broadcast_to(s[:, :, None], (P, len(u), S))
        Xb = np.broadcast_to(x[:, None, None, :], Y.shape)
        THb = np.broadcast_to(th[:, None, None], (P, len(u), S))
        dens = sum(self.phi(k, Y, Sb) for k in ks)
        if kernel == "LZ":
            kv = self.LZ(Xb, THb, Y, Sb)
            integrand = (kv * dens)[..., None]
        elif kernel == "Zboth":
            g, gr, _ = self.Z(Xb, THb, Y, Sb)
            integrand = np.concatenate([g[..., None], gr], axis=-1) * dens[..., None]
        else:
            g, gr, _ = self.Z(Xb, THb, Y, Sb)
            integrand = (gr if deriv else g[..., None]) * dens[..., None]
        sw = self.space_w * sd[..., None] ** self.N                 # (P, T, S)
        inner = np.einsum("ptsn,pts->ptn", integrand, sw)
        res = np.einsum("ptn,t->pn", inner, self.time_w) * d[:, None]
        res[~pos] = 0.0
        return res

    # -- the solution -------------------------------------------------------
    def gamma(self, x, th, K: Optional[int] = None):
        K = self.cfg.K if K is None else K
        x = np.asarray(x, float)
        th = np.asarray(th, float)
        z = self.Z0(x, th)[0]
        if K == 0:
            return z
        return z + self._integrate(x, th, kernel="Z", ks=range(1, K + 1))

    def gamma_grad(self, x, th, K: Optional[int] = None):
        K = self.cfg.K if K is None else K
        x = np.asarray(x, float)
        th = np.asarray(th, float)
        g = self.Z0(x, th)[1]
        if K == 0:
            return g
        return g + self._integrate(x, th, kernel="Z", ks=range(1, K + 1), deriv=True)

    def correction(self, x, th, K: Optional[int] = None):
        """Gamma_K - Z and its x-gradient in one pass; shape (..., 1 + N)."""
        K = self.cfg.K if K is None else K
        x = np.asarray(x, float)
        th = np.asarray(th, float)
        if K == 0:
            shp = np.broadcast_shapes(x.shape[:-1], th.shape)
            return np.zeros(shp + (1 + self.N,))
        return self._integrate(x, th, kernel="Zboth", ks=range(1, K + 1))

    # -- constants ------------------------------------------------------------
    def fit_C_tilde(self, n_d: int = 30, n_eta: int = 81) -> float:
        """Grid maximisation of |LZ| d^(1 - a/2) / G+ over the pole's neighbourhood."""
        if self._C_tilde is not None:
            return self._C_tilde
        d = np.geomspace(self.cfg.T * 1e-6, self.cfg.T, n_d)
        e = np.linspace(-10, 10, n_eta) * math.sqrt(self.lam_plus)
        grids = np.meshgrid(d, *([e] * self.N), indexing="ij")
        D = grids[0]
        E = np.stack(grids[1:], axis=-1)
        X = self.xi + np.sqrt(D)[..., None] * E
        TH = self.tau + D
        lz = np.abs(self.phi1(X, TH))
        gp = gamma_plus(self.lam_plus, self.N, X, TH, self.xi, self.tau, strict=False)
        ok = gp > 1e-250
        ratio = np.where(ok, lz * D ** (1 - self.alpha / 2) / np.where(ok, gp, 1), 0)
        self._C_tilde = float(ratio.max())
        return self._C_tilde


# ---------------------------------------------------------------------------
# functional wrappers


def lz(op: ParabolicOperator, x, t, xi, tau):
    """L Z(z; zeta) with Z frozen at zeta."""
    ser = ParametrixSeries(op, xi, tau)
    return ser.LZ(x, t, np.asarray(xi, float), np.asarray(tau, float))


def lz_iterate(op: ParabolicOperator, k: int, x, t, xi, tau, cfg: SeriesConfig | None = None):
    """(L Z)_k at z = (x, t) for pole (xi, tau)."""
    cfg = cfg or SeriesConfig(T=max(float(np.max(np.asarray(t) - tau)), 1e-12))
    ser = ParametrixSeries(op, xi, tau, cfg)
    return ser.phi_direct(k, x, t)


class SeriesField(FundamentalSolutionField):
    """z -> Gamma_K(z0; z): adjoint orientation via the time-reversed adjoint operator."""

    kind = "series"

    def __init__(self, op: ParabolicOperator, x0, t0, cfg: SeriesConfig | None = None,
                 K: Optional[int] = None, fit_bounds: bool = True):
        super().__init__(op, x0, t0)
        self.cfg = cfg or SeriesConfig()
        self.K = self.cfg.K if K is None else K
        self.reversed_op = time_reversed_adjoint(op)
        self.series = ParametrixSeries(self.reversed_op, self.x0, -self.t0, self.cfg)
        for k in range(2, self.K + 1):
            self.series.table(k)
        self._field_tabs: dict = {}
        self.C_tilde = self.series.fit_C_tilde()
        self.C_plus = self._fit_C_plus() if fit_bounds else None
        self._ridge_cache: dict = {}

    def with_K(self, K: int) -> "SeriesField":
        """Same tables, different truncation."""
        other = object.__new__(SeriesField)
        other.__dict__.update(self.__dict__)
        other.K = K
        for k in range(2, K + 1):
            self.series.table(k)
        other._ridge_cache = {}
        return other

    # -- tabulated correction (N = 1) ----------------------------------------
    def _use_table(self) -> bool:
        return self.N == 1 and self.cfg.field_table and self.K > 0

    def _tab_axes(self):
        c = self.cfg
        d_min = c.T * c.field_tab_d_min_frac
        step = (math.log(c.T) - math.log(d_min)) / (c.field_tab_d - 1)
        ld = math.log(d_min) + step * np.arange(c.field_tab_d + 4)
        eta = np.linspace(-self.series.eta_max, self.series.eta_max, c.field_tab_eta)
        return ld, eta

    def _field_table(self):
        if self.K not in self._field_tabs:
            c = self.cfg
            ld, eta = self._tab_axes()
            D, E = np.meshgrid(np.exp(ld), eta, indexing="ij")
            X = (self.series.xi[0] + np.sqrt(D) * E)[..., None]
            TH = self.series.tau + D
            corr = self.series.correction(X.reshape(-1, 1), TH.reshape(-1), self.K).reshape(D.shape + (2,))
            tv = spline_filter(corr[..., 0] * np.sqrt(D), order=c.field_tab_order, mode="nearest")
            tg = spline_filter(corr[..., 1] * D, order=c.field_tab_order, mode="nearest")
            self._field_tabs[self.K] = (tv, tg)
        return self._field_tabs[self.K]

    def _corrected(self, x, th):
        """(Gamma_K, grad Gamma_K) at forward time th for the reversed series."""
        ser = self.series
        x = np.asarray(x, float)
        th = np.asarray(th, float)
        shp = np.broadcast_shapes(x.shape[:-1], th.shape)
        x = np.broadcast_to(x, shp + (1,)).reshape(-1, 1)
        th = np.broadcast_to(th, shp).reshape(-1)
        z, zg, _ = ser.Z0(x, th)
        tv, tg = self._field_table()
        ld, eta = self._tab_axes()
        d = th - ser.tau
        pos = d > 0
        dd = np.where(pos, d, 1.0)
        e = (x[:, 0] - ser.xi[0]) / np.sqrt(dd)
        in_eta = np.abs(e) <= ser.eta_max
        d_min, d_max = math.exp(ld[0]), self.cfg.T
        tab = pos & in_eta & (dd <= d_max)
        below = tab & (dd < d_min)
        cd = np.clip((np.log(dd) - ld[0]) / (ld[1] - ld[0]), 0.0, len(ld) - 1)
        ce = (e + ser.eta_max) / (eta[1] - eta[0])
        coords = np.stack([cd[tab], ce[tab]])
        cv = np.zeros_like(d)
        cg = np.zeros_like(d)
        o = self.cfg.field_tab_order
        sv = map_coordinates(tv, coords, order=o, mode="nearest", prefilter=False)
        sg = map_coordinates(tg, coords, order=o, mode="nearest", prefilter=False)
        # the correction vanishes like d^(a/2) relative to Z; below the table use that rate
        fac = np.where(below, (dd / d_min) ** (ser.alpha / 2), 1.0)[tab]
        cv[tab] = sv * fac / np.sqrt(dd[tab])
        cg[tab] = sg * fac / dd[tab]
        # past eta_max the tabulated iterates vanish and Gamma is ~1e-16 of its peak: keep Z alone
        rest = pos & (dd > d_max)
        if np.any(rest):
            c = ser.correction(x[rest], th[rest], self.K)
            cv[rest] = c[:, 0]
            cg[rest] = c[:, 1]
        val = np.where(pos, z + cv, 0.0)
        grad = np.where(pos[:, None], zg + cg[:, None], 0.0)
        return val.reshape(shp), grad.reshape(shp + (1,))

    def value(self, x, t):
        if self._use_table():
            return self._corrected(x, -np.asarray(t, float))[0]
        return self.series.gamma(x, -np.asarray(t, float), self.K)

    def grad_x(self, x, t):
        if self._use_table():
            return self._corrected(x, -np.asarray(t, float))[1]
        return self.series.gamma_grad(x, -np.asarray(t, float), self.K)

    def dt(self, x, t):
        t = np.asarray(t, float)
        h = 1e-5 * (1 + np.abs(t))
        return (self.value(x, t + h) - self.value(x, t - h)) / (2 * h)

    def tail_coefficient(self, s):
        return gamma_tail_bound(self.K, s, self.op.holder_alpha, self.C_tilde, self.op.lam_plus,
                                self.op.lam, self.N)

    def tail_bound(self, s):
        s = np.asarray(s, dtype=float)
        return self.tail_coefficient(s) * (4 * np.pi * self.op.lam_plus * s) ** (-self.N / 2)

    def _fit_C_plus(self) -> float:
        lp = self.op.lam_plus
        s = np.geomspace(1e-4 * self.cfg.T, self.cfg.T, 12)
        e = np.linspace(-6, 6, 25) * math.sqrt(2 * lp)
        grids = np.meshgrid(s, *([e] * self.N), indexing="ij")
        S = grids[0]
        X = self.x0 + np.sqrt(S)[..., None] * np.stack(grids[1:], axis=-1)
        T = self.t0 - S
        g = self.value(X, T)
        gp = gamma_plus(lp, self.N, self.x0, self.t0, X, T, strict=False)
        ratio = np.abs(g) / gp + self.tail_coefficient(S)
        # margin for points between the fitting nodes
        return float(ratio.max()) * 1.25

    def ridge(self, s):
        s = np.asarray(s, dtype=float)
        flat = s.reshape(-1)
        out = np.empty((len(flat), self.N))
        if self.N == 1:
            out[:, 0] = self._ridge_1d(flat)
        else:
            for i, si in enumerate(flat):
                key = float(si)
                if key not in self._ridge_cache:
                    f = lambda xx: -float(self.value(xx[None, :], np.array([self.t0 - si]))[0])
                    r = minimize(f, self.x0, method="Nelder-Mead",
                                 options={"xatol": 1e-10 * (1 + math.sqrt(si)), "fatol": 0})
                    self._ridge_cache[key] = r.x
                out[i] = self._ridge_cache[key]
        return out.reshape(s.shape + (self.N,))

    def _ridge_1d(self, s, iters: int = 60):
        # vectorised golden-section search on x0 +- 3 sqrt(2 Lambda+ s)
        w = 3 * np.sqrt(2 * self.op.lam_plus * s)
        a = self.x0[0] - w
        b = self.x0[0] + w
        gr = (math.sqrt(5) - 1) / 2
        t = self.t0 - s
        c = b - gr * (b - a)
        d = a + gr * (b - a)
        fc = self.value(c[:, None], t)
        fd = self.value(d[:, None], t)
        for _ in range(iters):
            left = fc > fd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            nc = b - gr * (b - a)
            nd = a + gr * (b - a)
            # reuse one evaluation per iteration
            c_new = np.where(left, nc, d)
            d_new = np.where(left, c, nd)
            fc_new = np.where(left, np.nan, fd)
            fd_new = np.where(left, fc, np.nan)
            need_c = np.isnan(fc_new)
            need_d = np.isnan(fd_new)
            if np.any(need_c):
                fc_new[need_c] = self.value(c_new[need_c][:, None], t[need_c])
            if np.any(need_d):
                fd_new[need_d] = self.value(d_new[need_d][:, None], t[need_d])
            c, d, fc, fd = c_new, d_new, fc_new, fd_new
            if np.all(b - a < 1e-13 * (1 + np.abs(a))):
                break
        return 0.5 * (a + b)

    def radius_bound(self, s, level):
        s = np.asarray(s, dtype=float)
        lp = self.op.lam_plus
        q = 4 * lp * s * (math.log(self.C_plus) - 0.5 * self.N * np.log(4 * np.pi * lp * s) - np.log(level))
        rad = np.sqrt(np.maximum(q, 0.0))
        shift = np.linalg.norm(self.ridge(s) - self.x0, axis=-1)
        return rad + shift + 1e-300

    def max_depth_bound(self, level) -> float:
        return min(self.cfg.T, (self.C_plus / level) ** (2 / self.N) / (4 * np.pi * self.op.lam_plus))


def gamma_series(op: ParabolicOperator, z0, K: int, cfg: SeriesConfig | None = None) -> SeriesField:
    cfg = cfg or SeriesConfig()
    return SeriesField(op, z0[0], z0[1], cfg, K=K)


# ---------------------------------------------------------------------------
# checks


@dataclass
class ResidualReport:
    K: int
    max_abs: float
    max_rel: float
    n_points: int


def check_pde_residual(field: FundamentalSolutionField, op: ParabolicOperator, x, t, h: float = 3e-4
                       ) -> ResidualReport:
    """Finite-difference adjoint operator applied to z -> Gamma(z0; z)."""
    u = SolutionField(N=op.N, value=field.value, fd_step=h)
    res = apply_adjoint(op, u, x, t)
    g = np.abs(field.value(x, t))
    return ResidualReport(K=getattr(field, "K", -1), max_abs=float(np.abs(res).max()),
                          max_rel=float(np.abs(res).max() / max(g.max(), 1e-300)), n_points=int(np.size(res)))


@dataclass
class GlobalBoundsReport:
    C_minus: float
    C_plus: float
    masses: list
    mass_ok: bool
    lam_minus: float
    lam_plus: float


def slice_mass(field: FundamentalSolutionField, s: float, n: int = 401, width: float = 10.0) -> float:
    """int Gamma(z0; x, t0 - s) dx by the trapezoid rule (N = 1, 2)."""
    lp = field.op.lam_plus
    L = width * math.sqrt(2 * lp * s)
    c = field.ridge(np.asarray(s))
    axes = [np.linspace(c[i] - L, c[i] + L, n) for i in range(field.N)]
    grids = np.meshgrid(*axes, indexing="ij")
    X = np.stack(grids, axis=-1)
    v = field.value(X, np.full(X.shape[:-1], field.t0 - s))
    from scipy.integrate import trapezoid
    for i in range(field.N):
        v = trapezoid(v, axes[i], axis=0)
    return float(v)


def check_global_bounds(field: FundamentalSolutionField, depths, n_eta: int = 41, lam_minus: Optional[float] = None,
                        mass_nodes: int = 401) -> GlobalBoundsReport:
    """Fitted C-, C+ with C- G- <= Gamma <= C+ G+, and slice masses between them."""
    op = field.op
    lp = op.lam_plus
    lm = lam_minus if lam_minus is not None else 0.5 * op.lam
    depths = np.asarray(depths, float)
    e = np.linspace(-4, 4, n_eta) * math.sqrt(2 * lm)
    grids = np.meshgrid(depths, *([e] * field.N), indexing="ij")
    S = grids[0]
    X = field.x0 + np.sqrt(S)[..., None] * np.stack(grids[1:], axis=-1)
    T = field.t0 - S
    g = field.value(X, T)
    gp = gamma_plus(lp, field.N, field.x0, field.t0, X, T, strict=False)
    gm = gamma_plus(lm, field.N, field.x0, field.t0, X, T, strict=False)
    okm = gm > 1e-250
    cm = float(np.where(okm, g / np.where(okm, gm, 1), np.inf).min())
    cp = float((g / gp).max())
    masses = [slice_mass(field, float(s), n=mass_nodes) for s in depths]
    # both comparison Gaussians carry unit mass
    ok = all(cm - 1e-9 <= m <= cp + 1e-9 for m in masses) and cm > 0
    return GlobalBoundsReport(C_minus=cm, C_plus=cp, masses=masses, mass_ok=ok, lam_minus=lm, lam_plus=lp)


@dataclass
class DiagonalRatioReport:
    min_ratio: float
    max_ratio: float
    n_points: int
    passed: bool


def check_diagonal_ratio(field: FundamentalSolutionField, x, t, C_eta: float, band=(0.5, 1.5)) -> DiagonalRatioReport:
    """Gamma / Z* on points where the adjoint parametrix Z* exceeds C_eta."""
    from .gaussian_core import parametrix_adjoint
    z = parametrix_adjoint(field.op, x, t, field.x0, field.t0)
    sel = z > C_eta
    if not np.any(sel):
        return DiagonalRatioReport(np.nan, np.nan, 0, False)
    r = field.value(np.asarray(x)[sel], np.asarray(t)[sel]) / z[sel]
    lo, hi = float(r.min()), float(r.max())
    return DiagonalRatioReport(lo, hi, int(sel.sum()), band[0] <= lo and hi <= band[1])


def scan_C_eta(field: FundamentalSolutionField, x, t, eta: float = 0.5) -> float:
    """Smallest threshold C such that (1 - eta) <= Gamma / Z* <= (1 + eta) wherever Z* > C on the samples."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    from .gaussian_core import parametrix_adjoint
    z = np.asarray(parametrix_adjoint(field.op, x, t, field.x0, field.t0)).ravel()
    g = np.asarray(field.value(x, t)).ravel()
    order = np.argsort(-z)
    bad = np.abs(g[order] / z[order] - 1) > eta
    if not np.any(bad):
        return 0.0
    # the threshold must sit at or above the largest Z* among failing samples
    return float(z[order][np.argmax(bad)])


def series_rows(field: SeriesField, depths, K_max: int, residual_x=None, residual_t=None):
    """Rows (k, sup_bound, empirical_max, residual) for the series CSV export."""
    ser = field.series
    rows = []
    depths = np.asarray(depths, float)
    for k in range(1, K_max + 1):
        e = np.linspace(-6, 6, 49) * math.sqrt(2 * field.op.lam_plus)
        grids = np.meshgrid(depths, *([e] * field.N), indexing="ij")
        D = grids[0]
        Y = ser.xi + np.sqrt(D)[..., None] * np.stack(grids[1:], axis=-1)
        TH = ser.tau + D
        phik = np.abs(ser.phi(k, Y, TH))
        gp = gamma_plus(field.op.lam_plus, field.N, Y, TH, ser.xi, ser.tau, strict=False)
        bound = (special.gamma(ser.alpha / 2) * field.C_tilde) ** k / special.gamma(ser.alpha * k / 2) \
            * D ** (k * ser.alpha / 2 - 1) * gp
        emp = float((phik / bound).max())
        res = np.nan
        if residual_x is not None:
            res = check_pde_residual(field.with_K(k - 1), field.op, residual_x, residual_t).max_abs
        rows.append({"k": k, "sup_bound": 1.0, "empirical_max": emp, "residual": res})
    return rows


def write_series_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["k", "sup_bound", "empirical_max", "residual"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.12e}" if isinstance(v, float) else v) for k, v in r.items()})
