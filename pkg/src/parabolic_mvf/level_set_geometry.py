"""Parabolic balls {F_m > r^-(N+m)} and their boundaries.

Each time slice of a ball is star-shaped around the slice argmax of the field,
so a ball is stored as a set of time nodes, slice centres, unit directions and
boundary radii R(direction, depth). Depths s = t0 - t are covered by

* an upper block [eps0, D] with s = D - (D - eps0) v^2 (removes the square-root
  behaviour at the bottom point of the ball), and
* dyadic blocks [eps0 2^-(k+1), eps0 2^-k], k < k_max, with Gauss-Legendre nodes in
  log s, so partial integrals with the pole cut out at depth eps_k are available.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .fields import FundamentalSolutionField, LevelFunction


class DegenerateBallError(ValueError):
    pass


@dataclass
class GeometryConfig:
    n_time: int = 8          # Gauss-Legendre nodes per dyadic block
    n_upper: int = 16        # nodes on the upper block
    k_max: int = 48          # number of dyadic blocks below eps0
    eps0_frac: float = 0.125  # eps0 = eps0_frac * depth
    n_space: int = 12        # radial Gauss-Legendre nodes
    n_angle: int = 32        # angular nodes (N = 2), azimuthal nodes (N = 3)
    n_polar: int = 12        # polar Gauss-Legendre nodes (N = 3)
    grad_eps: Optional[float] = None     # None: 1e-10 * level * N / r

    def refined(self, factor: int = 2) -> "GeometryConfig":
        return GeometryConfig(n_time=self.n_time * factor, n_upper=self.n_upper * factor,
                              k_max=self.k_max, eps0_frac=self.eps0_frac,
                              n_space=self.n_space * factor, n_angle=self.n_angle * factor,
                              n_polar=self.n_polar * factor, grad_eps=self.grad_eps)


def sphere_rule(N: int, n_angle: int = 32, n_polar: int = 12):
    """Unit directions and weights integrating over S^(N-1)."""
    if N == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if N == 2:
        phi = 2 * np.pi * (np.arange(n_angle) + 0.5) / n_angle
        return np.stack([np.cos(phi), np.sin(phi)], axis=-1), np.full(n_angle, 2 * np.pi / n_angle)
    if N == 3:
        mu, wm = np.polynomial.legendre.leggauss(n_polar)
        phi = 2 * np.pi * (np.arange(n_angle) + 0.5) / n_angle
        M, P = np.meshgrid(mu, phi, indexing="ij")
        sn = np.sqrt(1 - M ** 2)
        dirs = np.stack([sn * np.cos(P), sn * np.sin(P), M], axis=-1).reshape(-1, 3)
        w = np.multiply.outer(wm, np.full(n_angle, 2 * np.pi / n_angle)).ravel()
        return dirs, w
    raise ValueError("only N <= 3 is supported")


def _gl01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


def time_rule(depth: float, cfg: GeometryConfig):
    """Depth nodes, weights and block ids (-1 for the upper block, k for dyadic block k)."""
    eps0 = cfg.eps0_frac * depth
    v, wv = _gl01(cfg.n_upper)
    s_up = depth - (depth - eps0) * v ** 2
    w_up = wv * 2 * (depth - eps0) * v
    nodes = [s_up]
    weights = [w_up]
    ids = [np.full(cfg.n_upper, -1)]
    u, wu = _gl01(cfg.n_time)
    for k in range(cfg.k_max):
        hi = eps0 * 2.0 ** (-k)
        lo = hi / 2
        ls = math.log(lo) + (math.log(hi) - math.log(lo)) * u
        s = np.exp(ls)
        nodes.append(s)
        weights.append(wu * (math.log(hi) - math.log(lo)) * s)
        ids.append(np.full(cfg.n_time, k))
    return np.concatenate(nodes), np.concatenate(weights), np.concatenate(ids), eps0


def _log_level_fn(F: LevelFunction, x, t, level):
    v = F.value(x, t)
    with np.errstate(divide="ignore"):
        return np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), -np.inf) - math.log(level)


def ray_roots(F: LevelFunction, centers, dirs, t, level, rmax, iters: int = 80, rtol: float = 1e-14):
    """Boundary radius along rays c + rho * theta, vectorised safeguarded Newton-bisection.

    ``centers`` (P, N), ``dirs`` (P, N), ``t`` (P,), ``rmax`` (P,). Rays whose centre is
    not inside the super-level set get radius 0.
    """
    P = len(t)
    lo = np.zeros(P)
    hi = np.asarray(rmax, dtype=float).copy()
    g0 = _log_level_fn(F, centers, t, level)
    inside = g0 > 0
    ghi = _log_level_fn(F, centers + hi[:, None] * dirs, t, level)
    # grow the bracket if the certified radius was not large enough
    for _ in range(60):
        bad = inside & (ghi > 0)
        if not np.any(bad):
            break
        hi[bad] *= 2
        ghi[bad] = _log_level_fn(F, centers[bad] + hi[bad, None] * dirs[bad], t[bad], level)
    rho = 0.5 * (lo + hi)
    for _ in range(iters):
        x = centers + rho[:, None] * dirs
        v = F.value(x, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), -np.inf) - math.log(level)
            dg = np.einsum("pi,pi->p", F.grad_x(x, t), dirs) / np.where(v > 0, v, 1.0)
        pos = g > 0
        lo = np.where(pos, rho, lo)
        hi = np.where(pos, hi, rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = rho - g / dg
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi) & (dg < 0)
        new = np.where(ok, newton, 0.5 * (lo + hi))
        done = np.abs(new - rho) <= rtol * np.maximum(hi, 1e-300)
        rho = new
        if np.all(done | ~inside):
            break
    return np.where(inside, rho, 0.0)


@dataclass
class LevelSurfaceMesh:
    """Quadrature points on the boundary of a parabolic ball.

    ``points_t`` (P,), ``points_x`` (P, N), ``normals`` (P, N+1) with the time
    component first, ``weights`` (P,) for integrals d H^N, ``critical`` (P,) bool,
    ``block`` (P,) time-block ids; ``radial_weights`` are the weights for the form
    <A grad G, grad G> / |<grad_x G, theta>| that avoid the cancellation in K dH^N.
    """

    points_t: np.ndarray
    points_x: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    critical: np.ndarray
    block: np.ndarray
    dirs: np.ndarray
    radial_weights: np.ndarray
    z0: tuple
    r: float


class ParabolicBall:
    """Super-level set {F_m > r^-(N+m)} of a fundamental-solution field."""

    def __init__(self, field: FundamentalSolutionField, r: float, m: int = 0, cfg: Optional[GeometryConfig] = None):
        if not r > 0:
            raise ValueError("radius must be positive")
        self.field = field
        self.F = LevelFunction(field, m)
        self.m = m
        self.r = float(r)
        self.N = field.N
        self.cfg = cfg or GeometryConfig()
        self.level = self.F.level(r)
        self.x0 = field.x0
        self.t0 = field.t0
        self.depth = self._depth()
        s, w, ids, eps0 = time_rule(self.depth, self.cfg)
        self.s_nodes, self.s_weights, self.s_block, self.eps0 = s, w, ids, eps0
        self.dirs, self.dir_weights = sphere_rule(self.N, self.cfg.n_angle, self.cfg.n_polar)
        self.centers = self.F.ridge(s)
        self.R = self.boundary_radius(s, self.centers)
        if not np.any(self.R > 0):
            raise DegenerateBallError(f"ball of radius {r} has no interior points")

    # -- geometry -------------------------------------------------------------
    def _slice_gap(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        v = self.F.slice_max(s)
        with np.errstate(divide="ignore"):
            return np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), -np.inf) - math.log(self.level)

    def _depth(self) -> float:
        s = 1e-12 * max(self.r ** 2, 1e-300)
        g = self._slice_gap(s)[0]
        if not g > 0:
            raise DegenerateBallError("slice maximum below level near the pole")
        while True:
            s2 = 2 * s
            g2 = self._slice_gap(s2)[0]
            if not g2 > 0:
                break
            s = s2
            if s > 1e8:
                raise DegenerateBallError("ball is unbounded in time")
        f = lambda q: float(self._slice_gap(q)[0]) if np.isfinite(self._slice_gap(q)[0]) else -1e300
        return brentq(f, s, s2, xtol=1e-15 * s2, rtol=1e-15, maxiter=200)

    def boundary_radius(self, s, centers=None, dirs=None):
        """R[i, j] for depth s[i] and direction j."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        dirs = self.dirs if dirs is None else np.atleast_2d(dirs)
        centers = self.F.ridge(s) if centers is None else centers
        ns, nd = len(s), len(dirs)
        C = np.repeat(centers, nd, axis=0)
        D = np.tile(dirs, (ns, 1))
        T = np.repeat(self.t0 - s, nd)
        rmax = np.repeat(self.F.radius_bound(s, self.level), nd)
        rmax = np.maximum(rmax, 1e-300)
        return ray_roots(self.F, C, D, T, self.level, rmax).reshape(ns, nd)

    def contains(self, x, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        inside = self.F.value(x, t) > self.level
        return inside & (t < self.t0)

    def bounding_box(self, n: int = 200):
        """(t_min, t_max, x_min, x_max) from the certified radius bound."""
        s = np.linspace(0, self.depth, n + 1)[1:]
        rb = self.F.radius_bound(s, self.level)
        c = self.F.ridge(s)
        lo = (c - rb[:, None]).min(axis=0)
        hi = (c + rb[:, None]).max(axis=0)
        return self.t0 - self.depth, self.t0, lo, hi

    def classify_grid(self, n_t: int = 101, n_x: int = 101):
        t_lo, t_hi, x_lo, x_hi = self.bounding_box()
        ts = np.linspace(t_lo, t_hi, n_t)
        axes = [np.linspace(x_lo[i], x_hi[i], n_x) for i in range(self.N)]
        grids = np.meshgrid(ts, *axes, indexing="ij")
        T = grids[0]
        X = np.stack(grids[1:], axis=-1)
        mask = self.contains(X, T)
        if not np.any(mask):
            raise DegenerateBallError(f"ball of radius {self.r} has no interior grid points")
        return ts, axes, mask

    def halfwidth(self, direction=None) -> tuple[float, float]:
        """Largest extent of the ball from x0 along ``direction``; returns (width, depth attained)."""
        d = np.zeros(self.N)
        d[0] = 1.0
        if direction is not None:
            d = np.asarray(direction, float) / np.linalg.norm(direction)

        def neg(s):
            c = self.F.ridge(np.array([s]))
            R = self.boundary_radius(np.array([s]), c, d[None, :])[0, 0]
            return -(float(np.dot(c[0] - self.x0, d)) + R)

        best = min(((neg(si), si) for si in np.linspace(0, self.depth, 41)[1:-1]))
        s0 = best[1]
        h = self.depth / 40
        res = minimize_scalar(neg, bounds=(max(s0 - h, 1e-300), min(s0 + h, self.depth)), method="bounded",
                              options={"xatol": 1e-12 * self.depth})
        return -float(res.fun), float(res.x)

    # -- quadrature points ------------------------------------------------------
    def volume_points(self, n_space: Optional[int] = None):
        """Points (x, t) with weights for integrals over the ball, plus their block ids."""
        ns = n_space or self.cfg.n_space
        rho, wr = _gl01(ns)
        S = len(self.s_nodes)
        Dn = len(self.dirs)
        R = self.R[:, :, None]                                   # (S, D, 1)
        radius = R * rho                                          # (S, D, ns)
        x = self.centers[:, None, None, :] + radius[..., None] * self.dirs[None, :, None, :]
        w = (self.s_weights[:, None, None] * self.dir_weights[None, :, None]
             * R * wr * radius ** (self.N - 1))
        t = np.broadcast_to((self.t0 - self.s_nodes)[:, None, None], radius.shape)
        blk = np.broadcast_to(self.s_block[:, None, None], radius.shape)
        return x.reshape(-1, self.N), t.reshape(-1), w.reshape(-1), blk.reshape(-1)

    def surface_mesh(self) -> LevelSurfaceMesh:
        S = len(self.s_nodes)
        Dn = len(self.dirs)
        x = (self.centers[:, None, :] + self.R[..., None] * self.dirs[None]).reshape(-1, self.N)
        t = np.repeat(self.t0 - self.s_nodes, Dn)
        F = self.F
        gx = F.grad_x(x, t)
        gt = F.dt(x, t)
        g = np.concatenate([gt[:, None], gx], axis=-1)
        gn = np.linalg.norm(g, axis=-1)
        dirs = np.tile(self.dirs, (S, 1))
        radial = np.abs(np.einsum("pi,pi->p", gx, dirs))
        base = (np.repeat(self.s_weights, Dn) * np.tile(self.dir_weights, S)
                * self.R.reshape(-1) ** (self.N - 1))
        eps = self.cfg.grad_eps if self.cfg.grad_eps is not None else 1e-10 * self.level * self.N / self.r
        crit = (gn < eps) | (radial == 0) | (self.R.reshape(-1) <= 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(crit, 0.0, base * gn / np.where(radial > 0, radial, 1.0))
            nu = np.where(crit[:, None], 0.0, g / np.where(gn > 0, gn, 1.0)[:, None])
            rw = np.where(crit, 0.0, base / np.where(radial > 0, radial, 1.0))
        return LevelSurfaceMesh(points_t=t, points_x=x, normals=nu, weights=w, critical=crit,
                                block=np.repeat(self.s_block, Dn), dirs=dirs, radial_weights=rw,
                                z0=(tuple(self.x0), self.t0), r=self.r)

    def outline(self, n: int = 200):
        """Closed boundary polyline (t, x) for N = 1."""
        if self.N != 1:
            raise ValueError("outline is only defined for N = 1")
        v = np.linspace(0, 1, n)
        s = self.depth * (1 - (1 - v) ** 2)
        s = s[1:-1]
        c = self.F.ridge(s)
        R = self.boundary_radius(s, c)
        right = c[:, 0] + R[:, 0]
        left = c[:, 0] - R[:, 1]
        bottom_c = self.F.ridge(np.array([self.depth]))[0, 0]
        ts = np.concatenate([[self.t0], self.t0 - s, [self.t0 - self.depth], (self.t0 - s)[::-1], [self.t0]])
        xs = np.concatenate([[self.x0[0]], right, [bottom_c], left[::-1], [self.x0[0]]])
        return ts, xs


def extract_ball(field: FundamentalSolutionField, r: float, m: int = 0, cfg: Optional[GeometryConfig] = None
                 ) -> ParabolicBall:
    return ParabolicBall(field, r, m, cfg)


def extract_sphere(field: FundamentalSolutionField, r: float, cfg: Optional[GeometryConfig] = None
                   ) -> LevelSurfaceMesh:
    return ParabolicBall(field, r, 0, cfg).surface_mesh()


# ---------------------------------------------------------------------------
# explicit ellipsoidal sets and the inclusion test


def ellipsoid_slice(op, x0, t0, r: float, t: float):
    """Slice at time t of {Z*(z; z0) >= 2 r^-N}: returns (centre, A^-1, rhs) or None if empty.

    Membership is <A^-1 (x - x0), x - x0> <= rhs.
    """
    N = op.N
    s = t0 - t
    if s <= 0:
        return None
    A = op.a(np.asarray(x0, float), np.asarray(t0, float))
    detA = float(np.linalg.det(A))
    rhs = -4 * s * (math.log(2 / r ** N) + 0.5 * math.log(detA) + 0.5 * N * math.log(4 * np.pi * s))
    if rhs < 0:
        return None
    return np.asarray(x0, float), np.linalg.inv(A), rhs


def in_ellipsoid_set(op, x0, t0, r: float, x, t) -> np.ndarray:
    N = op.N
    x = np.asarray(x, float)
    s = t0 - np.asarray(t, float)
    A = op.a(np.asarray(x0, float), np.asarray(t0, float))
    Ainv = np.linalg.inv(A)
    detA = float(np.linalg.det(A))
    w = x - np.asarray(x0, float)
    q = np.einsum("...i,ij,...j->...", w, Ainv, w)
    sp = np.where(s > 0, s, 1.0)
    rhs = -4 * sp * (math.log(2 / r ** N) + 0.5 * math.log(detA) + 0.5 * N * np.log(4 * np.pi * sp))
    return (s > 0) & (q <= rhs)


@dataclass
class InclusionReport:
    radii: list
    inner_ok: list
    outer_ok: list
    r_hat: float
    n_points: int


def check_inclusion_lemma(field: FundamentalSolutionField, radii, n_t: int = 81, n_x: int = 81) -> InclusionReport:
    """Grid test of E*_r subset Omega_r subset E*_{3r} for each radius.

    r_hat is the largest radius such that every tested radius up to it passes.
    """
    op = field.op
    inner, outer = [], []
    n_pts = 0
    for r in sorted(radii):
        ball = ParabolicBall(field, r, 0, GeometryConfig(k_max=4, n_upper=8, n_time=4))
        t_lo, _, xlo, xhi = ball.bounding_box()
        # the outer ellipsoid E*_{3r} reaches depth (3r)^2 ... bound its extent directly
        A = op.a(field.x0, np.asarray(field.t0))
        detA = float(np.linalg.det(A))
        s_big = (3 * r) ** 2 / (4 * np.pi) / 2 ** (2 / op.N) / detA ** (1 / op.N)
        lmax = float(np.linalg.eigvalsh(A).max())
        ext = math.sqrt(2 * op.N * lmax * s_big) * 2 + 1e-12
        t_lo = min(t_lo, field.t0 - s_big)
        xlo = np.minimum(xlo, field.x0 - ext)
        xhi = np.maximum(xhi, field.x0 + ext)
        ts = field.t0 - (field.t0 - t_lo) * ((np.arange(n_t) + 0.5) / n_t) ** 2
        axes = [np.linspace(xlo[i], xhi[i], n_x) for i in range(op.N)]
        grids = np.meshgrid(ts, *axes, indexing="ij")
        T = grids[0]
        X = np.stack(grids[1:], axis=-1)
        in_ball = ball.contains(X, T)
        in_small = in_ellipsoid_set(op, field.x0, field.t0, r, X, T)
        in_big = in_ellipsoid_set(op, field.x0, field.t0, 3 * r, X, T)
        inner.append(bool(np.all(in_ball[in_small])))
        outer.append(bool(np.all(in_big[in_ball])))
        n_pts += T.size
    r_hat = 0.0
    for r, a, b in zip(sorted(radii), inner, outer):
        if a and b:
            r_hat = r
        else:
            break
    return InclusionReport(sorted(radii), inner, outer, r_hat, n_pts)


def parabolic_rescale(x, t, x0, t0, r: float):
    """(x, t) -> ((x - x0)/r, (t - t0)/r^2)."""
    return (np.asarray(x, float) - x0) / r, (np.asarray(t, float) - t0) / r ** 2


def parabolic_unscale(y, s, x0, t0, r: float):
    return np.asarray(x0, float) + r * np.asarray(y, float), t0 + r ** 2 * np.asarray(s, float)


@dataclass
class GradientEstimateReport:
    C_fit: float
    n_points: int


def sample_ball(ball: ParabolicBall, n: int, seed: int = 0):
    """Random interior points (x, t) via the slice structure."""
    rng = np.random.default_rng(seed)
    s = ball.depth * rng.uniform(1e-6, 1, n)
    c = ball.F.ridge(s)
    if ball.N == 1:
        d = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)[:, None]
    else:
        d = rng.normal(size=(n, ball.N))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
    R = ray_roots(ball.F, c, d, ball.t0 - s, ball.level, np.maximum(ball.F.radius_bound(s, ball.level), 1e-300))
    frac = rng.uniform(0, 1, n) * 0.999
    x = c + (frac * R)[:, None] * d
    return x, ball.t0 - s


def check_gradient_estimate(field: FundamentalSolutionField, r: float, n: int = 2000, seed: int = 0
                            ) -> GradientEstimateReport:
    """Fitted C in |d_j Gamma| <= C (|x0 - x| / (t0 - t) + 1) Gamma over samples of the ball."""
    ball = ParabolicBall(field, r)
    x, t = sample_ball(ball, n, seed)
    s = field.t0 - t
    g = field.value(x, t)
    gr = np.abs(field.grad_x(x, t)).max(axis=-1)
    dist = np.linalg.norm(x - field.x0, axis=-1)
    C = float((gr / ((dist / s + 1) * g)).max())
    return GradientEstimateReport(C, n)


def write_levelset_csv(mesh: LevelSurfaceMesh, path):
    N = mesh.points_x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(N)] + ["nu_t"] + [f"nu_x{i + 1}" for i in range(N)]
                   + ["weight", "critical_flag"])
        for i in range(len(mesh.points_t)):
            row = [f"{mesh.points_t[i]:.12e}"] + [f"{v:.12e}" for v in mesh.points_x[i]]
            row += [f"{v:.12e}" for v in mesh.normals[i]] + [f"{mesh.weights[i]:.12e}", int(mesh.critical[i])]
            w.writerow(row)
