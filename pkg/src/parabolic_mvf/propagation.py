"""Attainable sets on space-time grids and numerical strong-maximum-principle checks.

Curves move backward in time at unit speed. On a grid with time step dt a curve is
discretised by jumps of delta = k dt, each with spatial length at most v_max * delta
(rounded to the nearest cell), and the straight segment of each jump must stay in the
domain at every intermediate time level.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fields import FundamentalSolutionField
from .level_set_geometry import GeometryConfig, ParabolicBall
from .mean_value import KernelEvaluator
from .operator_model import ParabolicOperator
from .quadrature_engine import volume_integral


class DomainError(ValueError):
    pass


@dataclass
class DomainGrid:
    """Uniform grid over a box with an inside mask of shape (n_t, n_x1, ..., n_xN)."""
    ts: np.ndarray
    axes: list
    inside: np.ndarray

    @classmethod
    def from_predicate(cls, ts, axes, pred: Callable):
        ts = np.asarray(ts, float)
        axes = [np.asarray(a, float) for a in axes]
        grids = np.meshgrid(ts, *axes, indexing="ij")
        X = np.stack(grids[1:], axis=-1)
        return cls(ts, axes, np.asarray(pred(X, grids[0]), bool))

    @property
    def N(self) -> int:
        return len(self.axes)

    @property
    def dt(self) -> float:
        return float(self.ts[1] - self.ts[0])

    @property
    def h(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    def index_of(self, x, t) -> tuple:
        x = np.atleast_1d(np.asarray(x, float))
        it = int(np.argmin(np.abs(self.ts - t)))
        ix = [int(np.argmin(np.abs(a - xi))) for a, xi in zip(self.axes, x)]
        tol_t = 1e-9 * max(1.0, abs(self.dt))
        if abs(self.ts[it] - t) > tol_t or any(abs(a[i] - xi) > 1e-9 * max(1.0, abs(a[1] - a[0]))
                                               for a, i, xi in zip(self.axes, ix, x)):
            raise DomainError("point is not a grid node")
        return (it, *ix)

    def point(self, idx) -> tuple:
        return np.array([a[i] for a, i in zip(self.axes, idx[1:])]), float(self.ts[idx[0]])


@dataclass
class AdmissibleCurve:
    s: np.ndarray
    x: np.ndarray
    t0: float

    @property
    def t(self) -> np.ndarray:
        return self.t0 - self.s

    def l2_speed(self) -> float:
        """Discrete L2 norm squared of the spatial velocity: sum |dx|^2 / ds."""
        ds = np.diff(self.s)
        dx = np.diff(self.x, axis=0)
        return float(np.sum(np.sum(dx ** 2, axis=-1) / ds))

    def valid(self) -> bool:
        return bool(np.all(np.diff(self.s) > 0) and np.isfinite(self.l2_speed()))


@dataclass
class AttainableRegion:
    grid: DomainGrid
    source: tuple
    v_max: float
    delta: float
    mask: np.ndarray
    parent: dict = field(repr=False)

    def curve_to(self, idx) -> AdmissibleCurve:
        idx = tuple(idx)
        if not self.mask[idx]:
            raise ValueError("point is not reachable")
        path = [idx]
        while path[-1] in self.parent and self.parent[path[-1]] is not None:
            path.append(self.parent[path[-1]])
        path.reverse()
        pts = [self.grid.point(p) for p in path]
        t0 = pts[0][1]
        return AdmissibleCurve(np.array([t0 - p[1] for p in pts]), np.array([p[0] for p in pts]), t0)

    def points(self):
        idx = np.argwhere(self.mask)
        t = self.grid.ts[idx[:, 0]]
        x = np.stack([self.grid.axes[i][idx[:, i + 1]] for i in range(self.grid.N)], axis=-1)
        return x, t


def _offsets(h: np.ndarray, reach: float) -> np.ndarray:
    """Integer cell offsets o with |o * h| <= reach + min(h) / 2."""
    n = np.floor((reach + h.min() / 2) / h).astype(int)
    rng = [np.arange(-k, k + 1) for k in n]
    O = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, len(h))
    keep = np.linalg.norm(O * h, axis=-1) <= reach + h.min() / 2 + 1e-12
    return O[keep]


def reachable_set(grid: DomainGrid, z0, v_max: float, delta: float) -> AttainableRegion:
    """Breadth-first propagation from z0 backward in time."""
    if not (v_max > 0 and delta > 0):
        raise ValueError("v_max and delta must be positive")
    k = delta / grid.dt
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise ValueError("delta must be a positive multiple of the grid time step")
    k = int(round(k))
    src = grid.index_of(z0[0], z0[1])
    if not grid.inside[src]:
        raise DomainError("z0 lies outside the domain")
    shape = grid.inside.shape
    mask = np.zeros(shape, bool)
    mask[src] = True
    parent = {src: None}
    offs = _offsets(grid.h, v_max * delta)
    fracs = np.arange(1, k) / k
    q = deque([src])
    while q:
        cur = q.popleft()
        it = cur[0] - k
        if it < 0:
            continue
        base = np.array(cur[1:])
        tgt = base + offs
        ok = np.all((tgt >= 0) & (tgt < np.array(shape[1:])), axis=1)
        for o, tg in zip(offs[ok], tgt[ok]):
            nxt = (it, *tg)
            if mask[nxt] or not grid.inside[nxt]:
                continue
            seg_ok = True
            for l, fr in enumerate(fracs, start=1):
                mid = tuple(np.rint(base + fr * o).astype(int))
                if not grid.inside[(cur[0] - l, *mid)]:
                    seg_ok = False
                    break
            if not seg_ok:
                continue
            mask[nxt] = True
            parent[nxt] = cur
            q.append(nxt)
    return AttainableRegion(grid, src, v_max, delta, mask, parent)


def write_mask_csv(region: AttainableRegion, path):
    g = region.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(g.N)] + ["reachable"])
        for idx in np.ndindex(*g.inside.shape):
            if not g.inside[idx]:
                continue
            x, t = g.point(idx)
            w.writerow([f"{t:.12e}"] + [f"{v:.12e}" for v in x] + [int(region.mask[idx])])


# ---------------------------------------------------------------------------
# strong maximum principle


@dataclass
class MaxPrincipleReport:
    mode: str
    precondition_ok: bool
    precondition_failures: list
    u0: float
    max_dev_u: Optional[float]
    max_abs_f: Optional[float]
    worst_point: Optional[tuple]
    conclusion_holds: Optional[bool]
    n_points: int

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if d["worst_point"] is not None:
            d["worst_point"] = [list(map(float, d["worst_point"][0])), float(d["worst_point"][1])]
        return d


def check_strong_max_principle(u: Callable, f: Optional[Callable], op: ParabolicOperator, region: AttainableRegion,
                               tol: float = 1e-8, mode: str = "max") -> MaxPrincipleReport:
    """``mode='max'``: c = 0, f >= 0 and u(z0) = max of u over the domain imply u = u(z0), f = 0 on
    the attainable set. ``mode='zero'``: u <= 0, f >= 0 and u(z0) = 0 imply the same.
    Preconditions are checked on the domain grid; if one fails, no conclusion is drawn."""
    if mode not in ("max", "zero"):
        raise ValueError("mode must be 'max' or 'zero'")
    g = region.grid
    idx = np.argwhere(g.inside)
    X = np.stack([g.axes[i][idx[:, i + 1]] for i in range(g.N)], axis=-1)
    T = g.ts[idx[:, 0]]
    uv = np.asarray(u(X, T), float)
    fv = np.zeros_like(uv) if f is None else np.asarray(f(X, T), float) * np.ones_like(uv)
    x0, t0 = g.point(region.source)
    u0 = float(u(x0[None, :], np.array([t0]))[0])
    fails = []
    if fv.min() < -tol:
        fails.append(f"f >= 0 violated (min f = {fv.min():.3e})")
    if mode == "max":
        cv = np.asarray(op.c(X, T), float)
        if np.max(np.abs(cv)) > tol:
            fails.append("zero-order coefficient is not 0")
        if uv.max() > u0 + tol:
            fails.append(f"u(z0) is not the maximum (max u - u(z0) = {uv.max() - u0:.3e})")
    else:
        if uv.max() > tol:
            fails.append(f"u <= 0 violated (max u = {uv.max():.3e})")
        if abs(u0) > tol:
            fails.append(f"u(z0) = {u0:.3e} is not 0")
    if fails:
        return MaxPrincipleReport(mode, False, fails, u0, None, None, None, None, int(region.mask.sum()))
    xm, tm = region.points()
    du = np.abs(np.asarray(u(xm, tm), float) - u0)
    fm = np.zeros_like(du) if f is None else np.abs(np.asarray(f(xm, tm), float) * np.ones_like(du))
    worst = int(np.argmax(np.maximum(du, fm)))
    return MaxPrincipleReport(mode, True, [], u0, float(du.max()), float(fm.max()),
                              (xm[worst], float(tm[worst])), bool(du.max() <= tol and fm.max() <= tol),
                              len(tm))


@dataclass
class PropagationStepReport:
    rho: float
    u1: float
    deficit: float
    f_term: Optional[float]
    is_local_max: bool
    max_pointwise: float
    n_deviating: int
    n_points: int


def mvf_propagation_step(u: Callable, op: ParabolicOperator, field: FundamentalSolutionField, rho: float,
                         f: Optional[Callable] = None, tol: float = 1e-10,
                         cfg: Optional[GeometryConfig] = None) -> PropagationStepReport:
    """Deficit (1/rho^N) int_{Omega_rho(z1)} M (u - u(z1)) for the pole z1 of ``field``.

    When u(z1) is the maximum of u over the ball the deficit is <= 0; for a solution
    it must then vanish. With f the term int f (1/rho^N - Gamma) over the ball is also
    returned; its weight is negative inside the ball.
    """
    ball = ParabolicBall(field, rho, 0, cfg)
    ev = KernelEvaluator(field, op)
    u1 = float(u(field.x0[None, :], np.array([field.t0]))[0])
    N = field.N

    def integrand(x, t):
        return ev.M(x, t) * (np.asarray(u(x, t), float) - u1)

    res = volume_integral(integrand, ball)
    deficit = res.value / rho ** N
    x, t, _, _ = ball.volume_points()
    pw = np.abs(integrand(x, t))
    is_max = bool(np.max(np.asarray(u(x, t), float)) <= u1 + tol)
    f_term = None
    if f is not None:
        lev = rho ** (-N)
        fr = volume_integral(lambda x, t: np.asarray(f(x, t), float) * (lev - field.value(x, t)), ball)
        f_term = fr.value
    return PropagationStepReport(rho, u1, float(deficit), f_term, is_max, float(pw.max()),
                                 int(np.sum(pw > tol)), len(pw))


def dumbbell_grid(n_x: int = 21, n_t: int = 21, neck_halfwidth: float = 0.1, neck_t: float = -1.0,
                  x_range=(-1.0, 1.0), t_range=(-2.0, 0.0)) -> DomainGrid:
    """Two full boxes in (t, x), N = 1, joined at a single time level by a thin neck."""
    ts = np.linspace(t_range[0], t_range[1], n_t)
    xs = np.linspace(x_range[0], x_range[1], n_x)
    dt = ts[1] - ts[0]

    def pred(X, T):
        at_neck = np.abs(T - neck_t) < dt / 2
        return np.where(at_neck, np.abs(X[..., 0]) <= neck_halfwidth + 1e-12, True)

    return DomainGrid.from_predicate(ts, [xs], pred)
