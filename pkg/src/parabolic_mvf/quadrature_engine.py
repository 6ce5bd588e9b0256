"""Volume and surface integrals over parabolic balls, with pole cut-offs and extrapolation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .level_set_geometry import DegenerateBallError, LevelSurfaceMesh, ParabolicBall


@dataclass
class QuadratureResult:
    value: float
    partial: list            # I(eps_k), k = 0..k_max
    epsilons: list
    extrapolated: list       # Aitken estimate available from k = 2 on (nan before)
    converged: bool
    warning: str = ""

    @property
    def increments(self) -> list:
        return [math.nan] + [b - a for a, b in zip(self.partial[:-1], self.partial[1:])]

    def rows(self):
        inc = self.increments
        return [{"epsilon_k": e, "I_k": i, "increment": d, "extrapolated": x}
                for e, i, d, x in zip(self.epsilons, self.partial, inc, self.extrapolated)]


def aitken(a: float, b: float, c: float) -> float:
    """Aitken delta-squared estimate from three consecutive partial sums, or c if unusable."""
    d1 = b - a
    d2 = c - b
    den = d2 - d1
    if d1 == 0 or d2 == 0 or den == 0:
        return c
    q = d2 / d1
    if not 0 < q < 1:
        return c
    return c - d2 * d2 / den


def _blocked_sum(values: np.ndarray, weights: np.ndarray, block: np.ndarray, k_max: int, eps0: float
                 ) -> QuadratureResult:
    contrib = values * weights
    per = [math.fsum(contrib[block == -1])]
    for k in range(k_max):
        per.append(math.fsum(contrib[block == k]))
    partial = []
    for k in range(k_max + 1):
        partial.append(math.fsum(per[:k + 1]))
    eps = [eps0 * 2.0 ** (-k) for k in range(k_max + 1)]
    ext = [math.nan, math.nan] + [aitken(*partial[k - 2:k + 1]) for k in range(2, k_max + 1)]
    warning = ""
    converged = True
    if not all(np.isfinite(partial)):
        converged = False
        warning = "non-finite partial integral"
    elif k_max >= 4:
        inc = np.abs(np.diff(partial[-5:]))
        # the pole contribution should decay geometrically; flag growth
        if inc[-1] > inc[0] and inc[-1] > 1e-14 * max(1.0, abs(partial[-1])):
            converged = False
            warning = "pole cut-off increments do not decay"
    value = ext[-1] if k_max >= 2 and np.isfinite(ext[-1]) else partial[-1]
    return QuadratureResult(value=value, partial=partial, epsilons=eps, extrapolated=ext,
                            converged=converged, warning=warning)


def volume_integral(integrand: Callable, ball: ParabolicBall, n_space: Optional[int] = None) -> QuadratureResult:
    """int over the ball of integrand(x, t) dz.

    ``integrand`` receives x (P, N) and t (P,) and returns (P,). Partial sums exclude
    the part of the ball with t0 - t < eps_k.
    """
    x, t, w, blk = ball.volume_points(n_space)
    vals = np.asarray(integrand(x, t), dtype=float)
    return _blocked_sum(vals, w, blk, ball.cfg.k_max, ball.eps0)


def surface_integral(values: np.ndarray, mesh: LevelSurfaceMesh, k_max: int, eps0: float,
                     radial: bool = False) -> QuadratureResult:
    """sum of weight * value over non-critical mesh points, blocked by pole cut-off.

    With ``radial`` the radial weights are used, so ``values`` must already carry the
    factor |grad_(x,t) G| that they omit.
    """
    w = mesh.radial_weights if radial else mesh.weights
    v = np.where(mesh.critical, 0.0, np.asarray(values, dtype=float))
    return _blocked_sum(v, w, mesh.block, k_max, eps0)


def radial_profile_integral(ball_family: Callable[[float], ParabolicBall], inner: Callable[[ParabolicBall], float],
                            weight: Callable[[float], float], r: float, n_nodes: int = 8):
    """int_0^r weight(rho) inner(ball(rho)) d rho by Gauss-Legendre in rho.

    Returns (value, skipped) where ``skipped`` lists radii whose ball was degenerate.
    """
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    rho = 0.5 * r * (x + 1)
    w = 0.5 * r * w
    terms = []
    skipped = []
    for ri, wi in zip(rho, w):
        try:
            b = ball_family(float(ri))
        except DegenerateBallError:
            skipped.append(float(ri))
            continue
        terms.append(wi * weight(float(ri)) * inner(b))
    return math.fsum(terms), skipped


def gauss_box(lo: Sequence[float], hi: Sequence[float], n: int):
    """Tensor Gauss-Legendre nodes (P, d) and weights on a box."""
    x, w = np.polynomial.legendre.leggauss(n)
    axes, wts = [], []
    for a, b in zip(lo, hi):
        axes.append(0.5 * (b - a) * (x + 1) + a)
        wts.append(0.5 * (b - a) * w)
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    W = np.ones(1)
    for wv in wts:
        W = np.multiply.outer(W, wv).ravel()
    return pts, W


@dataclass
class CoareaReport:
    lhs: float
    rhs: float
    rel_diff: float
    n_levels: int


def coarea_check(G: Callable, gradG: Callable, g: Callable, lo: Sequence[float], hi: Sequence[float],
                 n_levels: int = 200, n_grid: int = 801, n_gauss: int = 96) -> CoareaReport:
    """Two routes to int_box g |grad G| dz = int dy int_{G = y} g dH.

    Points are passed as arrays of shape (..., d) in the box coordinates. The left side
    uses tensor Gauss-Legendre. The right side extracts level sets with marching
    squares (d = 2) or marching cubes (d = 3) on a sampled grid, sums g over the
    polyline or triangle pieces, and integrates over levels by the trapezoid rule.
    """
    from skimage import measure

    d = len(lo)
    pts, W = gauss_box(lo, hi, n_gauss)
    lhs = math.fsum(W * g(pts) * np.linalg.norm(gradG(pts), axis=-1))
    axes = [np.linspace(lo[i], hi[i], n_grid if d == 2 else max(n_grid // 4, 64)) for i in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    P = np.stack(grids, axis=-1)
    vals = G(P)
    h = np.array([a[1] - a[0] for a in axes])
    ymin, ymax = float(vals.min()), float(vals.max())
    levels = np.linspace(ymin, ymax, n_levels + 2)[1:-1]
    L = []
    for y in levels:
        if d == 2:
            tot = 0.0
            for c in measure.find_contours(vals, y):
                phys = np.asarray(lo)[None, :] + c * h[None, :]
                seg = np.diff(phys, axis=0)
                mid = 0.5 * (phys[1:] + phys[:-1])
                tot += float(np.sum(np.linalg.norm(seg, axis=-1) * g(mid)))
            L.append(tot)
        else:
            verts, faces, _, _ = measure.marching_cubes(vals, y, spacing=tuple(h))
            verts = verts + np.asarray(lo)[None, :]
            tri = verts[faces]
            area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)
            L.append(float(np.sum(area * g(tri.mean(axis=1)))))
    L = np.asarray(L)
    # level-length vanishes at the extreme values
    yy = np.concatenate([[ymin], levels, [ymax]])
    LL = np.concatenate([[0.0], L, [0.0]])
    rhs = float(np.sum(0.5 * (LL[1:] + LL[:-1]) * np.diff(yy)))
    return CoareaReport(lhs=lhs, rhs=rhs, rel_diff=abs(lhs - rhs) / max(abs(lhs), 1e-300), n_levels=n_levels)


def montecarlo_oracle(integrand: Callable, ball: ParabolicBall, n: int = 200000, seed: int = 0):
    """Uniform sampling of the bounding box: (estimate, standard error)."""
    rng = np.random.default_rng(seed)
    t_lo, t_hi, x_lo, x_hi = ball.bounding_box()
    N = ball.N
    t = rng.uniform(t_lo, t_hi, n)
    x = rng.uniform(x_lo, x_hi, size=(n, N))
    vol = (t_hi - t_lo) * float(np.prod(x_hi - x_lo))
    inside = ball.contains(x, t)
    f = np.zeros(n)
    if np.any(inside):
        f[inside] = integrand(x[inside], t[inside])
    f *= vol
    return float(f.mean()), float(f.std(ddof=1) / math.sqrt(n))


def write_diagnostics_csv(result: QuadratureResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epsilon_k", "I_k", "increment", "extrapolated"])
        w.writeheader()
        for r in result.rows():
            w.writerow({k: f"{v:.12e}" for k, v in r.items()})
