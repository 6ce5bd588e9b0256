"""Harnack inequalities: the compact set K, the constants, cylinders and Harnack chains.

Fields are produced per pole by a ``field_factory(x, t)``; for constant
coefficients this is the closed-form Gaussian, otherwise the series field.
Large constants are carried in log form.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fields import ExactGaussianField, FundamentalSolutionField, LevelFunction
from .level_set_geometry import DegenerateBallError, GeometryConfig, ParabolicBall, ray_roots
from .mean_value import KernelEvaluator, unit_ball_volume
from .operator_model import ParabolicOperator

THETA_CANDIDATES = tuple(round(0.9 - 0.1 * i, 1) for i in range(9))


class HarnackConfigError(ValueError):
    pass


def exact_factory(op: ParabolicOperator):
    return lambda x, t: ExactGaussianField(op, x, t)


def _geom():
    return GeometryConfig(n_time=4, n_upper=12, k_max=6, n_space=8, n_angle=16)


# ---------------------------------------------------------------------------
# the compact set K_r^(m)


def cut_depth(r: float, N: int, m: int, cut_lambda: float) -> float:
    """Depth below the pole where K starts: r^2 / (4 pi cut_lambda^(N/(N+m)))."""
    return r ** 2 / (4 * np.pi * cut_lambda ** (N / (N + m)))


@dataclass
class KRegion:
    points_x: np.ndarray
    points_t: np.ndarray
    empty: bool
    single_point: bool
    cut_depth: float
    ball_depth: float
    r: float
    m: int


def compact_set_Krm(field: FundamentalSolutionField, r: float, m: int, cut_lambda: Optional[float] = None,
                    n_t: int = 9, n_rad: int = 5, rel_tol: float = 1e-9) -> KRegion:
    """Sample points of closure(Omega_r^(m)) intersected with {t <= t0 - cut_depth}.

    The samples include slice boundaries and the bottom point of the ball. When the
    cut depth equals the ball depth (within ``rel_tol``) the region is the bottom point.
    """
    op = field.op
    lam_c = op.lam if cut_lambda is None else cut_lambda
    ball = ParabolicBall(field, r, m, _geom())
    sc = cut_depth(r, field.N, m, lam_c)
    D = ball.depth
    bottom_x = ball.F.ridge(np.array([D]))
    if sc > D * (1 + rel_tol):
        return KRegion(np.zeros((0, field.N)), np.zeros(0), True, False, sc, D, r, m)
    if sc >= D * (1 - rel_tol):
        return KRegion(bottom_x, np.array([field.t0 - D]), False, True, sc, D, r, m)
    s = np.linspace(sc, D, n_t)[:-1]
    c = ball.F.ridge(s)
    R = ball.boundary_radius(s, c)
    frac = np.linspace(0, 1, n_rad)
    pts = (c[:, None, None, :] + (R[:, :, None] * frac[None, None, :])[..., None] * ball.dirs[None, :, None, :])
    xs = pts.reshape(-1, field.N)
    ts = np.repeat(field.t0 - s, len(ball.dirs) * n_rad)
    xs = np.concatenate([xs, bottom_x])
    ts = np.concatenate([ts, [field.t0 - D]])
    return KRegion(xs, ts, False, False, sc, D, r, m)


# ---------------------------------------------------------------------------
# constants


def m_minus(N: int, m: int, r: float, lam: float) -> float:
    """Closed-form lower bound for M_{5r}^(m) on the cut part of Omega_{4r}^(m)."""
    om = unit_ball_volume(m)
    return (lam ** (-N * (m - 2) / (N + m)) * (m * om / (m + 2)) * r ** (2 * m - 4) / (2 * np.pi) ** (m - 2)
            * ((N + m) * math.log(5 / 4)) ** ((m + 2) / 2))


def harnack_ball_constant(M_plus: float, m_minus_v: float, theta: float, N: int, m: int) -> float:
    return 5 ** (N + m) * M_plus / (theta ** (N + m) * m_minus_v)


@dataclass
class HarnackConstants:
    m: int
    N: int
    M_plus: float
    m_minus: float
    theta: float
    C_K: float
    r_list: list
    cut_lambda: float
    claim_iv_min_ratio: float = math.nan
    C_D: float = math.nan
    log_C_H: float = math.nan
    r0: float = math.nan
    r1: float = math.nan
    kappa1: float = math.nan
    theta1: float = math.nan
    delta1: float = math.nan

    @property
    def C_H(self) -> float:
        return math.exp(self.log_C_H) if self.log_C_H < 700 else math.inf

    def identity_defect(self) -> float:
        """|C_K - 5^(N+m) M+ / (theta^(N+m) m-)| recomputed from the stored fields."""
        return abs(self.C_K - harnack_ball_constant(self.M_plus, self.m_minus, self.theta, self.N, self.m))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["C_H"] = self.C_H
        return d


def _ball_points(ball: ParabolicBall, n_space: int = 6):
    x, t, _, _ = ball.volume_points(n_space)
    mesh_x = (ball.centers[:, None, :] + ball.R[..., None] * ball.dirs[None]).reshape(-1, ball.N)
    mesh_t = np.repeat(ball.t0 - ball.s_nodes, len(ball.dirs))
    return np.concatenate([x, mesh_x]), np.concatenate([t, mesh_t])


def scan_theta(field: FundamentalSolutionField, factory: Callable, r: float, m: int, K: KRegion,
               cut_lambda: float, candidates: Sequence[float] = THETA_CANDIDATES, max_poles: int = 5):
    """Largest theta with Omega_{theta r}^(m)(z) inside closure(Omega_{4r}^(m)(z0)) below the cut, z in K."""
    F0 = LevelFunction(field, m)
    lev4 = F0.level(4 * r)
    t_cut = field.t0 - cut_depth(r, field.N, m, cut_lambda)
    idx = np.linspace(0, len(K.points_t) - 1, min(max_poles, len(K.points_t))).round().astype(int)
    poles = [(K.points_x[i], K.points_t[i]) for i in sorted(set(idx))]
    fields = [factory(x, t) for x, t in poles]
    for th in candidates:
        ok = True
        for fz in fields:
            try:
                b = ParabolicBall(fz, th * r, m, _geom())
            except DegenerateBallError:
                continue
            x, t = _ball_points(b)
            inside = F0.value(x, t) >= lev4 * (1 - 1e-10)
            below = t <= t_cut + 1e-12 * max(1.0, abs(t_cut))
            if not (np.all(inside) and np.all(below)):
                ok = False
                break
        if ok:
            return th
    return None


def sup_M_kernel(field: FundamentalSolutionField, rho: float, m: int) -> float:
    ball = ParabolicBall(field, rho, m, _geom())
    x, t = _ball_points(ball)
    ev = KernelEvaluator(field)
    return float(ev.extended(x, t, rho, m)[1].max())


def compute_constants(field: FundamentalSolutionField, factory: Callable, m: int, r_list: Sequence[float],
                      cut_lambda: Optional[float] = None, candidates: Sequence[float] = THETA_CANDIDATES,
                      max_poles: int = 5) -> HarnackConstants:
    """theta by the inclusion scan, M+ by grid maximisation, m- in closed form, and C_K."""
    if m <= 2:
        raise HarnackConfigError("the Harnack construction needs m > 2")
    op = field.op
    N = field.N
    lam_c = op.lam if cut_lambda is None else float(cut_lambda)
    thetas, Ms, claim_iv = [], [], []
    for r in r_list:
        K = compact_set_Krm(field, r, m, lam_c)
        if K.empty:
            raise HarnackConfigError(f"K_r^(m) is empty at r={r} (cut depth {K.cut_depth:.6g} > ball depth "
                                     f"{K.ball_depth:.6g})")
        th = scan_theta(field, factory, r, m, K, lam_c, candidates, max_poles)
        if th is None:
            raise HarnackConfigError(f"no theta candidate passes the inclusion scan at r={r}")
        thetas.append(th)
    theta = min(thetas)
    for r in r_list:
        K = compact_set_Krm(field, r, m, lam_c)
        idx = np.linspace(0, len(K.points_t) - 1, min(max_poles, len(K.points_t))).round().astype(int)
        for i in sorted(set(idx)):
            fz = factory(K.points_x[i], K.points_t[i])
            Ms.append(sup_M_kernel(fz, theta * r, m))
        claim_iv.append(check_claim_iv(field, r, m, lam_c))
    M_plus = max(Ms)
    # the closed form increases with r, so the smallest radius gives the uniform bound
    mm = m_minus(N, m, min(r_list), lam_c)
    C_K = harnack_ball_constant(M_plus, mm, theta, N, m)
    return HarnackConstants(m=m, N=N, M_plus=M_plus, m_minus=mm, theta=theta, C_K=C_K,
                            r_list=[float(r) for r in r_list], cut_lambda=lam_c,
                            claim_iv_min_ratio=min(claim_iv))


def check_claim_iv(field: FundamentalSolutionField, r: float, m: int, cut_lambda: float) -> float:
    """min over sampled zeta in Omega_{4r}^(m), tau <= cut, of M_{5r}^(m)(z0; zeta) / m-."""
    ball = ParabolicBall(field, 4 * r, m, _geom())
    x, t = _ball_points(ball)
    sc = cut_depth(r, field.N, m, cut_lambda)
    sel = (field.t0 - t) >= sc
    if not np.any(sel):
        return math.inf
    ev = KernelEvaluator(field)
    Mv = ev.extended(x[sel], t[sel], 5 * r, m)[1]
    return float(Mv.min() / m_minus(field.N, m, r, cut_lambda))


@dataclass
class BallHarnackReport:
    sup_u: float
    u0: float
    ratio: float
    C_K: float
    passed: bool
    n_points: int


def harnack_ball_check(u: Callable, field: FundamentalSolutionField, r: float, m: int,
                       constants: HarnackConstants) -> BallHarnackReport:
    """sup over K_r^(m)(z0) of u against C_K u(z0)."""
    u0 = float(u(field.x0[None, :], np.array([field.t0]))[0])
    if not u0 > 0:
        raise ValueError("u(z0) must be positive")
    K = compact_set_Krm(field, r, m, constants.cut_lambda)
    if K.empty:
        raise ValueError("K_r^(m) is empty")
    sup_u = float(np.max(u(K.points_x, K.points_t)))
    ratio = sup_u / u0
    return BallHarnackReport(sup_u, u0, ratio, constants.C_K, ratio <= constants.C_K, len(K.points_t))


# ---------------------------------------------------------------------------
# cylinders and chains


@dataclass
class Cylinder:
    x0: np.ndarray
    t0: float
    r: float
    variant: str = "full"          # full, lower, upper, slice
    iota: float = 0.25
    kappa: float = 0.5
    mu: float = 0.75
    theta: float = 0.5
    kappa1: float = math.nan
    theta1: float = math.nan

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, float)
        if not (0 < self.iota < self.kappa < self.mu < 1 and 0 < self.theta < 1):
            raise ValueError("need 0 < iota < kappa < mu < 1 and 0 < theta < 1")

    def time_interval(self):
        r2 = self.r ** 2
        if self.variant == "full":
            return self.t0 - r2, self.t0
        if self.variant == "upper":
            return self.t0 - self.iota * r2, self.t0
        if self.variant == "lower":
            # the interval between the two depths mu r^2 and kappa r^2
            return self.t0 - self.mu * r2, self.t0 - self.kappa * r2
        if self.variant == "slice":
            t = self.t0 - self.kappa1 * r2
            return t, t
        raise ValueError(self.variant)

    def spatial_radius(self) -> float:
        if self.variant == "full":
            return self.r
        if self.variant == "slice":
            return self.theta1 * self.r
        return self.theta * self.r

    def contains(self, x, t, closed: bool = False) -> np.ndarray:
        x = np.asarray(x, float)
        t = np.asarray(t, float)
        lo, hi = self.time_interval()
        d = np.linalg.norm(x - self.x0, axis=-1)
        R = self.spatial_radius()
        if self.variant == "slice":
            return (d < R) & np.isclose(t, lo, rtol=0, atol=1e-12)
        if closed:
            return (d <= R) & (t >= lo) & (t <= hi)
        return (d < R) & (t > lo) & (t < hi)

    def grid(self, n_x: int = 21, n_t: int = 21, margin: float = 1e-9):
        """Interior grid points (x, t) of the cylinder (N = 1, 2)."""
        lo, hi = self.time_interval()
        R = self.spatial_radius() * (1 - margin)
        N = len(self.x0)
        ts = np.linspace(lo + margin, hi - margin, n_t) if hi > lo else np.array([lo])
        axes = [np.linspace(-R, R, n_x) + self.x0[i] for i in range(N)]
        grids = np.meshgrid(ts, *axes, indexing="ij")
        T = grids[0].ravel()
        X = np.stack([g.ravel() for g in grids[1:]], axis=-1)
        keep = np.linalg.norm(X - self.x0, axis=-1) < self.spatial_radius()
        return X[keep], T[keep]


@dataclass
class HarnackChain:
    z_plus: tuple
    z_minus: tuple
    r: float
    y: np.ndarray
    m: int
    points_x: np.ndarray
    points_t: np.ndarray
    case: str
    kappa1: float
    theta1: float
    r0: float
    claimed_bound: float
    claimed_bound_holds: bool

    def invariants(self, tol: float = 1e-12) -> dict:
        xp, tp = np.asarray(self.z_plus[0], float), float(self.z_plus[1])
        xm, tm = np.asarray(self.z_minus[0], float), float(self.z_minus[1])
        j = np.arange(self.m + 1)
        wx = xp + (j * self.r)[:, None] * self.y
        wt = tp - j * self.kappa1 * self.r ** 2
        steps_x = np.linalg.norm(np.diff(self.points_x, axis=0), axis=-1)
        steps_t = -np.diff(self.points_t)
        return {
            "endpoints": bool(np.allclose(self.points_x[0], xp, atol=tol, rtol=0) and abs(self.points_t[0] - tp) <= tol
                              and np.allclose(self.points_x[-1], xm, atol=tol, rtol=0)
                              and abs(self.points_t[-1] - tm) <= tol),
            "formula": bool(np.array_equal(wx[:-1], self.points_x[:-1]) and np.array_equal(wt[:-1], self.points_t[:-1])
                            and np.allclose(wx, self.points_x, atol=tol, rtol=0)
                            and np.allclose(wt, self.points_t, atol=tol, rtol=0)),
            "y_bound": bool(np.linalg.norm(self.y) <= self.theta1 * (1 + 1e-12)),
            "r_bound": bool(self.r <= self.r0 * (1 + 1e-12)),
            "membership": bool(np.all(steps_x <= self.theta1 * self.r * (1 + 1e-12))
                               and np.allclose(steps_t, self.kappa1 * self.r ** 2, rtol=1e-12, atol=1e-15)),
        }


def build_chain(z_plus, z_minus, r0: float, kappa1: float, theta1: float, kappa: float = 0.5,
                iota: float = 0.25) -> HarnackChain:
    """Points w_j = (x+ + j r y, t+ - j kappa1 r^2), j = 0..m, joining z+ to z-."""
    xp = np.atleast_1d(np.asarray(z_plus[0], float))
    tp = float(z_plus[1])
    xm = np.atleast_1d(np.asarray(z_minus[0], float))
    tm = float(z_minus[1])
    dt = tp - tm
    if not dt > 0:
        raise ValueError("need t+ > t-")
    dx = xm - xp
    dist = float(np.linalg.norm(dx))
    if dist / dt <= theta1 / (kappa1 * r0):
        case = "small-slope"
        m = max(1, int(math.ceil(dt / (kappa1 * r0 ** 2) - 1e-12)))
        claimed = 1.0 / (kappa1 * r0 ** 2)
        holds = m <= claimed
    else:
        case = "large-slope"
        q = kappa1 * dist ** 2 / (theta1 ** 2 * dt)
        m = max(1, int(math.ceil(q - 1e-12)))
        claimed = 4 * kappa1 / (theta1 ** 2 * (kappa - iota))
        holds = m < claimed
    r = math.sqrt(dt / (m * kappa1))
    y = dx / (m * r)
    j = np.arange(m + 1)
    px = xp + (j * r)[:, None] * y
    pt = tp - j * kappa1 * r ** 2
    # land exactly on the endpoint despite rounding in r^2
    px[-1] = xm
    pt[-1] = tm
    return HarnackChain((tuple(xp), tp), (tuple(xm), tm), r, y, m, px, pt, case, kappa1, theta1, r0, claimed, holds)


@dataclass
class SliceConstants:
    kappa1: float
    theta1: float
    delta1: float
    r_ref: float


def fit_delta1(field: FundamentalSolutionField, m: int, radii: Sequence[float]) -> float:
    """Smallest delta with Omega_rho^(m)(z0) inside Q_{delta rho}(z0) for the tested radii."""
    best = 0.0
    for rho in radii:
        b = ParabolicBall(field, rho, m, _geom())
        widths = [b.halfwidth(d)[0] for d in b.dirs[: min(len(b.dirs), 8)]]
        best = max(best, max(widths) / rho, math.sqrt(b.depth) / rho)
    return best


def slice_constants(field: FundamentalSolutionField, m: int, cut_lambda: float, r: float = 1.0,
                    delta1: Optional[float] = None) -> SliceConstants:
    """kappa1, theta1 with D_r(z0) inside K_{r'}^(m)(z0), r' = r / (5 delta1)."""
    d1 = delta1 if delta1 is not None else fit_delta1(field, m, [r])
    rp = r / (5 * d1)
    ball = ParabolicBall(field, rp, m, _geom())
    sc = cut_depth(rp, field.N, m, cut_lambda)
    if sc >= ball.depth:
        raise HarnackConfigError("K_r^(m) has no interior: D_r cannot fit (raise cut_lambda)")
    # widest admissible slice of K: the ball's widest slice or the cut, whichever is lower
    s_star = max(sc, ball.depth / math.e)
    c = ball.F.ridge(np.array([s_star]))
    R = ball.boundary_radius(np.array([s_star]), c)[0]
    inscribed = float(R.min())
    shift = float(np.linalg.norm(c[0] - field.x0))
    theta1 = max(inscribed - shift, 0.0) / r
    kappa1 = s_star / r ** 2
    return SliceConstants(kappa1, theta1, d1, rp)


def chain_constants(field: FundamentalSolutionField, factory: Callable, m: int, cut_lambda: float,
                    iota=0.25, kappa=0.5, mu=0.75, theta=0.5, r1: float = 1.0) -> HarnackConstants:
    """Constants for the invariant inequality: C_D from the ball constant at r0 / (5 delta1), then C_H."""
    r0 = min(r1, 1 - theta, math.sqrt(1 - mu))
    sc = slice_constants(field, m, cut_lambda, r=r0)
    base = compute_constants(field, factory, m, [sc.r_ref], cut_lambda)
    C_D = base.C_K
    expo = max(1 / (sc.kappa1 * r0 ** 2), 4 * sc.kappa1 / (sc.theta1 ** 2 * (kappa - iota)))
    base.C_D = C_D
    base.log_C_H = expo * math.log(C_D)
    base.r0, base.r1 = r0, r1
    base.kappa1, base.theta1, base.delta1 = sc.kappa1, sc.theta1, sc.delta1
    return base


@dataclass
class InvariantHarnackReport:
    sup_lower: float
    inf_upper: float
    log_ratio: float
    log_C_H: float
    passed: bool
    chains: list


def invariant_harnack_check(u: Callable, z0, r: float, constants: HarnackConstants, n_pairs: int = 20,
                            seed: int = 0, iota=0.25, kappa=0.5, mu=0.75, theta=0.5, n_grid: int = 21
                            ) -> InvariantHarnackReport:
    """Grid sup over the lower cylinder against C_H times the grid inf over the upper one,
    plus chain-wise checks u(z-) <= C_D^m u(z+) on random endpoint pairs."""
    x0 = np.atleast_1d(np.asarray(z0[0], float))
    t0 = float(z0[1])
    lower = Cylinder(x0, t0, r, "lower", iota, kappa, mu, theta)
    upper = Cylinder(x0, t0, r, "upper", iota, kappa, mu, theta)
    xl, tl = lower.grid(n_grid, n_grid)
    xu, tu = upper.grid(n_grid, n_grid)
    sup_l = float(np.max(u(xl, tl)))
    inf_u = float(np.min(u(xu, tu)))
    if not inf_u > 0:
        raise ValueError("u must be positive on the upper cylinder")
    log_ratio = math.log(sup_l) - math.log(inf_u)
    rng = np.random.default_rng(seed)
    chains = []
    N = len(x0)
    for _ in range(n_pairs):
        zp = _sample_cyl(upper, rng)
        zm = _sample_cyl(lower, rng)
        ch = build_chain(zp, zm, constants.r0 * r, constants.kappa1, constants.theta1, kappa, iota)
        inv = ch.invariants()
        up = float(u(np.asarray(zp[0])[None, :], np.array([zp[1]]))[0])
        um = float(u(np.asarray(zm[0])[None, :], np.array([zm[1]]))[0])
        cyl_ok = _chain_in_unit_cylinder(ch, x0, t0, r)
        chains.append({"m": ch.m, "case": ch.case, "r": ch.r, "invariants": inv, "inside_Q": cyl_ok,
                       "log_ratio": math.log(um) - math.log(up), "log_bound": ch.m * math.log(constants.C_D),
                       "claimed_m_bound": ch.claimed_bound, "claimed_m_bound_holds": ch.claimed_bound_holds,
                       "chain": ch})
    passed = log_ratio <= constants.log_C_H and all(
        all(c["invariants"].values()) and c["inside_Q"] and c["log_ratio"] <= c["log_bound"] for c in chains)
    return InvariantHarnackReport(sup_l, inf_u, log_ratio, constants.log_C_H, passed, chains)


def _sample_cyl(c: Cylinder, rng):
    lo, hi = c.time_interval()
    R = c.spatial_radius()
    N = len(c.x0)
    while True:
        x = rng.uniform(-R, R, N)
        if np.linalg.norm(x) < R:
            break
    return c.x0 + x, float(rng.uniform(lo, hi))


def _chain_in_unit_cylinder(ch: HarnackChain, x0, t0, r) -> bool:
    """Every Q_rho(w_j) with the chain's step radius lies in Q_r(z0)."""
    d = np.linalg.norm(ch.points_x - x0, axis=-1)
    return bool(np.all(d + ch.r <= r * (1 + 1e-12)) and np.all(ch.points_t - ch.r ** 2 >= t0 - r ** 2 - 1e-12)
                and np.all(ch.points_t <= t0))


def write_chain_csv(ch: HarnackChain, path):
    N = ch.points_x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "t"] + [f"x{i + 1}" for i in range(N)])
        for j in range(ch.m + 1):
            w.writerow([j, f"{ch.points_t[j]:.12e}"] + [f"{v:.12e}" for v in ch.points_x[j]])
