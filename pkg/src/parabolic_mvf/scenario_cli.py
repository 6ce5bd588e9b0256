"""Scenario files, the solution catalogue, orchestration of all checks and the command line."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .fields import ExactGaussianField, FundamentalSolutionField
from .gaussian_core import GaussianSpec, check_reproduction, gaussian_dt, gaussian_gradient, gaussian_hessian, \
    gaussian_value
from .harnack_suite import chain_constants, compute_constants, exact_factory, harnack_ball_check, \
    invariant_harnack_check, write_chain_csv
from .level_set_geometry import GeometryConfig, ParabolicBall, check_inclusion_lemma, write_levelset_csv
from .mean_value import extended_mvf, surface_mvf, volume_mvf
from .operator_model import OperatorError, SolutionField, apply_operator, make_operator, sample_points, \
    verify_hypotheses
from .parametrix_series import SeriesConfig, SeriesField, check_global_bounds, series_rows, write_series_csv
from .propagation import DomainGrid, check_strong_max_principle, dumbbell_grid, mvf_propagation_step, \
    reachable_set, write_mask_csv
from .quadrature_engine import coarea_check

log = logging.getLogger("parabolic_mvf")

SELECTORS = ("hypotheses", "gamma", "geometry", "mvf", "extended_mvf", "harnack", "chain", "maxprinciple",
             "coarea")
SUBCOMMANDS = {
    "verify-hypotheses": ("hypotheses",),
    "build-gamma": ("gamma",),
    "plot-ball": ("geometry",),
    "verify-mvf": ("mvf",),
    "verify-extended-mvf": ("extended_mvf",),
    "verify-harnack": ("harnack",),
    "build-chain": ("chain",),
    "verify-maxprinciple": ("maxprinciple",),
    "coarea-check": ("coarea",),
    "all": SELECTORS,
}


class ConfigError(ValueError):
    pass


class UnsupportedDimensionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario models


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OperatorSpec(_Strict):
    family: Literal["heat", "scaled_heat", "diagonal", "trig_perturbed"] = "heat"
    N: int = Field(1, ge=1, le=3)
    params: dict = Field(default_factory=dict)
    lam: Optional[float] = Field(None, gt=0)
    Lam: Optional[float] = Field(None, gt=0)
    holder_M: Optional[float] = Field(None, gt=0)
    holder_alpha: Optional[float] = Field(None, gt=0, le=1)


class SolutionSpec(_Strict):
    kind: Literal["constant", "coordinate", "caloric_quadratic", "gaussian_translate", "product", "sum", "time",
                  "manufactured"] = "caloric_quadratic"
    value: float = 1.0
    index: int = Field(0, ge=0)
    zeta_x: Optional[list[float]] = None
    zeta_t: float = -10.0
    factors: list["SolutionSpec"] = Field(default_factory=list)
    expression: Literal["x1^3", "sin(x1)", "x1*t", "exp(x1)"] = "x1^3"


class PoleSpec(_Strict):
    x: Optional[list[float]] = None          # origin of the operator's dimension when omitted
    t: float = 0.0


class GridSpec(_Strict):
    n_time: int = Field(8, ge=2)
    n_upper: int = Field(16, ge=2)
    k_max: int = Field(48, ge=2)
    n_space: int = Field(12, ge=2)
    n_angle: int = Field(32, ge=4)
    n_polar: int = Field(12, ge=2)
    n_rho: int = Field(8, ge=2)
    series_K: int = Field(3, ge=0)
    inclusion_n: int = Field(81, ge=11)


class Tolerances(_Strict):
    mvf_rel: float = Field(1e-3, gt=0)
    reproduction: float = Field(1e-8, gt=0)
    coarea_rel: float = Field(1e-2, gt=0)
    max_principle: float = Field(1e-8, gt=0)
    deficit: float = Field(1e-10, gt=0)


class HarnackSpec(_Strict):
    r_list: list[float] = Field(default_factory=lambda: [0.3])
    cut_lambda: Optional[float] = Field(None, gt=0)
    chain_cut_lambda: Optional[float] = Field(None, gt=0)
    iota: float = 0.25
    kappa: float = 0.5
    mu: float = 0.75
    theta: float = 0.5
    n_pairs: int = Field(20, ge=1)
    solutions: list[SolutionSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _order(self):
        if not (0 < self.iota < self.kappa < self.mu < 1 and 0 < self.theta < 1):
            raise ValueError("need 0 < iota < kappa < mu < 1 and 0 < theta < 1")
        if any(r <= 0 for r in self.r_list):
            raise ValueError("harnack.r_list entries must be positive")
        return self


class PropagationSpec(_Strict):
    v_max: float = Field(1.0, gt=0)
    delta: float = Field(0.1, gt=0)
    n_x: int = Field(21, ge=3)
    n_t: int = Field(21, ge=3)
    neck_halfwidth: float = Field(0.1, gt=0)
    rho_list: list[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])


class CoareaSpec(_Strict):
    x_range: list[float] = Field(default_factory=lambda: [-1.0, 1.0])
    t_range: list[float] = Field(default_factory=lambda: [-1.0, -0.1])
    n_levels: int = Field(200, ge=10)
    n_grid: int = Field(801, ge=21)


class Scenario(_Strict):
    name: str = "scenario"
    operator: OperatorSpec = Field(default_factory=OperatorSpec)
    solution: SolutionSpec = Field(default_factory=SolutionSpec)
    pole: PoleSpec = Field(default_factory=PoleSpec)
    radii: list[float] = Field(default_factory=lambda: [0.5, 1.0])
    plot_radii: list[float] = Field(default_factory=lambda: [0.5, 0.75, 1.0])
    m: int = Field(3, ge=1)
    grid: GridSpec = Field(default_factory=GridSpec)
    tolerances: Tolerances = Field(default_factory=Tolerances)
    harnack: HarnackSpec = Field(default_factory=HarnackSpec)
    propagation: PropagationSpec = Field(default_factory=PropagationSpec)
    coarea: CoareaSpec = Field(default_factory=CoareaSpec)
    seed: int = Field(0, ge=0)
    output_dir: str = "out"

    @field_validator("radii", "plot_radii")
    @classmethod
    def _radii(cls, v, info):
        if not v:
            raise ValueError(f"{info.field_name} must not be empty")
        bad = [r for r in v if not r > 0]
        if bad:
            raise ValueError(f"{info.field_name} entries must be positive, got {bad}")
        uniq = sorted(set(v))
        if len(uniq) != len(v):
            warnings.warn(f"duplicate entries removed from {info.field_name}", stacklevel=2)
        return uniq

    @model_validator(mode="after")
    def _dims(self):
        if self.pole.x is None:
            self.pole.x = [0.0] * self.operator.N
        if len(self.pole.x) != self.operator.N:
            raise ValueError(f"pole.x has {len(self.pole.x)} entries but operator.N = {self.operator.N}")
        return self


def config_hash(s: Scenario) -> str:
    payload = json.dumps(s.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def load_scenario(path) -> Scenario:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"scenario file not found: {p}")
    text = p.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    return parse_scenario(data, str(p))


def parse_scenario(data: dict, origin: str = "<scenario>") -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        lines = [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
        raise ConfigError(f"{origin}: {len(lines)} validation error(s):\n  " + "\n  ".join(lines)) from e


# ---------------------------------------------------------------------------
# operators, fields and the solution catalogue


def build_operator(s: Scenario):
    o = s.operator
    return make_operator(o.family, o.N, o.params, lam=o.lam, Lam=o.Lam, holder_M=o.holder_M,
                         holder_alpha=o.holder_alpha)


def build_field(s: Scenario, op=None, x0=None, t0=None) -> FundamentalSolutionField:
    op = op or build_operator(s)
    x0 = s.pole.x if x0 is None else x0
    t0 = s.pole.t if t0 is None else t0
    if op.constant:
        return ExactGaussianField(op, x0, t0)
    return SeriesField(op, x0, t0, SeriesConfig(K=s.grid.series_K))


def geometry_config(s: Scenario) -> GeometryConfig:
    g = s.grid
    return GeometryConfig(n_time=g.n_time, n_upper=g.n_upper, k_max=g.k_max, n_space=g.n_space,
                          n_angle=g.n_angle, n_polar=g.n_polar)


def _zeros(x):
    return np.zeros(np.shape(x)[:-1])


def _unit(N, i, shape):
    e = np.zeros(shape + (N,))
    e[..., i] = 1.0
    return e


def build_solution(spec: SolutionSpec, op) -> SolutionField:
    """Catalogue entry with analytic derivatives."""
    N = op.N
    k = spec.kind
    if spec.index >= N and k in ("coordinate", "caloric_quadratic"):
        raise ConfigError(f"solution.index {spec.index} out of range for N = {N}")
    if k == "constant":
        v = spec.value
        return SolutionField(N, lambda x, t: np.full(np.shape(x)[:-1], v),
                             grad=lambda x, t: np.zeros(np.shape(x)), hess=lambda x, t: np.zeros(np.shape(x) + (N,)),
                             dt=lambda x, t: _zeros(x), name=f"constant {v}")
    if k == "coordinate":
        i = spec.index
        return SolutionField(N, lambda x, t: np.asarray(x)[..., i],
                             grad=lambda x, t: _unit(N, i, np.shape(x)[:-1]),
                             hess=lambda x, t: np.zeros(np.shape(x) + (N,)), dt=lambda x, t: _zeros(x),
                             name=f"x{i + 1}")
    if k == "caloric_quadratic":
        i = spec.index
        A0 = op.a(np.zeros(N), np.asarray(0.0))
        aii = float(A0[i, i])

        def hess(x, t):
            H = np.zeros(np.shape(x) + (N,))
            H[..., i, i] = 2.0
            return H
        return SolutionField(N, lambda x, t: np.asarray(x)[..., i] ** 2 + 2 * aii * np.asarray(t),
                             grad=lambda x, t: 2 * np.asarray(x)[..., i, None] * _unit(N, i, np.shape(x)[:-1]),
                             hess=hess, dt=lambda x, t: np.full(np.shape(x)[:-1], 2 * aii),
                             name=f"x{i + 1}^2 + {2 * aii:g} t")
    if k == "gaussian_translate":
        if not op.constant:
            raise ConfigError("Gaussian translates need constant coefficients")
        A0 = op.a(np.zeros(N), np.asarray(0.0))
        z0 = np.zeros(N)
        sp = GaussianSpec(A0, drift=op.b(z0, np.asarray(0.0)), rate=float(op.c(z0, np.asarray(0.0))))
        xi = np.asarray(spec.zeta_x if spec.zeta_x is not None else np.zeros(N), float)
        tau = spec.zeta_t
        sc = spec.value
        return SolutionField(N, lambda x, t: sc * gaussian_value(sp, x, t, xi, tau),
                             grad=lambda x, t: sc * gaussian_gradient(sp, x, t, xi, tau),
                             hess=lambda x, t: sc * gaussian_hessian(sp, x, t, xi, tau),
                             dt=lambda x, t: sc * gaussian_dt(sp, x, t, xi, tau),
                             name=f"Gaussian from ({list(xi)}, {tau})")
    if k in ("product", "sum"):
        if not spec.factors:
            raise ConfigError(f"{k} needs at least one factor")
        parts = [build_solution(f, op) for f in spec.factors]
        return _combine(parts, k, N)
    if k == "time":
        return SolutionField(N, lambda x, t: np.broadcast_to(np.asarray(t, float), np.shape(x)[:-1]).copy(),
                             grad=lambda x, t: np.zeros(np.shape(x)), hess=lambda x, t: np.zeros(np.shape(x) + (N,)),
                             dt=lambda x, t: np.ones(np.shape(x)[:-1]), name="t")
    return _manufactured(spec.expression, N)


def _combine(parts, kind, N):
    def value(x, t):
        vals = [p.value(x, t) for p in parts]
        return np.prod(vals, axis=0) if kind == "product" else np.sum(vals, axis=0)

    def grad(x, t):
        if kind == "sum":
            return sum(p.gradient(x, t) for p in parts)
        out = None
        v = None
        for p in parts:
            pv, pg = p.value(x, t), p.gradient(x, t)
            if out is None:
                v, out = pv, pg
            else:
                out = v[..., None] * pg + pv[..., None] * out
                v = v * pv
        return out

    def hess(x, t):
        if kind == "sum":
            return sum(p.hessian(x, t) for p in parts)
        v = g = H = None
        for p in parts:
            pv, pg, pH = p.value(x, t), p.gradient(x, t), p.hessian(x, t)
            if v is None:
                v, g, H = pv, pg, pH
            else:
                H = (v[..., None, None] * pH + pv[..., None, None] * H
                     + g[..., :, None] * pg[..., None, :] + pg[..., :, None] * g[..., None, :])
                g = v[..., None] * pg + pv[..., None] * g
                v = v * pv
        return H

    def dt(x, t):
        if kind == "sum":
            return sum(p.time_derivative(x, t) for p in parts)
        v = d = None
        for p in parts:
            pv, pd = p.value(x, t), p.time_derivative(x, t)
            if v is None:
                v, d = pv, pd
            else:
                d = v * pd + pv * d
                v = v * pv
        return d

    name = (" * " if kind == "product" else " + ").join(p.name for p in parts)
    return SolutionField(N, value, grad=grad, hess=hess, dt=dt, name=name)


def _manufactured(expr: str, N: int) -> SolutionField:
    def e1(shape):
        return _unit(N, 0, shape)

    def h11(x, vals):
        H = np.zeros(np.shape(x) + (N,))
        H[..., 0, 0] = vals
        return H

    x1 = lambda x: np.asarray(x)[..., 0]
    table = {
        "x1^3": (lambda x, t: x1(x) ** 3, lambda x, t: 3 * x1(x)[..., None] ** 2 * e1(np.shape(x)[:-1]),
                 lambda x, t: h11(x, 6 * x1(x)), lambda x, t: _zeros(x)),
        "sin(x1)": (lambda x, t: np.sin(x1(x)), lambda x, t: np.cos(x1(x))[..., None] * e1(np.shape(x)[:-1]),
                    lambda x, t: h11(x, -np.sin(x1(x))), lambda x, t: _zeros(x)),
        "x1*t": (lambda x, t: x1(x) * t, lambda x, t: (x1(x) * 0 + t)[..., None] * e1(np.shape(x)[:-1]),
                 lambda x, t: h11(x, 0 * x1(x)), lambda x, t: x1(x) + 0 * t),
        "exp(x1)": (lambda x, t: np.exp(x1(x)), lambda x, t: np.exp(x1(x))[..., None] * e1(np.shape(x)[:-1]),
                    lambda x, t: h11(x, np.exp(x1(x))), lambda x, t: _zeros(x)),
    }
    v, g, h, d = table[expr]
    return SolutionField(N, v, grad=g, hess=h, dt=d, name=expr)


def source_term(op, u: SolutionField) -> Callable:
    """f := L u, evaluated with the solution's analytic derivatives."""
    return lambda x, t: apply_operator(op, u, x, t)


# ---------------------------------------------------------------------------
# plotting


def emit_levelset_plot(field: FundamentalSolutionField, r_list, path_svg, path_csv=None, n: int = 200,
                       cfg: Optional[GeometryConfig] = None):
    """SVG of the nested level curves {Gamma = r^-N} for each r, plus a CSV of the polylines."""
    if field.N != 1:
        raise UnsupportedDimensionError("level-set plots are only available for N = 1")
    if not r_list:
        raise ConfigError("r list must not be empty")
    curves = []
    for r in sorted(r_list):
        b = ParabolicBall(field, r, 0, cfg)
        ts, xs = b.outline(n)
        curves.append((r, ts, xs))
    if path_csv is not None:
        with open(path_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "t", "x"])
            for r, ts, xs in curves:
                for t, x in zip(ts, xs):
                    w.writerow([f"{r:.12e}", f"{t:.12e}", f"{x:.12e}"])
    all_t = np.concatenate([c[1] for c in curves])
    all_x = np.concatenate([c[2] for c in curves])
    W, H, pad = 480.0, 480.0, 40.0
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    t_lo, t_hi = float(all_t.min()), float(all_t.max())
    sx = (W - 2 * pad) / max(x_hi - x_lo, 1e-300)
    st = (H - 2 * pad) / max(t_hi - t_lo, 1e-300)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" '
           f'viewBox="0 0 {W:.0f} {H:.0f}">',
           f'<rect width="{W:.0f}" height="{H:.0f}" fill="white"/>']
    for i, (r, ts, xs) in enumerate(curves):
        pts = " ".join(f"{pad + (x - x_lo) * sx:.3f},{pad + (t_hi - t) * st:.3f}" for t, x in zip(ts, xs))
        out.append(f'<polyline fill="none" stroke="{colors[i % len(colors)]}" stroke-width="1.5" points="{pts}">'
                   f'<title>r = {r:g}</title></polyline>')
    px = pad + (field.x0[0] - x_lo) * sx
    pt = pad + (t_hi - field.t0) * st
    out.append(f'<circle cx="{px:.3f}" cy="{pt:.3f}" r="3" fill="black"/>')
    out.append(f'<text x="{pad:.0f}" y="{H - 10:.0f}" font-size="12">x horizontal, t vertical; '
               f'r = {", ".join(f"{c[0]:g}" for c in curves)}</text>')
    out.append("</svg>")
    Path(path_svg).write_text("\n".join(out) + "\n")
    return curves


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class CheckResult:
    name: str
    status: str                 # pass | fail | report-only | skipped | error
    payload: dict = field(default_factory=dict)
    message: str = ""


@dataclass
class RunReport:
    scenario: str
    config_hash: str
    seed: int
    checks: list
    wall_clock: float
    grid: dict

    @property
    def failed(self) -> bool:
        return any(c.status in ("fail", "error") for c in self.checks)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "provenance": {"config_hash": self.config_hash, "seed": self.seed,
                                                          "grid": self.grid},
                "wall_clock_seconds": self.wall_clock,
                "checks": [{"name": c.name, "status": c.status, "message": c.message, "payload": c.payload}
                           for c in self.checks]}


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def parse_selector(sel: str) -> tuple:
    items = [p.strip() for p in sel.split(",") if p.strip()]
    if not items:
        raise ConfigError(f"empty check selector; valid selectors: {', '.join(SELECTORS + ('all',))}")
    out = []
    for it in items:
        if it == "all":
            out.extend(SELECTORS)
        elif it in SELECTORS:
            out.append(it)
        else:
            raise ConfigError(f"unknown check selector {it!r}; valid selectors: {', '.join(SELECTORS + ('all',))}")
    # dependency order, each once
    return tuple(s for s in SELECTORS if s in out)


class _Runner:
    def __init__(self, s: Scenario, out: Path):
        self.s = s
        self.out = out
        self.op = build_operator(s)
        self._field = None
        self.cfg = geometry_config(s)

    @property
    def field(self):
        if self._field is None:
            self._field = build_field(self.s, self.op)
        return self._field

    def solution(self):
        return build_solution(self.s.solution, self.op)

    # -- individual checks --------------------------------------------------
    def hypotheses(self):
        x, t = sample_points(self.op.N, 200, 2.0, (-1.0, 1.0), seed=self.s.seed)
        rep = verify_hypotheses(self.op, x, t)
        return CheckResult("hypotheses", "pass" if rep.passed else "fail", rep.as_dict(),
                           "; ".join(rep.violations))

    def gamma(self):
        f = self.field
        payload = {"kind": f.kind}
        status = "pass"
        if f.kind == "exact":
            x0, t0 = f.x0, f.t0
            res = []
            for (s_mid, tau) in ((t0 - 0.5, t0 - 1.0), (t0 - 0.1, t0 - 1.0), (t0 - 0.9, t0 - 1.0)):
                rep = check_reproduction(f.spec, (x0, t0), (x0, s_mid), (x0 + 0.3, tau))
                res.append(rep.residual)
            payload["reproduction_residuals"] = res
            if max(res) >= self.s.tolerances.reproduction:
                status = "fail"
        depths = [0.05, 0.2, 0.5, 1.0] if self.op.N <= 2 else []
        if depths:
            gb = check_global_bounds(f, depths)
            Lam = self.op.Lam
            mass_ok = all(math.exp(-Lam * d) - 1e-9 <= m <= math.exp(Lam * d) + 1e-9
                          for d, m in zip(depths, gb.masses))
            payload.update({"masses": gb.masses, "C_minus": gb.C_minus, "C_plus": gb.C_plus,
                            "mass_bounds_ok": mass_ok})
            if not mass_ok:
                status = "fail"
        if f.kind == "series":
            rows = series_rows(f, [0.1, 0.5, 1.0], f.K)
            write_series_csv(rows, self.out / "series.csv")
            payload["C_tilde"] = f.C_tilde
        return CheckResult("gamma", status, payload)

    def geometry(self):
        f = self.field
        payload = {}
        ball = ParabolicBall(f, self.s.radii[0], 0, self.cfg)
        write_levelset_csv(ball.surface_mesh(), self.out / "levelset.csv")
        payload["depth"] = ball.depth
        if f.N == 1:
            emit_levelset_plot(f, self.s.plot_radii, self.out / "levelsets.svg", self.out / "levelsets.csv",
                               cfg=self.cfg)
            payload["plot"] = "levelsets.svg"
        if f.N <= 2:
            inc = check_inclusion_lemma(f, self.s.radii, self.s.grid.inclusion_n, self.s.grid.inclusion_n)
            payload.update({"inclusion_inner": inc.inner_ok, "inclusion_outer": inc.outer_ok, "r_hat": inc.r_hat})
        return CheckResult("geometry", "report-only", payload)

    def _mvf_rows(self, which):
        u = self.solution()
        f = source_term(self.op, u)
        rows, ok = [], True
        for r in self.s.radii:
            if which == "extended":
                reps = [extended_mvf(u, f, self.field, r, self.s.m, self.cfg, n_rho=self.s.grid.n_rho)]
            else:
                reps = [surface_mvf(u, f, self.field, r, self.cfg),
                        volume_mvf(u, f, self.field, r, self.cfg, n_rho=self.s.grid.n_rho)]
            for rep in reps:
                good = abs(rep.residual) <= self.s.tolerances.mvf_rel * max(1.0, abs(rep.u0))
                ok &= good
                rows.append({"formula": rep.formula, "r": r, "u0": rep.u0, "residual": rep.residual,
                             "terms": rep.terms, "within_tolerance": good})
        name = "extended_mvf" if which == "extended" else "mvf"
        path = self.out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["formula", "r", "u0", "residual"])
            for row in rows:
                w.writerow([row["formula"], f"{row['r']:.12e}", f"{row['u0']:.12e}", f"{row['residual']:.12e}"])
        return CheckResult(name, "pass" if ok else "fail", {"solution": u.name, "rows": rows})

    def mvf(self):
        return self._mvf_rows("plain")

    def extended_mvf(self):
        return self._mvf_rows("extended")

    def _harnack_solutions(self):
        specs = self.s.harnack.solutions or [SolutionSpec(kind="constant", value=1.0),
                                             SolutionSpec(kind="gaussian_translate", zeta_t=self.s.pole.t - 10.0)]
        return [build_solution(sp, self.op) for sp in specs]

    def _factory(self):
        if self.op.constant:
            return exact_factory(self.op)
        raise ConfigError("Harnack constants need constant coefficients")

    def _wide_cut(self) -> float:
        return 4 ** (1 / self.op.N) * self.op.Lam

    def _harnack_skip(self, name):
        if self.op.constant:
            return None
        return CheckResult(name, "skipped",
                           message="Harnack constants are computed for constant-coefficient operators only")

    def harnack(self):
        skip = self._harnack_skip("harnack")
        if skip:
            return skip
        h = self.s.harnack
        # the cut at the lower ellipticity bound leaves at most the bottom point of the ball
        lam_c = h.cut_lambda or self._wide_cut()
        c = compute_constants(self.field, self._factory(), self.s.m, h.r_list, lam_c, max_poles=5)
        checks, ok = [], c.identity_defect() == 0.0
        for u in self._harnack_solutions():
            for r in h.r_list:
                rep = harnack_ball_check(u, self.field, r, self.s.m, c)
                ok &= rep.passed
                checks.append({"solution": u.name, "r": r, "ratio": rep.ratio, "passed": rep.passed})
        const = {"M_plus": c.M_plus, "m_minus": c.m_minus, "theta": c.theta, "C_K": c.C_K,
                 "cut_lambda": c.cut_lambda, "claim_iv_min_ratio": c.claim_iv_min_ratio}
        (self.out / "harnack.json").write_text(json.dumps(_jsonable({"constants": const, "checks": checks}),
                                                          indent=2, sort_keys=True) + "\n")
        return CheckResult("harnack", "pass" if ok else "fail", {"constants": const, "checks": checks})

    def chain(self):
        skip = self._harnack_skip("chain")
        if skip:
            return skip
        h = self.s.harnack
        lam_c = h.chain_cut_lambda or self._wide_cut()
        c = chain_constants(self.field, self._factory(), self.s.m, lam_c, h.iota, h.kappa, h.mu, h.theta)
        ok = True
        results = []
        for i, u in enumerate(self._harnack_solutions()):
            rep = invariant_harnack_check(u, (self.field.x0, self.field.t0), 1.0, c, h.n_pairs, self.s.seed,
                                          h.iota, h.kappa, h.mu, h.theta)
            ok &= rep.passed
            if i == 0 and rep.chains:
                write_chain_csv(rep.chains[0]["chain"], self.out / "chain.csv")
            results.append({"solution": u.name, "log_ratio": rep.log_ratio, "passed": rep.passed,
                            "chain_m": [ch["m"] for ch in rep.chains],
                            "claimed_m_bounds_hold": [ch["claimed_m_bound_holds"] for ch in rep.chains]})
        const = {"C_D": c.C_D, "log_C_H": c.log_C_H, "C_H": c.C_H, "r0": c.r0, "kappa1": c.kappa1,
                 "theta1": c.theta1, "delta1": c.delta1, "cut_lambda": lam_c}
        return CheckResult("chain", "pass" if ok else "fail", {"constants": const, "results": results})

    def maxprinciple(self):
        p = self.s.propagation
        if self.op.N != 1:
            return CheckResult("maxprinciple", "skipped", message="grid propagation is set up for N = 1")
        g = dumbbell_grid(p.n_x, p.n_t, p.neck_halfwidth)
        z0 = ([float(g.axes[0][int(0.9 * (p.n_x - 1))])], float(g.ts[-1]))
        region = reachable_set(g, z0, p.v_max, p.delta)
        write_mask_csv(region, self.out / "reachable.csv")
        u = self.solution()
        smp = check_strong_max_principle(u, source_term(self.op, u), self.op, region,
                                         self.s.tolerances.max_principle)
        const = build_solution(SolutionSpec(kind="constant", value=1.0), self.op)
        deficits, ok = [], True
        for rho in p.rho_list:
            rep = mvf_propagation_step(const, self.op, self.field, rho, f=lambda x, t: np.ones(np.shape(t)),
                                       cfg=self.cfg)
            good = abs(rep.deficit) < self.s.tolerances.deficit and rep.f_term <= 0
            ok &= good
            deficits.append({"rho": rho, "deficit": rep.deficit, "f_term": rep.f_term})
        payload = {"reachable_points": int(region.mask.sum()), "max_principle": _jsonable(smp.to_dict()),
                   "constant_deficits": deficits}
        return CheckResult("maxprinciple", "pass" if ok else "fail", payload)

    def coarea(self):
        f = self.field
        if f.N != 1:
            return CheckResult("coarea", "skipped", message="space-time box coarea check is set up for N = 1")
        c = self.s.coarea
        G, gradG = spacetime_field_functions(f)
        rep = coarea_check(G, gradG, lambda p: np.ones(p.shape[:-1]), [c.x_range[0], c.t_range[0]],
                           [c.x_range[1], c.t_range[1]], c.n_levels, c.n_grid)
        ok = rep.rel_diff <= self.s.tolerances.coarea_rel
        return CheckResult("coarea", "pass" if ok else "fail",
                           {"lhs": rep.lhs, "rhs": rep.rhs, "rel_diff": rep.rel_diff})


def spacetime_field_functions(field: FundamentalSolutionField):
    """G(p) and its full gradient for points p = (x, t) stacked in the last axis (N = 1)."""
    def G(p):
        return field.value(p[..., :1], p[..., 1])

    def gradG(p):
        x, t = p[..., :1], p[..., 1]
        return np.concatenate([field.grad_x(x, t), field.dt(x, t)[..., None]], axis=-1)
    return G, gradG


def run(s: Scenario, selector="all", out_dir=None) -> RunReport:
    names = parse_selector(selector) if isinstance(selector, str) else tuple(selector)
    out = Path(out_dir or s.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    results = []
    try:
        runner = _Runner(s, out)
    except (OperatorError, ValueError) as e:
        raise ConfigError(str(e)) from e
    for name in names:
        try:
            res = getattr(runner, name)()
        except Exception as e:           # captured into the report, not a crash
            log.exception("check %s failed", name)
            res = CheckResult(name, "error", message=f"{type(e).__name__}: {e}")
        res.payload = _jsonable(res.payload)
        results.append(res)
    rep = RunReport(s.name, config_hash(s), s.seed, results, time.perf_counter() - t_start,
                    s.grid.model_dump())
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "status"])
        for c in results:
            w.writerow([c.name, c.status])
    return rep


# ---------------------------------------------------------------------------
# command line


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parabolic-mvf",
                                description="Numerical checks of mean value formulas and Harnack inequalities "
                                            "for divergence-form parabolic operators.")
    p.add_argument("--scenario", help="JSON scenario file (defaults: heat equation, N = 1)")
    p.add_argument("--out", help="output directory (overrides the scenario's output_dir)")
    p.add_argument("--seed", type=int, help="random seed (overrides the scenario's seed)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for numerical kernels")
    p.add_argument("--check", help="comma-separated checks to run: " + ", ".join(SELECTORS + ("all",)))
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("command", choices=sorted(SUBCOMMANDS), help="what to run")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            s = load_scenario(args.scenario) if args.scenario else Scenario()
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        if args.seed is not None:
            s = s.model_copy(update={"seed": args.seed})
        selector = args.check if args.check else ",".join(SUBCOMMANDS[args.command])
        names = parse_selector(selector)
        _set_threads(args.threads)
        rep = run(s, names, args.out)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    for c in rep.checks:
        line = f"{c.name:14s} {c.status}"
        if c.message:
            line += f"  ({c.message})"
        print(line)
    print(f"config hash {rep.config_hash}  wall clock {rep.wall_clock:.1f} s")
    return 1 if rep.failed else 0


def _set_threads(n: int):
    """Cap BLAS worker threads when threadpoolctl is available."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


if __name__ == "__main__":
    sys.exit(main())
