"""Divergence-form parabolic operators, solution fields and hypothesis checks.

Points are handled in vectorised form: spatial coordinates ``x`` have shape
``(..., N)`` and times ``t`` have shape ``(...)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import math

import numpy as np

FAMILIES = ("heat", "scaled_heat", "diagonal", "trig_perturbed")


class OperatorError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceTimePoint:
    x: tuple
    t: float

    def __post_init__(self):
        if len(self.x) < 1:
            raise OperatorError("a point needs at least one spatial coordinate")
        if not (all(math.isfinite(v) for v in self.x) and math.isfinite(self.t)):
            raise OperatorError("point coordinates must be finite")

    @classmethod
    def of(cls, x, t) -> "SpaceTimePoint":
        return cls(tuple(float(v) for v in np.atleast_1d(x)), float(t))

    @property
    def N(self) -> int:
        return len(self.x)

    @property
    def xa(self) -> np.ndarray:
        return np.asarray(self.x, dtype=float)


def _as_xt(x, t):
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return x, t


@dataclass
class ParabolicOperator:
    """L u = div(A grad u) + <b, grad u> + c u - du/dt.

    ``a`` returns (..., N, N); ``da`` returns the array D[..., i, j] = d a_ij / d x_i;
    ``b`` returns (..., N); ``div_b`` and ``c`` return (...).
    """

    N: int
    a: Callable
    da: Callable
    b: Callable
    div_b: Callable
    c: Callable
    lam: float
    Lam: float
    holder_M: float
    holder_alpha: float
    family: str = "custom"
    params: dict = field(default_factory=dict)
    # constant A, constant b and constant c: closed-form fundamental solution exists
    constant: bool = False

    def divergence_vector(self, x, t) -> np.ndarray:
        """sum_i d a_ij / d x_i for each j."""
        return self.da(x, t).sum(axis=-2)

    @property
    def lam_plus(self) -> float:
        return float(self.params.get("lam_plus", self.Lam + 0.5 * self.Lam))


def _const_b(b0, B):
    b0 = np.asarray(b0, dtype=float)
    B = np.asarray(B, dtype=float)

    def b(x, t):
        x = np.asarray(x, dtype=float)
        return b0 + np.einsum("ij,...j->...i", B, x)

    def div_b(x, t):
        t = np.asarray(t, dtype=float)
        return np.full(np.shape(np.asarray(x))[:-1], float(np.trace(B)))

    return b, div_b


_FAMILY_PARAMS = {"scaled_heat": {"scale"}, "diagonal": {"diag"}, "trig_perturbed": {"epsilon"}}


def make_operator(family: str, N: int, params: Optional[dict] = None, *, lam=None, Lam=None,
                  holder_M=None, holder_alpha=None) -> ParabolicOperator:
    """Build an operator from the catalogue.

    Every family accepts ``drift`` (constant vector), ``drift_matrix`` (b = drift + B x)
    and ``potential`` (constant c).
    """
    params = dict(params or {})
    if family not in FAMILIES:
        raise OperatorError(f"unknown operator family {family!r}; expected one of {FAMILIES}")
    if N < 1:
        raise OperatorError("N must be >= 1")
    known = {"drift", "drift_matrix", "potential", "lam_plus"} | _FAMILY_PARAMS.get(family, set())
    unknown = sorted(set(params) - known)
    if unknown:
        raise OperatorError(f"unknown parameter(s) {unknown} for family {family!r}; allowed: {sorted(known)}")
    b0 = np.asarray(params.get("drift", np.zeros(N)), dtype=float).reshape(N)
    B = np.asarray(params.get("drift_matrix", np.zeros((N, N))), dtype=float).reshape(N, N)
    c0 = float(params.get("potential", 0.0))
    b, div_b = _const_b(b0, B)
    const_b = not np.any(B)

    def c(x, t):
        return np.full(np.shape(np.asarray(x))[:-1], c0)

    if family in ("heat", "scaled_heat", "diagonal"):
        if family == "heat":
            diag = np.ones(N)
        elif family == "scaled_heat":
            diag = np.full(N, float(params.get("scale", 1.0)))
        else:
            diag = np.asarray(params.get("diag", np.ones(N)), dtype=float).reshape(N)
        if np.any(diag <= 0):
            raise OperatorError("diffusion entries must be positive")
        A0 = np.diag(diag)

        def a(x, t):
            shape = np.shape(np.asarray(x))[:-1]
            return np.broadcast_to(A0, shape + (N, N)).copy()

        def da(x, t):
            shape = np.shape(np.asarray(x))[:-1]
            return np.zeros(shape + (N, N))

        lo, hi = float(diag.min()), float(diag.max())
        alpha = 1.0
        hm = 1.0
        constant = const_b
    else:
        eps = float(params.get("epsilon", 0.1))
        if not 0 <= eps < 1:
            raise OperatorError("trig_perturbed needs 0 <= epsilon < 1")
        I = np.eye(N)

        def a(x, t):
            x = np.asarray(x, dtype=float)
            f = 1.0 + eps * np.sin(x[..., 0])
            return f[..., None, None] * I

        def da(x, t):
            x = np.asarray(x, dtype=float)
            out = np.zeros(x.shape[:-1] + (N, N))
            # only d a_11 / d x_1 is non-zero
            out[..., 0, 0] = eps * np.cos(x[..., 0])
            return out

        lo, hi = 1.0 - eps, 1.0 + eps
        alpha = 1.0
        hm = max(eps, 1e-12)
        constant = False

    bound = max(hi, np.abs(b0).max(initial=0.0) + np.abs(B).sum(axis=1).max(initial=0.0),
                abs(c0), abs(float(np.trace(B))), float(params.get("epsilon", 0.0)))
    lam_v = float(lam if lam is not None else lo)
    Lam_v = float(Lam if Lam is not None else bound)
    params.setdefault("lam_plus", 1.5 * Lam_v)
    return ParabolicOperator(
        N=N, a=a, da=da, b=b, div_b=div_b, c=c, lam=lam_v, Lam=Lam_v,
        holder_M=float(holder_M if holder_M is not None else hm),
        holder_alpha=float(holder_alpha if holder_alpha is not None else alpha),
        family=family, params=params, constant=constant,
    )


def time_reversed_adjoint(op: ParabolicOperator) -> ParabolicOperator:
    """Operator whose forward fundamental solution in (x, -t) is the adjoint one of ``op``.

    If v solves the adjoint equation of ``op`` then w(x, s) = v(x, -s) solves
    div(A~ grad w) + <b~, grad w> + c~ w - dw/ds = 0 with A~(x,s) = A(x,-s),
    b~ = -b(x,-s) and c~ = (c - div b)(x,-s).
    """

    def a(x, s):
        return op.a(x, -np.asarray(s, dtype=float))

    def da(x, s):
        return op.da(x, -np.asarray(s, dtype=float))

    def b(x, s):
        return -op.b(x, -np.asarray(s, dtype=float))

    def div_b(x, s):
        return -op.div_b(x, -np.asarray(s, dtype=float))

    def c(x, s):
        s = -np.asarray(s, dtype=float)
        return op.c(x, s) - op.div_b(x, s)

    return ParabolicOperator(N=op.N, a=a, da=da, b=b, div_b=div_b, c=c, lam=op.lam, Lam=op.Lam,
                             holder_M=op.holder_M, holder_alpha=op.holder_alpha,
                             family=op.family + "_reversed_adjoint", params=dict(op.params),
                             constant=op.constant)


# ---------------------------------------------------------------------------
# solution fields


@dataclass
class SolutionField:
    """A function u(x, t) with optional analytic derivatives.

    Missing derivatives are replaced by central finite differences.
    """

    N: int
    value: Callable
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None
    dt: Optional[Callable] = None
    name: str = "u"
    fd_step: float = 1e-3

    def __call__(self, x, t):
        return self.value(x, t)

    def gradient(self, x, t) -> np.ndarray:
        if self.grad is not None:
            return np.asarray(self.grad(x, t), dtype=float)
        return fd_gradient(self.value, x, t, self.N, self.fd_step)

    def hessian(self, x, t) -> np.ndarray:
        if self.hess is not None:
            return np.asarray(self.hess(x, t), dtype=float)
        return fd_hessian(self.value, x, t, self.N, self.fd_step)

    def time_derivative(self, x, t) -> np.ndarray:
        if self.dt is not None:
            return np.asarray(self.dt(x, t), dtype=float)
        return fd_time(self.value, x, t, self.fd_step)


def _steps(x, h):
    return h * (1.0 + np.abs(x))


# fourth-order central stencils
_D1 = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))
_D2 = ((-2, -1.0), (-1, 16.0), (0, -30.0), (1, 16.0), (2, -1.0))


def fd_gradient(f, x, t, N, h=1e-3):
    x, t = _as_xt(x, t)
    out = np.empty(np.broadcast_shapes(x.shape, t.shape + (N,)))
    for j in range(N):
        hj = _steps(x[..., j], h)
        e = np.zeros(N)
        e[j] = 1.0
        acc = 0.0
        for k, c in _D1:
            acc = acc + c * f(x + (k * hj)[..., None] * e, t)
        out[..., j] = acc / (12 * hj)
    return out


def fd_hessian(f, x, t, N, h=1e-3):
    x, t = _as_xt(x, t)
    base = np.broadcast_shapes(x.shape[:-1], t.shape)
    out = np.empty(base + (N, N))
    for i in range(N):
        ei = np.zeros(N)
        ei[i] = 1.0
        hi = _steps(x[..., i], h)
        acc = 0.0
        for k, c in _D2:
            acc = acc + c * f(x + (k * hi)[..., None] * ei, t)
        out[..., i, i] = acc / (12 * hi ** 2)
        for j in range(i + 1, N):
            ej = np.zeros(N)
            ej[j] = 1.0
            hj = _steps(x[..., j], h)
            acc = 0.0
            for k, c in _D1:
                for l, d in _D1:
                    acc = acc + c * d * f(x + (k * hi)[..., None] * ei + (l * hj)[..., None] * ej, t)
            v = acc / (144 * hi * hj)
            out[..., i, j] = v
            out[..., j, i] = v
    return out


def fd_time(f, x, t, h=1e-3):
    x, t = _as_xt(x, t)
    ht = _steps(t, h)
    acc = 0.0
    for k, c in _D1:
        acc = acc + c * f(x, t + k * ht)
    return acc / (12 * ht)


def apply_operator(op: ParabolicOperator, u: SolutionField, x, t) -> np.ndarray:
    """Pointwise L u."""
    x, t = _as_xt(x, t)
    A = op.a(x, t)
    H = u.hessian(x, t)
    g = u.gradient(x, t)
    dv = op.divergence_vector(x, t)
    return (np.einsum("...ij,...ij->...", A, H) + np.einsum("...j,...j->...", dv, g)
            + np.einsum("...j,...j->...", op.b(x, t), g) + op.c(x, t) * u.value(x, t)
            - u.time_derivative(x, t))


def apply_adjoint(op: ParabolicOperator, v: SolutionField, x, t) -> np.ndarray:
    """Pointwise L* v = div(A grad v) - <b, grad v> + (c - div b) v + dv/dt."""
    x, t = _as_xt(x, t)
    A = op.a(x, t)
    H = v.hessian(x, t)
    g = v.gradient(x, t)
    dv = op.divergence_vector(x, t)
    return (np.einsum("...ij,...ij->...", A, H) + np.einsum("...j,...j->...", dv, g)
            - np.einsum("...j,...j->...", op.b(x, t), g)
            + (op.c(x, t) - op.div_b(x, t)) * v.value(x, t) + v.time_derivative(x, t))


# ---------------------------------------------------------------------------
# hypothesis verification


@dataclass
class HypothesisReport:
    passed: bool
    symmetry_defect: float
    ellipticity_min: float
    ellipticity_max: float
    bound_max: dict
    holder_quotients: dict
    violations: list

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "symmetry_defect": self.symmetry_defect,
            "ellipticity_min": self.ellipticity_min,
            "ellipticity_max": self.ellipticity_max,
            "bound_max": dict(self.bound_max),
            "holder_quotients": dict(self.holder_quotients),
            "violations": list(self.violations),
        }


def holder_quotient(values: np.ndarray, x: np.ndarray, t: np.ndarray, alpha: float) -> float:
    """sup over distinct sample pairs of |g(z)-g(w)| / (|x-y|^alpha + |t-s|^(alpha/2))."""
    n = len(t)
    vals = values.reshape(n, -1)
    best = 0.0
    for i in range(n - 1):
        dx = np.linalg.norm(x[i + 1:] - x[i], axis=-1)
        dtt = np.abs(t[i + 1:] - t[i])
        den = dx ** alpha + dtt ** (alpha / 2)
        num = np.abs(vals[i + 1:] - vals[i]).max(axis=-1)
        ok = den > 0
        if np.any(ok):
            best = max(best, float((num[ok] / den[ok]).max()))
    return best


def verify_hypotheses(op: ParabolicOperator, x, t, directions=None, tol: float = 1e-12) -> HypothesisReport:
    """Check symmetry, uniform ellipticity, the sup bounds and Holder continuity on samples.

    ``x`` has shape (n, N), ``t`` shape (n,). ``directions`` (m, N) are extra test
    vectors for the quadratic form; the spectrum is always checked exactly as well.
    """
    x, t = _as_xt(x, t)
    x = x.reshape(-1, op.N)
    t = t.reshape(-1)
    A = op.a(x, t)
    viol = []
    sym = float(np.abs(A - np.swapaxes(A, -1, -2)).max()) if len(t) else 0.0
    if sym > tol:
        viol.append(f"symmetry defect {sym:.3e}")
    eig = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))
    emin, emax = float(eig.min()), float(eig.max())
    if directions is not None:
        d = np.asarray(directions, dtype=float).reshape(-1, op.N)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        q = np.einsum("mi,nij,mj->nm", d, A, d)
        emin = min(emin, float(q.min()))
        emax = max(emax, float(q.max()))
    if emin < op.lam - tol:
        viol.append(f"ellipticity: min quotient {emin:.6g} < lambda {op.lam}")
    if emax > op.Lam + tol:
        viol.append(f"ellipticity: max quotient {emax:.6g} > Lambda {op.Lam}")
    bounds = {
        "da": float(np.abs(op.da(x, t)).max()),
        "b": float(np.abs(op.b(x, t)).max()),
        "c": float(np.abs(op.c(x, t)).max()),
        "div_b": float(np.abs(op.div_b(x, t)).max()),
    }
    for k, v in bounds.items():
        if v > op.Lam + tol:
            viol.append(f"|{k}| = {v:.6g} exceeds Lambda {op.Lam}")
    al = op.holder_alpha
    hq = {
        "a": holder_quotient(A, x, t, al),
        "da": holder_quotient(op.da(x, t), x, t, al),
        "b": holder_quotient(op.b(x, t), x, t, al),
        "c": holder_quotient(op.c(x, t), x, t, al),
    }
    for k, v in hq.items():
        if v > op.holder_M + tol:
            viol.append(f"Holder quotient of {k} = {v:.6g} exceeds M {op.holder_M}")
    return HypothesisReport(passed=not viol, symmetry_defect=sym, ellipticity_min=emin,
                            ellipticity_max=emax, bound_max=bounds, holder_quotients=hq,
                            violations=viol)


def sample_points(N: int, n: int, box: Sequence[float], t_range: Sequence[float], seed: int = 0):
    """Uniform samples in [-box, box]^N x t_range."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-box, box, size=(n, N)) if np.isscalar(box) else rng.uniform(box[0], box[1], size=(n, N))
    t = rng.uniform(t_range[0], t_range[1], size=n)
    return x, t
