"""Fundamental-solution fields z -> Gamma(z0; z) with a fixed upper pole z0.

Every field exposes value, spatial gradient and time derivative in the lower
point z = (x, t) with t < t0, the spatial argmax of each time slice (``ridge``)
and a certified radius outside which the field is below a given level.
"""
from __future__ import annotations

import math

import numpy as np

from .gaussian_core import GaussianSpec, gaussian_dt, gaussian_gradient, gaussian_hessian, gaussian_value
from .operator_model import ParabolicOperator, fd_hessian


class FundamentalSolutionField:
    kind = "abstract"

    def __init__(self, op: ParabolicOperator, x0, t0):
        self.op = op
        self.N = op.N
        self.x0 = np.asarray(x0, dtype=float).reshape(op.N)
        self.t0 = float(t0)

    def value(self, x, t):
        raise NotImplementedError

    def grad_x(self, x, t):
        raise NotImplementedError

    def dt(self, x, t):
        raise NotImplementedError

    def hess_x(self, x, t):
        return fd_hessian(self.value, x, t, self.N)

    def ridge(self, s):
        """Spatial argmax of the slice at depth s = t0 - t (shape (..., N))."""
        raise NotImplementedError

    def radius_bound(self, s, level):
        """Radius around the ridge outside which value < level at depth s."""
        raise NotImplementedError

    def tail_bound(self, s):
        """Certified bound on the truncation error of the field at depth s."""
        return np.zeros_like(np.asarray(s, dtype=float))

    def max_depth_bound(self, level) -> float:
        """A depth beyond which the slice maximum is below level."""
        raise NotImplementedError


class ExactGaussianField(FundamentalSolutionField):
    """Closed form for constant A, b and c."""

    kind = "exact"

    def __init__(self, op: ParabolicOperator, x0, t0):
        super().__init__(op, x0, t0)
        if not op.constant:
            raise ValueError("closed-form field needs constant coefficients")
        xa = self.x0
        ta = np.asarray(self.t0)
        self.spec = GaussianSpec(op.a(xa, ta), drift=op.b(xa, ta), rate=float(op.c(xa, ta)))
        self._lmax = float(np.linalg.eigvalsh(self.spec.A).max())

    def value(self, x, t):
        return gaussian_value(self.spec, self.x0, self.t0, x, t)

    def grad_x(self, x, t):
        return -gaussian_gradient(self.spec, self.x0, self.t0, x, t)

    def hess_x(self, x, t):
        return gaussian_hessian(self.spec, self.x0, self.t0, x, t)

    def dt(self, x, t):
        return -gaussian_dt(self.spec, self.x0, self.t0, x, t)

    def ridge(self, s):
        s = np.asarray(s, dtype=float)
        return self.x0 + self.spec.drift * s[..., None]

    def _slice_max_log(self, s):
        return self.spec.rate * s - 0.5 * self.N * np.log(4 * np.pi * s) - 0.5 * math.log(self.spec.detA)

    def radius_bound(self, s, level):
        s = np.asarray(s, dtype=float)
        q = 4 * s * (self._slice_max_log(s) - np.log(level))
        return np.sqrt(np.maximum(q, 0.0) * self._lmax) * (1 + 1e-9) + 1e-300

    def max_depth_bound(self, level) -> float:
        # slice max is (4 pi s)^(-N/2) det^(-1/2) e^(c s); grow s until below level
        s = 1e-6
        while self._slice_max_log(s) >= math.log(level) or s < 1e-3:
            s *= 2
            if s > 1e12:
                raise ValueError("level never reached")
        # slice max may still increase with s when c > 0; keep doubling until decreasing and below
        while True:
            s2 = 2 * s
            if self._slice_max_log(s2) < math.log(level) and self._slice_max_log(s2) <= self._slice_max_log(s):
                return s2
            s = s2
            if s > 1e12:
                raise ValueError("level never reached")


class LevelFunction:
    """F_m(x, t) = (4 pi s)^(-m/2) Gamma(z0; x, t) with s = t0 - t; m = 0 gives Gamma itself.

    Super-level sets {F_m > r^-(N+m)} are the parabolic balls of order m.
    """

    def __init__(self, field: FundamentalSolutionField, m: int = 0):
        self.field = field
        self.m = int(m)
        self.N = field.N
        self.x0 = field.x0
        self.t0 = field.t0

    def level(self, r: float) -> float:
        return float(r) ** (-(self.N + self.m))

    def _factor(self, t):
        s = self.t0 - np.asarray(t, dtype=float)
        if self.m == 0:
            return np.ones_like(s), s
        sp = np.where(s > 0, s, 1.0)
        return np.where(s > 0, (4 * np.pi * sp) ** (-self.m / 2), 0.0), sp

    def value(self, x, t):
        f, _ = self._factor(t)
        return f * self.field.value(x, t)

    def grad_x(self, x, t):
        f, _ = self._factor(t)
        return f[..., None] * self.field.grad_x(x, t)

    def dt(self, x, t):
        f, s = self._factor(t)
        g = self.field.value(x, t)
        return f * (self.field.dt(x, t) + self.m / (2 * s) * g)

    def grad_xt(self, x, t):
        """Full space-time gradient, time component first: shape (..., N+1)."""
        return np.concatenate([self.dt(x, t)[..., None], self.grad_x(x, t)], axis=-1)

    def ridge(self, s):
        return self.field.ridge(s)

    def radius_bound(self, s, level):
        s = np.asarray(s, dtype=float)
        lev = level * (4 * np.pi * s) ** (self.m / 2) if self.m else level
        return self.field.radius_bound(s, lev)

    def slice_max(self, s):
        s = np.asarray(s, dtype=float)
        c = self.ridge(s)
        return self.value(c, self.t0 - s)
