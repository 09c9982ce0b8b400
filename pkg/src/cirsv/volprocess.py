"""Clustering volatility process: drift, stationary density and moment integrals.

The dispersion ``y`` follows ``dy = alpha(y) dt + v sqrt(y) dw``. For an
admissible drift the zero-flux stationary density is

    g(y) = C y^(a - 1) exp((2 / v^2) int_1^y alpha_hat),   a = 2 alpha(0) / v^2,

with ``alpha_hat(y) = (alpha(y) - alpha(0)) / y``. Everything here is
evaluated in the log domain on a graded cell mesh (geometric near zero,
uniform in the bulk) with composite Gauss-Legendre rules; the piece
``[0, y_min]`` uses the local power-law model through Gauss-Jacobi nodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np
from scipy import special

from ._quadrature import CellQuadrature, adaptive_edges
from .errors import (
    DensityDomainError,
    GridTooCoarseError,
    HypothesisAViolation,
    InvalidParametersError,
    NegativeVarianceError,
    QuadratureError,
)

__all__ = [
    "VolParams", "DriftSpec", "GridConfig", "DensityGrid", "MomentSet", "HKernel",
    "linear_drift", "clustering_drift", "check_hypothesis_a",
    "gamma_component_density", "stationary_density", "moments", "H_kernel",
    "fp_stationary_residual", "default_y_max",
]

# below this the H kernel switches to the power-law closed form
H_SERIES_BELOW = 1e-5
_FD_LIMIT_STEP = 1e-8


@dataclass(frozen=True)
class VolParams:
    """Parameters of the two-component clustering dispersion process.

    ``theta1``/``theta2`` are the component levels, ``k`` the weight of the
    first component and ``epsilon`` the ratio of the dispersion time scale to
    the short-rate time scale.
    """

    kappa_y: float = 100.0
    theta1: float = 0.025
    theta2: float = 0.1
    v: float = 1.1832
    k: float = 1.0 / 3.0
    epsilon: float = 0.01

    def __post_init__(self):
        if not self.kappa_y > 0:
            raise InvalidParametersError(f"kappa_y must be positive, got {self.kappa_y}")
        if not (self.theta1 > 0 and self.theta2 > 0):
            raise InvalidParametersError("theta1 and theta2 must be positive")
        if not self.v >= 0:
            raise InvalidParametersError(f"v must be nonnegative, got {self.v}")
        if not 0.0 <= self.k <= 1.0:
            raise InvalidParametersError(f"mixture weight k must lie in [0, 1], got {self.k}")
        if not self.epsilon >= 0:
            raise InvalidParametersError(f"epsilon must be nonnegative, got {self.epsilon}")

    def check_admissible(self):
        """Raise unless ``v > 0`` and ``2 kappa_y theta_i > v^2`` for both components."""
        if not self.v > 0:
            raise InvalidParametersError("v must be positive for a nondegenerate density")
        for i, th in ((1, self.theta1), (2, self.theta2)):
            if not 2.0 * self.kappa_y * th > self.v ** 2:
                raise InvalidParametersError(
                    f"Feller condition 2*kappa_y*theta{i} > v^2 violated "
                    f"({2.0 * self.kappa_y * th:g} <= {self.v ** 2:g})")
        return self

    @property
    def theta_max(self):
        return max(self.theta1, self.theta2)

    @property
    def theta_min(self):
        return min(self.theta1, self.theta2)

    @property
    def rate(self):
        """Common Gamma rate ``2 kappa_y / v^2`` of the two components."""
        return 2.0 * self.kappa_y / self.v ** 2

    def shape(self, i):
        theta = self.theta1 if i == 1 else self.theta2
        return 2.0 * self.kappa_y * theta / self.v ** 2

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class DriftSpec:
    """A drift ``alpha`` on ``[0, inf)`` together with ``alpha(0)`` and ``alpha_hat``.

    ``decay_rate`` is ``-lim alpha(y)/y`` when known; it sets the slope bound
    of the admissibility check and the fast-scale step control in simulation.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    alpha_at_zero: float
    alpha_hat: Callable[[np.ndarray], np.ndarray]
    decay_rate: Optional[float] = None
    name: str = "custom"

    def __call__(self, y):
        return self.evaluator(np.asarray(y, dtype=float))

    @classmethod
    def from_function(cls, alpha, decay_rate=None, name="custom"):
        """Wrap a plain drift; ``alpha_hat(0)`` comes from a one-sided difference."""
        a0 = float(alpha(np.array(0.0)))

        def alpha_hat(y):
            y = np.asarray(y, dtype=float)
            ys = np.maximum(y, _FD_LIMIT_STEP)
            return (alpha(ys) - a0) / ys

        return cls(alpha, a0, alpha_hat, decay_rate, name)

    def scaled(self, factor):
        """Drift ``factor * alpha``, e.g. ``1/epsilon`` for the fast clock."""
        ev, ah = self.evaluator, self.alpha_hat
        rate = None if self.decay_rate is None else factor * self.decay_rate
        return DriftSpec(lambda y: factor * ev(y), factor * self.alpha_at_zero,
                         lambda y: factor * ah(y), rate, f"{factor:g}*{self.name}")


def linear_drift(kappa_y, theta):
    """Single CIR drift ``kappa_y (theta - y)``."""
    kappa_y, theta = float(kappa_y), float(theta)
    return DriftSpec(
        lambda y: kappa_y * (theta - np.asarray(y, dtype=float)),
        kappa_y * theta,
        lambda y: np.full(np.shape(y), -kappa_y),
        kappa_y,
        f"linear(kappa_y={kappa_y:g}, theta={theta:g})",
    )


def _log_gamma_const(shape, rate):
    return shape * math.log(rate) - special.gammaln(shape)


def clustering_drift(params: VolParams, y_max=None) -> DriftSpec:
    """Drift whose stationary law is ``k g1 + (1 - k) g2``.

    The drift is the state-dependent blend ``w alpha_1 + (1 - w) alpha_2`` of
    the two linear CIR drifts with ``w = k g1 / (k g1 + (1 - k) g2)``. Since
    both Gamma components share the rate, ``w`` is a logistic function of
    ``log y`` and is evaluated without forming the densities.
    """
    p = params.check_admissible()
    kap, th1, th2, k = p.kappa_y, p.theta1, p.theta2, p.k
    if th1 == th2 or k in (0.0, 1.0):
        theta = th1 if (k == 1.0 or th1 == th2) else th2
        lin = linear_drift(kap, theta)
        drift = replace(lin, name="clustering(degenerate)")
        check_hypothesis_a(drift, p.v, y_max or default_y_max(p), 10.0 * p.theta_max, -0.5 * kap)
        return drift

    a1, a2, beta = p.shape(1), p.shape(2), p.rate
    c0 = (math.log(k) + _log_gamma_const(a1, beta)
          - math.log1p(-k) - _log_gamma_const(a2, beta))
    d = a1 - a2
    # w(0) = 1 when theta1 < theta2: the smaller level governs near zero
    low, high = (th1, th2) if th1 < th2 else (th2, th1)
    sign = -1.0 if th1 < th2 else 1.0

    def logit_w(y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            ly = np.log(np.maximum(y, 0.0))
        return c0 + d * ly

    def theta_bar(y):
        w = special.expit(logit_w(y))
        return th2 + w * (th1 - th2)

    def alpha(y):
        y = np.asarray(y, dtype=float)
        return kap * (theta_bar(y) - y)

    abs_d = abs(d)

    def alpha_hat(y):
        y = np.asarray(y, dtype=float)
        pos = y > 0
        ys = np.where(pos, y, 1.0)
        # (theta_bar - low) / y with the minority weight q in log form
        log_q = special.log_expit(sign * logit_w(ys))
        ratio = (high - low) * np.exp(log_q - np.log(ys))
        if abs_d > 1.0:
            at0 = 0.0
        elif abs_d == 1.0:
            at0 = (high - low) * math.exp(sign * c0)
        else:
            at0 = math.inf
        return kap * (np.where(pos, ratio, at0) - 1.0)

    drift = DriftSpec(alpha, kap * low, alpha_hat, kap,
                      f"clustering(kappa_y={kap:g}, theta1={th1:g}, theta2={th2:g}, k={k:g})")
    check_hypothesis_a(drift, p.v, y_max or default_y_max(p), 10.0 * p.theta_max, -0.5 * kap)
    return drift


def check_hypothesis_a(drift: DriftSpec, v, y_max, y_threshold, slope_bound=0.0, n_points=512):
    """Numerical check of ``2 alpha(0)/v^2 > 1`` and ``alpha(y)/y < slope_bound`` beyond ``y_threshold``."""
    if not 2.0 * drift.alpha_at_zero / v ** 2 > 1.0:
        raise HypothesisAViolation(
            f"2*alpha(0)/v^2 = {2.0 * drift.alpha_at_zero / v ** 2:g} must exceed 1", y=0.0)
    hi = max(y_max, y_threshold * 1.5)
    ys = np.linspace(y_threshold, hi, n_points)
    ratio = drift(ys) / ys
    bad = ~(ratio < slope_bound)
    if bad.any():
        y_bad = float(ys[np.argmax(bad)])
        raise HypothesisAViolation(
            f"alpha(y)/y = {ratio[np.argmax(bad)]:g} is not below {slope_bound:g} at y = {y_bad:g}",
            y=y_bad)


def default_y_max(params: VolParams):
    """Truncation point with Gamma-mixture tail mass far below 1e-12."""
    tm = params.theta_max
    return tm + 40.0 * math.sqrt(tm * params.v ** 2 / (2.0 * params.kappa_y))


@dataclass(frozen=True)
class GridConfig:
    """Mesh and tolerance settings for density tabulation."""

    y_min: float = 1e-6
    y_max: Optional[float] = None
    growth: float = 1.25
    cell_width: Optional[float] = None
    order: int = 12
    atol: float = 1e-12
    rtol: float = 1e-10

    def edges(self, params: VolParams):
        y_max = self.y_max or default_y_max(params)
        width = self.cell_width
        if width is None:
            s_min = math.sqrt(params.theta_min * params.v ** 2 / (2.0 * params.kappa_y))
            width = min(s_min, params.theta_min) / 8.0
        width = min(width, (y_max - self.y_min) / 8.0)
        geo = [self.y_min]
        while geo[-1] * (self.growth - 1.0) < width and geo[-1] < y_max:
            geo.append(geo[-1] * self.growth)
        n_uni = max(int(math.ceil((y_max - geo[-1]) / width)), 1)
        uni = np.linspace(geo[-1], y_max, n_uni + 1)
        return np.concatenate([geo[:-1], uni])


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Normalized stationary density tabulated on a graded mesh.

    ``y_nodes``/``g_values`` are the mesh edges and the density there; the
    object also keeps the quadrature structure used to build it so that
    integrals against ``g`` stay at quadrature accuracy. ``pdf`` evaluates
    the closed form when available and falls back to a cubic spline
    of ``log g`` in ``log y`` for grids restored from JSON.
    """

    y_nodes: np.ndarray
    g_values: np.ndarray
    norm_constant: float
    log_norm_constant: float
    tail_bound: float
    shape_at_zero: float
    log_slope_at_zero: float
    quad_tol: float = 1e-10
    label: str = ""
    _quad: Optional[CellQuadrature] = field(default=None, repr=False)
    _g_nodes: Optional[np.ndarray] = field(default=None, repr=False)
    _z_nodes: Optional[np.ndarray] = field(default=None, repr=False)
    _z_weights: Optional[np.ndarray] = field(default=None, repr=False)
    _log_pdf: Optional[Callable] = field(default=None, repr=False)

    @property
    def y_max(self):
        return float(self.y_nodes[-1])

    @property
    def y_min(self):
        return float(self.y_nodes[0])

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        out = np.full(y.shape, -np.inf)
        pos = y > 0
        if self._log_pdf is not None:
            out[pos] = self._log_pdf(y[pos])
            return out
        from scipy.interpolate import CubicSpline
        with np.errstate(divide="ignore"):
            lg = np.log(self.g_values)
        fin = np.isfinite(lg)
        interp = CubicSpline(np.log(self.y_nodes[fin]), lg[fin], extrapolate=True)
        out[pos] = interp(np.log(y[pos]))
        return out

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    __call__ = pdf

    def _require_quad(self):
        if self._quad is None:
            # restored grid: rebuild a rule on its own nodes
            quad = CellQuadrature(self.y_nodes, 8)
            gx = self.pdf(quad.nodes)
            a, b, y0 = self.shape_at_zero, self.log_slope_at_zero, self.y_min
            zn, zw = _zero_piece(a, b, y0, float(self.pdf(np.array([y0]))[0]))
            object.__setattr__(self, "_quad", quad)
            object.__setattr__(self, "_g_nodes", gx)
            object.__setattr__(self, "_z_nodes", zn)
            object.__setattr__(self, "_z_weights", zw)
        return self._quad

    def integrate(self, fn):
        """``int_0^{y_max} fn(y) g(y) dy``; ``fn`` must accept arrays."""
        quad = self._require_quad()
        bulk = quad.integral(np.asarray(fn(quad.nodes), dtype=float) * self._g_nodes)
        near = float(np.sum(self._z_weights * fn(self._z_nodes)))
        return bulk + near

    def mass(self):
        return self.integrate(np.ones_like)

    def cdf(self, y):
        quad = self._require_quad()
        y = np.asarray(y, dtype=float)
        left0 = float(np.sum(self._z_weights))
        at_edges, _ = quad.cumulative(self._g_nodes)
        total = left0 + at_edges[-1]
        out = left0 + quad.partial(self._g_nodes, at_edges, np.clip(y, quad.lo, quad.hi))
        below = y < quad.lo
        if below.any():
            a = self.shape_at_zero
            out = np.where(below, left0 * (np.maximum(y, 0.0) / quad.lo) ** a, out)
        return np.clip(out / total, 0.0, 1.0)

    def _cdf_table(self):
        quad = self._require_quad()
        left0 = float(np.sum(self._z_weights))
        at_edges, at_nodes = quad.cumulative(self._g_nodes)
        ys = np.concatenate([[0.0], quad.nodes.ravel(), [quad.hi]])
        cs = np.concatenate([[0.0], left0 + at_nodes.ravel(), [left0 + at_edges[-1]]])
        return ys, cs / cs[-1]

    def ppf(self, u, newton_steps=2):
        ys, cs = self._cdf_table()
        u = np.asarray(u, dtype=float)
        y = np.interp(u, cs, ys)
        # polish the piecewise-linear guess against the exact cdf
        for _ in range(newton_steps):
            inside = (y > 0) & (y < self.y_max)
            if not inside.any():
                break
            dens = self.pdf(np.where(inside, y, 0.5 * self.y_max))
            step = np.where(inside & (dens > 0), (self.cdf(y) - u) / np.where(dens > 0, dens, 1.0), 0.0)
            y = np.clip(y - step, 0.0, self.y_max)
        return y

    def sample(self, n, rng):
        """Inverse-CDF draws; ``rng`` is a ``numpy.random.Generator``."""
        return self.ppf(rng.random(n))

    def to_dict(self):
        out = {}
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            val = getattr(self, f.name)
            out[f.name] = val.tolist() if isinstance(val, np.ndarray) else val
        for key in ("norm_constant", "tail_bound"):
            if not math.isfinite(out[key]):
                out[key] = None
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["y_nodes"] = np.asarray(data["y_nodes"], dtype=float)
        data["g_values"] = np.asarray(data["g_values"], dtype=float)
        for key in ("norm_constant", "tail_bound"):
            if data.get(key) is None:
                data[key] = math.inf
        return cls(**data)


def _zero_piece(a, b, y0, g0, n=16):
    """Gauss-Jacobi nodes and weights for ``int_0^{y0} (.) g`` under the power-law model.

    Model: ``g(x) = g0 (x / y0)^(a-1) exp(b (x - y0))``.
    """
    x, w = special.roots_jacobi(n, 0.0, a - 1.0)
    u = 0.5 * (x + 1.0)
    weights = g0 * y0 * 2.0 ** (-a) * w * np.exp(b * y0 * (u - 1.0))
    return y0 * u, weights


def _finish_density(log_kernel, edges, a, b, order, atol, rtol, label, log_anchor=0.0):
    """Normalize ``exp(log_kernel)`` on the mesh and package a DensityGrid."""
    probe = CellQuadrature(edges, order)
    shift = float(np.max(log_kernel(probe.nodes)))
    if not math.isfinite(shift):
        raise QuadratureError("log-density is not finite on the mesh")

    def scaled(y):
        return np.exp(log_kernel(y) - shift)

    edges = adaptive_edges(scaled, edges, order, atol, rtol)
    quad = CellQuadrature(edges, order)
    gx = scaled(quad.nodes)
    y0 = edges[0]
    g0 = float(scaled(np.array([y0]))[0])
    zn, zw = _zero_piece(a, b, y0, g0)
    total = quad.integral(gx) + float(zw.sum())
    if not (total > 0 and math.isfinite(total)):
        raise QuadratureError("normalization integral did not converge")
    log_c = -(shift + math.log(total)) - log_anchor

    def log_pdf(y):
        return log_kernel(y) - shift - math.log(total)

    g_edges = np.exp(log_pdf(edges))
    # exponential-tail bound on the mass beyond y_max
    hi = edges[-1]
    dy = 1e-6 * hi
    slope = float((log_kernel(np.array([hi + dy])) - log_kernel(np.array([hi - dy])))[0] / (2 * dy))
    tail = g_edges[-1] / -slope if slope < 0 else math.inf
    return DensityGrid(
        y_nodes=edges, g_values=g_edges,
        norm_constant=math.exp(log_c) if log_c < 700 else math.inf,
        log_norm_constant=log_c, tail_bound=float(tail),
        shape_at_zero=float(a), log_slope_at_zero=float(b), quad_tol=rtol, label=label,
        _quad=quad, _g_nodes=gx / total, _z_nodes=zn, _z_weights=zw / total, _log_pdf=log_pdf,
    )


def gamma_component_density(params: VolParams, i: int, grid: GridConfig = GridConfig()) -> DensityGrid:
    """Stationary Gamma density of the ``i``-th linear CIR component, normalized by quadrature."""
    if i not in (1, 2):
        raise InvalidParametersError(f"component index must be 1 or 2, got {i}")
    p = params.check_admissible()
    a, beta = p.shape(i), p.rate

    def log_kernel(y):
        y = np.asarray(y, dtype=float)
        return (a - 1.0) * np.log(y) - beta * y

    return _finish_density(log_kernel, grid.edges(p), a, -beta, grid.order, grid.atol, grid.rtol,
                           f"gamma(shape={a:.6g}, rate={beta:.6g})")


def stationary_density(drift: DriftSpec, params: VolParams, grid: GridConfig = GridConfig()) -> DensityGrid:
    """Zero-flux stationary solution of the Fokker-Planck equation for ``drift``.

    Only ``params.v`` and the scales used to lay out the mesh are read from
    ``params``; the drift itself is arbitrary subject to the admissibility
    check.
    """
    if not params.v > 0:
        raise InvalidParametersError("v must be positive")
    v2 = params.v ** 2
    a = 2.0 * drift.alpha_at_zero / v2
    if not a > 1.0:
        raise HypothesisAViolation(f"2*alpha(0)/v^2 = {a:g} must exceed 1", y=0.0)
    edges = grid.edges(params)
    edges = adaptive_edges(drift.alpha_hat, edges, grid.order, grid.atol, grid.rtol)
    aq = CellQuadrature(edges, grid.order)
    ah_nodes = aq.sample(drift.alpha_hat)
    if not np.all(np.isfinite(ah_nodes)):
        raise QuadratureError("alpha_hat is not finite on the mesh")
    i_edges, _ = aq.cumulative(ah_nodes)
    lo, hi = aq.lo, aq.hi
    xg, wg = np.polynomial.legendre.leggauss(32)

    def _gl(y_from, y_to):
        # int_{y_from}^{y_to} alpha_hat for arrays of endpoints
        mid, half = 0.5 * (y_from + y_to), 0.5 * (y_to - y_from)
        pts = mid[..., None] + half[..., None] * xg
        return (drift.alpha_hat(pts) * wg).sum(axis=-1) * half

    def int_alpha_hat(y):
        # int_{lo}^{y} alpha_hat
        y = np.asarray(y, dtype=float)
        out = aq.partial(ah_nodes, i_edges, np.clip(y, lo, hi))
        below, above = y < lo, y > hi
        if below.any():
            out = np.where(below, _gl(np.full(y.shape, lo), np.where(below, y, lo)), out)
        if above.any():
            out = np.where(above, i_edges[-1] + _gl(np.full(y.shape, hi), np.where(above, y, hi)), out)
        return out

    anchor = float(int_alpha_hat(np.array([1.0]))[0])

    def log_kernel(y):
        y = np.asarray(y, dtype=float)
        return (a - 1.0) * np.log(y) + (2.0 / v2) * (int_alpha_hat(y) - anchor)

    b = (2.0 / v2) * float(drift.alpha_hat(np.array([lo]))[0])
    return _finish_density(log_kernel, edges, a, b, grid.order, grid.atol, grid.rtol,
                           f"stationary({drift.name})")


class HKernel:
    """``H(y) = (1 / (y g(y))) int_0^y (xi - sigma2) g(xi) dxi`` and its running integral.

    The inner integral uses the left running sum below ``sigma2`` and the
    negated right tail above it, which keeps it accurate where it is tiny.
    Below ``H_SERIES_BELOW`` the power-law closed form is used.
    """

    def __init__(self, g: DensityGrid, sigma2: float):
        self.g = g
        self.sigma2 = float(sigma2)
        quad = g._require_quad()
        self.quad = quad
        a, b = g.shape_at_zero, g.log_slope_at_zero
        self.a, self.b = a, b
        gx = g._g_nodes
        centered = (quad.nodes - self.sigma2) * gx
        m0 = float(np.sum(g._z_weights * (g._z_nodes - self.sigma2)))
        left_e, left_n = quad.cumulative(centered)
        right_e, right_n = quad.reverse_cumulative(centered)
        self._m_nodes = np.where(quad.nodes <= self.sigma2, m0 + left_n, -right_n)
        self._m_edges = np.where(quad.edges <= self.sigma2,
                                 m0 + left_e, -right_e)
        self._m_offset = m0
        h_nodes = self._m_nodes / (quad.nodes * gx)
        small = quad.nodes < H_SERIES_BELOW
        if small.any():
            h_nodes = h_nodes.copy()
            h_nodes[small] = self._series(quad.nodes[small])
        self._h_nodes = h_nodes
        self._j0 = self._series_integral(np.array([quad.lo]))[0]
        j_edges, j_nodes = quad.cumulative(h_nodes)
        self._j_edges = self._j0 + j_edges
        self._j_nodes = self._j0 + j_nodes

    def _series(self, y):
        y = np.asarray(y, dtype=float)
        a, b, s2 = self.a, self.b, self.sigma2
        s = b * y
        f1 = special.hyp1f1(a + 1.0, a + 2.0, s) / (a + 1.0)
        f0 = special.hyp1f1(a, a + 1.0, s) / a
        return np.exp(-s) * (y * f1 - s2 * f0)

    def _series_integral(self, y):
        x, w = np.polynomial.legendre.leggauss(16)
        y = np.asarray(y, dtype=float)
        pts = 0.5 * y[..., None] * (x + 1.0)
        return 0.5 * y * (self._series(pts) * w).sum(axis=-1)

    def _check_range(self, y):
        if np.any(y > self.quad.hi * (1 + 1e-12)):
            raise DensityDomainError(
                f"y = {float(np.max(y)):g} lies beyond the density support y_max = {self.quad.hi:g}")

    @property
    def y_nodes(self):
        return self.quad.edges

    @property
    def nodes(self):
        """Quadrature nodes, shape ``(n_cells, order)``."""
        return self.quad.nodes

    @property
    def h_at_nodes(self):
        return self._h_nodes

    @property
    def j_at_nodes(self):
        return self._j_nodes

    @property
    def m_at_nodes(self):
        return self._m_nodes

    def inner(self, y):
        """``M(y) = int_0^y (xi - sigma2) g``."""
        y = np.asarray(y, dtype=float)
        self._check_range(y)
        q = self.quad
        yc = np.clip(y, q.lo, q.hi)
        centered = (q.nodes - self.sigma2) * self.g._g_nodes
        idx = q.locate(yc)
        zero = np.zeros(q.n_cells + 1)
        # edge table is left-anchored below sigma2 and right-anchored above
        return self._m_edges[idx] + q.partial(centered, zero, yc)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        self._check_range(y)
        small = y < H_SERIES_BELOW
        yy = np.where(small, H_SERIES_BELOW, y)
        gy = self.g.pdf(yy)
        if np.any(gy[~small] <= 0):
            raise DensityDomainError("density vanishes numerically; H is undefined there")
        out = self.inner(yy) / (yy * gy)
        if small.any():
            out = np.where(small, self._series(np.where(small, np.maximum(y, 0.0), 0.0)), out)
        return out

    def cumulative(self, y):
        """``J(y) = int_0^y H``."""
        y = np.asarray(y, dtype=float)
        self._check_range(y)
        q = self.quad
        out = q.partial(self._h_nodes, self._j_edges, np.clip(y, q.lo, q.hi))
        below = y < q.lo
        if below.any():
            out = np.where(below, self._series_integral(np.where(below, np.maximum(y, 0.0), q.lo)), out)
        return out

    def derivative(self, y, rel_step=1e-5):
        """Central-difference ``H'(y)``."""
        y = np.asarray(y, dtype=float)
        h = rel_step * np.maximum(y, 1e-3)
        return (self(y + h) - self(y - h)) / (2.0 * h)


def H_kernel(g: DensityGrid, sigma2: float) -> HKernel:
    return HKernel(g, sigma2)


@dataclass(frozen=True)
class MomentSet:
    """Stationary moments of the dispersion and the kernel constants of the expansion.

    ``K3`` is ``int xi^2 H(xi) g(xi) dxi``, the integrand that matches the
    closed form ``-S D^(3/2) / 2 - sigma2 D``.
    """

    sigma2: float
    D: float
    S: float
    K2: float
    K3: float
    K4: float
    D_double_integral: float

    def to_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data):
        return cls(**{f.name: float(data[f.name]) for f in fields(cls)})

    @property
    def K3_closed_form(self):
        return -0.5 * self.S * self.D ** 1.5 - self.sigma2 * self.D


def moments(g: DensityGrid, kernel: Optional[HKernel] = None) -> MomentSet:
    """Mean, variance and skewness of ``g`` plus the constants ``K2``, ``K3``, ``K4``."""
    sigma2 = g.integrate(lambda y: y)
    D = g.integrate(lambda y: (y - sigma2) ** 2)
    if not D > 0:
        raise NegativeVarianceError(f"dispersion variance D = {D:g} is not positive")
    third = g.integrate(lambda y: (y - sigma2) ** 3)
    S = third / D ** 1.5
    ker = kernel if kernel is not None else HKernel(g, sigma2)
    quad = ker.quad
    gx = g._g_nodes
    zn, zw = g._z_nodes, g._z_weights
    y0 = quad.lo
    # int_0^inf M(y) dy; on [0, y0] swap the order of integration
    d_dbl = -(quad.integral(ker.m_at_nodes) + float(np.sum(zw * (zn - sigma2) * (y0 - zn))))
    h_z = ker._series(zn)
    j_z = ker._series_integral(zn)
    nodes = quad.nodes
    K2 = quad.integral(ker.j_at_nodes * gx) + float(np.sum(zw * j_z))
    K3 = quad.integral(nodes ** 2 * ker.h_at_nodes * gx) + float(np.sum(zw * zn ** 2 * h_z))
    K4 = (quad.integral(ker.j_at_nodes * (nodes - sigma2) * gx)
          + float(np.sum(zw * j_z * (zn - sigma2))))
    return MomentSet(sigma2=sigma2, D=D, S=S, K2=K2, K3=K3, K4=K4, D_double_integral=d_dbl)


def fp_stationary_residual(g, drift: DriftSpec, params: VolParams,
                           h=1e-4, y_lo=None, y_hi=None, absolute=False):
    """Stationary Fokker-Planck residual ``(v^2/2)(y g)'' - (alpha g)'``.

    Five-point central differences on a uniform grid of spacing ``h`` over
    ``[y_lo, y_hi]``. The default ``y_lo = 20 h`` skips the boundary layer
    where ``g ~ y^(a-1)`` has unbounded high derivatives. The sup-norm is
    divided by ``sup |alpha g|`` unless ``absolute`` is set.

    ``g`` may be a DensityGrid or any callable density.
    """
    pdf = g.pdf if isinstance(g, DensityGrid) else g
    y_lo = 20.0 * h if y_lo is None else y_lo
    if y_hi is None:
        y_hi = g.y_max if isinstance(g, DensityGrid) else default_y_max(params)
    ys = np.arange(y_lo - 2.0 * h, y_hi + 0.5 * h, h)
    if ys.size < 9:
        raise GridTooCoarseError(f"only {max(ys.size - 4, 0)} interior nodes; need at least 5")
    gy = pdf(ys)
    diff = 0.5 * params.v ** 2 * ys * gy
    adv = drift(ys) * gy
    second = (-diff[4:] + 16.0 * diff[3:-1] - 30.0 * diff[2:-2]
              + 16.0 * diff[1:-3] - diff[:-4]) / (12.0 * h ** 2)
    first = (-adv[4:] + 8.0 * adv[3:-1] - 8.0 * adv[1:-3] + adv[:-4]) / (12.0 * h)
    res = float(np.max(np.abs(second - first)))
    if absolute:
        return res
    return res / float(np.max(np.abs(adv)))
