"""Asymptotic expansion of the bond price in the fast volatility scale.

The price under rapidly oscillating dispersion is approximated as

    P ~ P0(t, r) + sqrt(eps) P1(t, r) + eps (P2bar(t, r) + P2tilde(t, r, y)).

Every term has the exponential-affine form ``q(t, r) exp(-B(t) r)`` with
``q`` polynomial in ``r``:

* ``P0 = A0 e^{-Br}`` (one-factor CIR with dispersion ``sigma2``),
* ``P1 = (A10 + A11 r) e^{-Br}``,
* ``P2bar = (A20 + A21 r + A22 r^2) e^{-Br}``,
* ``P2tilde = -(2/v^2) f r e^{-Br} (J(y) - K2)`` with ``J = int_0^y H``.

All coefficient ODEs are autonomous in the time to maturity ``tau = T - t``,
so one build on ``[0, T]`` serves every maturity up to ``T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InvalidParametersError, ODEStepError, ResidualCheckError
from .volprocess import (
    DensityGrid, GridConfig, HKernel, MomentSet, VolParams,
    clustering_drift, moments as compute_moments, stationary_density,
)

__all__ = [
    "CIRParams", "ExpansionCoeffs", "PriceQuery", "PriceResult", "Curve",
    "closed_form_P0", "integrate_riccati", "f_source", "solve_P1", "tilde_P2",
    "rhs_coeffs_barP2", "solve_barP2", "build_expansion", "price",
    "term_structure", "pde_residual", "barP2_residual", "check_barP2", "residual_scaling",
    "AsymptoticBondPricer",
]

ODE_RTOL = 1e-9
ODE_ATOL = 1e-10


@dataclass(frozen=True)
class CIRParams:
    """Short-rate parameters and the constant market prices of risk."""

    kappa: float = 5.0
    theta: float = 0.03
    lambda1: float = -1.0
    lambda2: float = -100.0
    maturity: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise InvalidParametersError(f"kappa must be positive, got {self.kappa}")
        if not self.theta > 0:
            raise InvalidParametersError(f"theta must be positive, got {self.theta}")
        if not self.maturity > 0:
            raise InvalidParametersError(f"maturity must be positive, got {self.maturity}")


def _psi_phi(cir, sigma2):
    psi = cir.kappa + cir.lambda1 * sigma2
    return psi, math.sqrt(psi * psi + 2.0 * sigma2)


def _b_tau(tau, cir, sigma2):
    psi, phi = _psi_phi(cir, sigma2)
    e = np.exp(-phi * np.asarray(tau, dtype=float))
    return 2.0 * (1.0 - e) / ((phi + psi) * (1.0 - e) + 2.0 * phi * e)


def _log_a0_tau(tau, cir, sigma2):
    psi, phi = _psi_phi(cir, sigma2)
    tau = np.asarray(tau, dtype=float)
    e = np.exp(-phi * tau)
    inner = math.log(2.0 * phi) + 0.5 * (psi - phi) * tau - np.log((phi + psi) * (1.0 - e) + 2.0 * phi * e)
    return (2.0 * cir.kappa * cir.theta / sigma2) * inner


def closed_form_P0(cir: CIRParams, sigma2: float):
    """``(A0, B)`` as vectorized functions of calendar time ``t`` for maturity ``cir.maturity``."""
    if not sigma2 > 0:
        raise InvalidParametersError(f"sigma2 must be positive, got {sigma2}")
    T = cir.maturity

    def A0(t):
        return np.exp(_log_a0_tau(T - np.asarray(t, dtype=float), cir, sigma2))

    def B(t):
        return _b_tau(T - np.asarray(t, dtype=float), cir, sigma2)

    return A0, B


def integrate_riccati(cir: CIRParams, sigma2: float, taus, rtol=1e-12, atol=1e-14):
    """Numerical ``(A0, B)`` at times to maturity ``taus`` by backward Runge-Kutta.

    Integrates ``B' = (kappa + lambda1 sigma2) B + sigma2 B^2 / 2 - 1`` and
    ``A0' = kappa theta B A0`` from ``B(T) = 0``, ``A0(T) = 1``; independent
    of the closed form and used to cross-check it.
    """
    taus = np.asarray(taus, dtype=float)
    psi = cir.kappa + cir.lambda1 * sigma2
    kt = cir.kappa * cir.theta

    def rhs(tau, s):
        b, log_a = s
        # d/dtau = -d/dt
        return [-(psi * b + 0.5 * sigma2 * b * b - 1.0), -kt * b]

    order = np.argsort(taus)
    t_eval = taus[order]
    sol = solve_ivp(rhs, (0.0, float(t_eval[-1]) if t_eval.size else 0.0), [0.0, 0.0],
                    method="DOP853", t_eval=t_eval, rtol=rtol, atol=atol)
    if not sol.success:
        raise ODEStepError(sol.message)
    B = np.empty_like(taus)
    A0 = np.empty_like(taus)
    B[order] = sol.y[0]
    A0[order] = np.exp(sol.y[1])
    return A0, B


def f_source(A0, B, lambda1):
    """Source ``f = (lambda1 B + B^2 / 2) A0`` of the first corrections; arrays in, array out."""
    B = np.asarray(B, dtype=float)
    return (lambda1 * B + 0.5 * B * B) * np.asarray(A0, dtype=float)


@dataclass(frozen=True)
class _Model:
    """Scalars shared by the coefficient ODEs."""

    kappa: float
    theta: float
    lambda1: float
    lambda2: float
    sigma2: float
    v: float

    @property
    def psi(self):
        return self.kappa + self.lambda1 * self.sigma2

    @property
    def kt(self):
        return self.kappa * self.theta

    def B(self, tau):
        return _b_tau(tau, self, self.sigma2)

    def A0(self, tau):
        return np.exp(_log_a0_tau(tau, self, self.sigma2))

    def f(self, tau):
        return f_source(self.A0(tau), self.B(tau), self.lambda1)

    def dB_dt(self, tau):
        b = self.B(tau)
        return self.psi * b + 0.5 * self.sigma2 * b * b - 1.0

    def dA0_dt(self, tau):
        return self.kt * self.B(tau) * self.A0(tau)

    def df_dt(self, tau):
        b, a0 = self.B(tau), self.A0(tau)
        return (self.lambda1 + b) * self.dB_dt(tau) * a0 + (self.lambda1 * b + 0.5 * b * b) * self.dA0_dt(tau)


def _solve_linear_backward(rhs_t, n_state, taus, rtol, atol, what):
    """Integrate ``y'(t) = rhs_t(tau, y)`` backward from zero terminal data.

    ``rhs_t`` returns the calendar-time derivative; integration runs in
    ``tau``. Returns values at ``taus`` and a Hermite interpolant built
    from exact slopes.
    """
    sol = solve_ivp(lambda tau, y: -np.asarray(rhs_t(tau, y)), (0.0, float(taus[-1])),
                    np.zeros(n_state), method="DOP853", t_eval=taus, rtol=rtol, atol=atol)
    if not sol.success:
        raise ODEStepError(f"{what}: {sol.message}")
    vals = sol.y
    slopes = np.column_stack([-np.asarray(rhs_t(tau, vals[:, i])) for i, tau in enumerate(taus)])
    spline = CubicHermiteSpline(taus, vals, slopes, axis=1)
    return vals, spline


def solve_P1(model: _Model, K1: float, taus, rtol=ODE_RTOL, atol=ODE_ATOL):
    """``(A10, A11)`` on ``taus`` and their Hermite interpolant in ``tau``.

    A11' = (kt B + psi + sigma2 B) A11 + K1 f,  A10' = kt B A10 - kt A11
    (primes are calendar-time derivatives; both vanish at maturity).
    """
    kt, psi, s2 = model.kt, model.psi, model.sigma2

    def rhs_t(tau, y):
        a10, a11 = y
        b = model.B(tau)
        return [kt * b * a10 - kt * a11,
                (kt * b + psi + s2 * b) * a11 + K1 * model.f(tau)]

    return _solve_linear_backward(rhs_t, 2, taus, rtol, atol, "P1 coefficients")


def rhs_coeffs_barP2(model: _Model, mom: MomentSet, K1: float, p1_spline):
    """Coefficients ``(a, b, c)`` of the averaged second-order source as functions of ``tau``.

    Source is ``-<L2 P2tilde> - <L1 P3> = (a + b r + c r^2) e^{-Br}``. Every
    term carries an explicit factor ``r``, so ``a`` vanishes identically.
    """
    v, lam1, lam2 = model.v, model.lambda1, model.lambda2
    c2 = 2.0 * lam2 / v
    k4 = (2.0 / v ** 2) * mom.K4
    fcoef = c2 * (c2 * mom.K3 + K1 * model.sigma2)
    D = mom.D

    def coeffs(tau):
        tau = np.asarray(tau, dtype=float)
        B, f = model.B(tau), model.f(tau)
        a10, a11 = p1_spline(tau)
        quad_B = lam1 * B + 0.5 * B * B
        # -lambda1 r P1_r + (r/2) P1_rr, per power of r
        q1_lin = -lam1 * (a11 - B * a10) + 0.5 * B * B * a10 - B * a11
        q1_quad = quad_B * a11
        a = np.zeros_like(B)
        b = k4 * f * (-lam1 - B) + fcoef * f + c2 * D * q1_lin
        c = k4 * f * quad_B + c2 * D * q1_quad
        return a, b, c

    return coeffs


def solve_barP2(model: _Model, rhs, taus, rtol=ODE_RTOL, atol=ODE_ATOL):
    """``(A20, A21, A22)`` from matching powers of ``r`` in ``<L2>P2bar = (a + b r + c r^2) e^{-Br}``.

    A22' = (kt B + 2 psi + 2 sigma2 B) A22 + c
    A21' = (kt B + psi + sigma2 B) A21 - (2 kt + sigma2) A22 + b
    A20' = kt B A20 - kt A21 + a
    """
    kt, psi, s2 = model.kt, model.psi, model.sigma2

    def rhs_t(tau, y):
        a20, a21, a22 = y
        B = model.B(tau)
        a, b, c = rhs(tau)
        return [kt * B * a20 - kt * a21 + a,
                (kt * B + psi + s2 * B) * a21 - (2.0 * kt + s2) * a22 + b,
                (kt * B + 2.0 * psi + 2.0 * s2 * B) * a22 + c]

    return _solve_linear_backward(rhs_t, 3, taus, rtol, atol, "averaged P2 coefficients")


def tilde_P2(model: _Model, kernel: HKernel, K2: float):
    """Zero-mean fluctuation ``P2tilde(tau, r, y)``."""
    scale = -2.0 / model.v ** 2

    def fn(tau, r, y):
        tau, r, y = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (tau, r, y)))
        return scale * model.f(tau) * r * np.exp(-model.B(tau) * r) * (kernel.cumulative(y) - K2)

    return fn


@dataclass(frozen=True, eq=False)
class ExpansionCoeffs:
    """Tabulated expansion coefficients on a time-to-maturity grid.

    ``tau_grid`` increases from 0 (maturity) to ``maturity``; ``time_grid``
    is the matching calendar-time grid ``maturity - tau_grid``. Values
    between nodes come from cubic Hermite interpolation with the exact ODE
    slopes; ``A0``, ``B`` and ``f`` are always evaluated in closed form.
    """

    cir: CIRParams
    vol: VolParams
    moments: MomentSet
    K1: float
    tau_grid: np.ndarray
    A0: np.ndarray
    B: np.ndarray
    f: np.ndarray
    A10: np.ndarray
    A11: np.ndarray
    A20: np.ndarray
    A21: np.ndarray
    A22: np.ndarray
    _model: _Model = field(repr=False, default=None)
    _p1: CubicHermiteSpline = field(repr=False, default=None)
    _p2: CubicHermiteSpline = field(repr=False, default=None)
    _rhs: Callable = field(repr=False, default=None)
    _kernel: Optional[HKernel] = field(repr=False, default=None)
    _tilde: Optional[Callable] = field(repr=False, default=None)
    density: Optional[DensityGrid] = field(repr=False, default=None)

    @property
    def maturity(self):
        return float(self.tau_grid[-1])

    @property
    def time_grid(self):
        return self.maturity - self.tau_grid

    @property
    def model(self):
        return self._model

    @property
    def kernel(self):
        return self._kernel

    def _check_tau(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < 0) or np.any(tau > self.maturity * (1 + 1e-12)):
            raise InvalidParametersError(
                f"time to maturity must lie in [0, {self.maturity:g}]")
        return np.clip(tau, 0.0, self.maturity)

    def p1_coeffs(self, tau):
        return self._p1(self._check_tau(tau))

    def p2_coeffs(self, tau):
        return self._p2(self._check_tau(tau))

    def rhs(self, tau):
        return self._rhs(self._check_tau(tau))

    def P0(self, tau, r):
        tau = self._check_tau(tau)
        m = self._model
        return m.A0(tau) * np.exp(-m.B(tau) * np.asarray(r, dtype=float))

    def P1(self, tau, r):
        tau = self._check_tau(tau)
        a10, a11 = self._p1(tau)
        r = np.asarray(r, dtype=float)
        return (a10 + a11 * r) * np.exp(-self._model.B(tau) * r)

    def P2bar(self, tau, r):
        tau = self._check_tau(tau)
        a20, a21, a22 = self._p2(tau)
        r = np.asarray(r, dtype=float)
        return (a20 + a21 * r + a22 * r * r) * np.exp(-self._model.B(tau) * r)

    def P2tilde(self, tau, r, y):
        return self._tilde(self._check_tau(tau), r, y)

    def to_dict(self):
        out = {
            "cir": {f.name: getattr(self.cir, f.name) for f in fields(self.cir)},
            "vol": {f.name: getattr(self.vol, f.name) for f in fields(self.vol)},
            "moments": self.moments.to_dict(),
            "K1": self.K1,
        }
        for name in ("tau_grid", "A0", "B", "f", "A10", "A11", "A20", "A21", "A22"):
            out[name] = np.asarray(getattr(self, name)).tolist()
        out["time_grid"] = self.time_grid.tolist()
        return out


def build_expansion(vol: VolParams, cir: CIRParams, grid: GridConfig = GridConfig(),
                    n_time=801, density: Optional[DensityGrid] = None,
                    rtol=ODE_RTOL, atol=ODE_ATOL) -> ExpansionCoeffs:
    """Density, moments and every coefficient needed for orders 0-2 on ``[0, cir.maturity]``."""
    if n_time < 400:
        raise InvalidParametersError("coefficients are tabulated on at least 400 time points")
    if density is None:
        density = stationary_density(clustering_drift(vol), vol, grid)
    mom = compute_moments(density)
    kernel = HKernel(density, mom.sigma2)
    model = _Model(cir.kappa, cir.theta, cir.lambda1, cir.lambda2, mom.sigma2, vol.v)
    K1 = 2.0 * cir.lambda2 / vol.v * mom.D
    taus = np.linspace(0.0, cir.maturity, n_time)
    p1_vals, p1 = solve_P1(model, K1, taus, rtol, atol)
    rhs = rhs_coeffs_barP2(model, mom, K1, p1)
    p2_vals, p2 = solve_barP2(model, rhs, taus, rtol, atol)
    A0, B = model.A0(taus), model.B(taus)
    return ExpansionCoeffs(
        cir=cir, vol=vol, moments=mom, K1=K1, tau_grid=taus,
        A0=A0, B=B, f=f_source(A0, B, cir.lambda1),
        A10=p1_vals[0], A11=p1_vals[1], A20=p2_vals[0], A21=p2_vals[1], A22=p2_vals[2],
        _model=model, _p1=p1, _p2=p2, _rhs=rhs,
        _kernel=kernel, _tilde=tilde_P2(model, kernel, mom.K2), density=density,
    )


@dataclass(frozen=True)
class PriceQuery:
    """One pricing request; ``y=None`` asks for the price averaged over the stationary law."""

    t: float
    r: float
    epsilon: float
    order: int = 2
    y: Optional[float] = None

    def __post_init__(self):
        if self.order not in (0, 1, 2):
            raise InvalidParametersError(f"order-unsupported: expansion order {self.order} not in {{0, 1, 2}}")
        if not self.epsilon >= 0:
            raise InvalidParametersError("epsilon must be nonnegative")
        if not self.r >= 0:
            raise InvalidParametersError("short rate must be nonnegative")
        if self.y is not None and not self.y >= 0:
            raise InvalidParametersError("dispersion y must be nonnegative")


class PriceResult(NamedTuple):
    price: float
    in_range: bool


def _series(coeffs: ExpansionCoeffs, tau, r, epsilon, order, y=None):
    tau = np.asarray(tau, dtype=float)
    r = np.asarray(r, dtype=float)
    out = coeffs.P0(tau, r)
    if order >= 1 and epsilon > 0:
        out = out + math.sqrt(epsilon) * coeffs.P1(tau, r)
    if order >= 2 and epsilon > 0:
        p2 = coeffs.P2bar(tau, r)
        if y is not None:
            p2 = p2 + coeffs.P2tilde(tau, r, y)
        out = out + epsilon * p2
    return out


def price(query: PriceQuery, coeffs: ExpansionCoeffs) -> PriceResult:
    """Truncated expansion at ``query.order``; values outside ``(0, 1]`` are flagged, not clamped."""
    tau = coeffs.maturity - query.t
    val = float(_series(coeffs, tau, query.r, query.epsilon, query.order, query.y))
    return PriceResult(val, 0.0 < val <= 1.0)


class Curve(NamedTuple):
    tau: np.ndarray
    rate: np.ndarray
    price: np.ndarray
    valid: np.ndarray


def term_structure(coeffs: ExpansionCoeffs, r0, taus, epsilon, order=2) -> Curve:
    """Yields ``-log <P>/tau`` from the averaged truncated expansion.

    Nonpositive prices give ``nan`` with ``valid`` false at that maturity.
    """
    taus = np.asarray(taus, dtype=float)
    if np.any(taus <= 0):
        raise InvalidParametersError("maturities must be positive")
    if not r0 >= 0:
        raise InvalidParametersError("r0 must be nonnegative")
    prices = _series(coeffs, taus, np.full_like(taus, r0), epsilon, order)
    valid = prices > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = np.where(valid, -np.log(np.where(valid, prices, 1.0)) / taus, np.nan)
    return Curve(taus, rates, prices, valid)


def _exp_affine(poly, dpoly_t, B, dB_t, r):
    """Value and ``(t, r, rr)`` derivatives of ``sum_j q_j r^j e^{-Br}``."""
    E = np.exp(-B * r)
    q = sum(c * r ** j for j, c in enumerate(poly))
    q_r = sum(j * c * r ** (j - 1) for j, c in enumerate(poly) if j >= 1)
    q_rr = sum(j * (j - 1) * c * r ** (j - 2) for j, c in enumerate(poly) if j >= 2)
    q_t = sum(c * r ** j for j, c in enumerate(dpoly_t))
    val = q * E
    d_r = (q_r - B * q) * E
    d_rr = (q_rr - 2.0 * B * q_r + B * B * q) * E
    d_t = (q_t - dB_t * r * q) * E
    return val, d_t, d_r, d_rr


def _l2(cir_like, parts, r, y):
    val, d_t, d_r, d_rr = parts
    return (d_t + (cir_like.kappa * (cir_like.theta - r) - cir_like.lambda1 * r * y) * d_r
            + 0.5 * r * y * d_rr - r * val)


class ResidualStats(NamedTuple):
    sup: float
    rms: float
    values: np.ndarray


def pde_residual(coeffs: ExpansionCoeffs, epsilon, tau, r, y) -> ResidualStats:
    """Residual of the full two-factor pricing PDE applied to the order-2 expansion.

    ``t`` and ``r`` derivatives are analytic in the exponential-affine form
    (coefficient slopes from their ODEs), ``y`` derivatives of ``P2tilde``
    use ``H`` and a central difference of ``H``.
    """
    if not epsilon > 0:
        raise InvalidParametersError("epsilon must be positive for the PDE residual")
    tau, r, y = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (tau, r, y)))
    tau = coeffs._check_tau(tau)
    if np.any(r < 0) or np.any(y <= 0) or np.any(y > coeffs.density.y_max):
        raise InvalidParametersError("sample-out-of-domain: need r >= 0 and 0 < y <= y_max")
    m = coeffs.model
    ker = coeffs.kernel
    vol = coeffs.vol
    B, dB = m.B(tau), m.dB_dt(tau)
    A0, dA0 = m.A0(tau), m.dA0_dt(tau)
    f, df = m.f(tau), m.df_dt(tau)
    a10, a11 = coeffs._p1(tau)
    da10, da11 = (-coeffs._p1.derivative()(tau))
    a20, a21, a22 = coeffs._p2(tau)
    da20, da21, da22 = (-coeffs._p2.derivative()(tau))

    p0 = _exp_affine([A0], [dA0], B, dB, r)
    p1 = _exp_affine([a10, a11], [da10, da11], B, dB, r)
    p2b = _exp_affine([a20, a21, a22], [da20, da21, da22], B, dB, r)
    s = -2.0 / vol.v ** 2
    zero = np.zeros_like(f)
    phi = _exp_affine([zero, s * f], [zero, s * df], B, dB, r)

    J = ker.cumulative(y) - coeffs.moments.K2
    H = ker(y)
    dH = ker.derivative(y)
    alpha = clustering_drift(vol)(y)

    L0_tilde = phi[0] * (alpha * H + 0.5 * vol.v ** 2 * y * dH)
    L1_tilde = -m.lambda2 * vol.v * y * phi[0] * H
    L2_tilde = J * _l2(m, phi, r, y)
    se = math.sqrt(epsilon)
    res = (L0_tilde + se * L1_tilde
           + _l2(m, p0, r, y) + se * _l2(m, p1, r, y) + epsilon * (_l2(m, p2b, r, y) + L2_tilde))
    return ResidualStats(float(np.max(np.abs(res))), float(np.sqrt(np.mean(res ** 2))), res)


def residual_scaling(coeffs: ExpansionCoeffs, eps_values, n_tau=9, n_r=6, n_y=7, r_max=0.1):
    """PDE residual over a ``(tau, r, y)`` grid for each epsilon, and the log-log slope.

    ``y`` runs over stationary quantiles 5%-95%. Returns ``(stats, slope)``;
    ``slope`` is ``nan`` for fewer than two epsilons.
    """
    T = coeffs.maturity
    tau = np.linspace(0.1 * T, 0.9 * T, n_tau)
    r = np.linspace(0.01, r_max, n_r)
    y = coeffs.density.ppf(np.linspace(0.05, 0.95, n_y))
    tt, rr, yy = np.meshgrid(tau, r, y, indexing="ij")
    stats = [pde_residual(coeffs, e, tt, rr, yy) for e in eps_values]
    slope = math.nan
    if len(stats) >= 2:
        slope = float(np.polyfit(np.log(eps_values), np.log([s.sup for s in stats]), 1)[0])
    return stats, slope


def barP2_residual(coeffs: ExpansionCoeffs, tau, r, h_t=1e-4, h_r=1e-4):
    """Finite-difference ``<L2> P2bar - (a + b r + c r^2) e^{-Br}`` at ``(tau, r)``.

    Returns ``(residual, source)``; the derivatives come from central
    differences of the tabulated ``P2bar`` only.
    """
    tau, r = np.broadcast_arrays(np.asarray(tau, dtype=float), np.asarray(r, dtype=float))
    m = coeffs.model
    T = coeffs.maturity
    tp = np.minimum(tau + h_t, T)
    tm = np.maximum(tau - h_t, 0.0)
    # calendar time t = T - tau, so d/dt = -d/dtau
    d_t = -(coeffs.P2bar(tp, r) - coeffs.P2bar(tm, r)) / (tp - tm)
    rp, rm = r + h_r, np.maximum(r - h_r, 0.0)
    rc = 0.5 * (rp + rm)
    p_c = coeffs.P2bar(tau, r)
    d_r = (coeffs.P2bar(tau, rp) - coeffs.P2bar(tau, rm)) / (rp - rm)
    d_rr = (coeffs.P2bar(tau, rp) - 2.0 * coeffs.P2bar(tau, rc) + coeffs.P2bar(tau, rm)) / (0.5 * (rp - rm)) ** 2
    lhs = (d_t + (m.kappa * (m.theta - r) - m.lambda1 * r * m.sigma2) * d_r
           + 0.5 * m.sigma2 * r * d_rr - r * p_c)
    a, b, c = coeffs.rhs(tau)
    src = (a + b * r + c * r * r) * np.exp(-m.B(tau) * r)
    return lhs - src, src


def check_barP2(coeffs: ExpansionCoeffs, n=50, rel_tol=1e-4, r_max=0.2):
    """Abort unless the derived P2bar system passes the finite-difference gate."""
    T = coeffs.maturity
    tau = np.linspace(T / n, T * (1 - 1.0 / n), n)
    r = np.linspace(r_max / n, r_max, n)
    tt, rr = np.meshgrid(tau, r, indexing="ij")
    res, src = barP2_residual(coeffs, tt, rr)
    rel = float(np.max(np.abs(res)) / np.max(np.abs(src)))
    if not rel <= rel_tol:
        raise ResidualCheckError(f"P2bar residual {rel:.3e} exceeds {rel_tol:g}")
    return rel


class AsymptoticBondPricer(BaseEstimator):
    """Bond prices and yields from the singular-perturbation expansion.

    ``fit`` builds the stationary density, its moments and all coefficient
    tables up to ``max_maturity``; it takes no data. ``predict`` maps rows
    ``(tau, r)`` or ``(tau, r, y)`` to prices at ``epsilon`` and ``order``.
    """

    def __init__(self, kappa=5.0, theta=0.03, lambda1=-1.0, lambda2=-100.0,
                 kappa_y=100.0, theta1=0.025, theta2=0.1, v=1.1832, k=1.0 / 3.0,
                 epsilon=0.01, order=2, max_maturity=10.0, n_time=801, check=True):
        self.kappa = kappa
        self.theta = theta
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.kappa_y = kappa_y
        self.theta1 = theta1
        self.theta2 = theta2
        self.v = v
        self.k = k
        self.epsilon = epsilon
        self.order = order
        self.max_maturity = max_maturity
        self.n_time = n_time
        self.check = check

    def _params(self):
        vol = VolParams(self.kappa_y, self.theta1, self.theta2, self.v, self.k, self.epsilon)
        cir = CIRParams(self.kappa, self.theta, self.lambda1, self.lambda2, self.max_maturity)
        return vol, cir

    def fit(self, X=None, y=None):
        vol, cir = self._params()
        self.coeffs_ = build_expansion(vol, cir, n_time=self.n_time)
        self.moments_ = self.coeffs_.moments
        self.density_ = self.coeffs_.density
        if self.check:
            self.barP2_residual_ = check_barP2(self.coeffs_)
        return self

    def predict(self, X):
        check_is_fitted(self, "coeffs_")
        if self.order not in (0, 1, 2):
            raise InvalidParametersError(f"order-unsupported: {self.order}")
        X = check_array(X, ensure_min_features=2)
        if X.shape[1] not in (2, 3):
            raise ValueError("X must have columns (tau, r) or (tau, r, y)")
        y = X[:, 2] if X.shape[1] == 3 else None
        return _series(self.coeffs_, X[:, 0], X[:, 1], self.epsilon, self.order, y)

    def yield_curve(self, r0, taus):
        check_is_fitted(self, "coeffs_")
        return term_structure(self.coeffs_, r0, taus, self.epsilon, self.order)
