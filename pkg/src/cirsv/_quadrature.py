"""Composite Gauss-Legendre quadrature on a cell mesh.

Every cell carries the same ``order`` Legendre nodes. Functions are sampled
once at all nodes (array of shape ``(n_cells, order)``) and the class turns
those samples into totals, running integrals at nodes and cell edges, and
interpolated values or partial integrals at arbitrary points. Running
integrals use the spectral integration matrix, so nested integrals never
re-sample the integrand.
"""
from __future__ import annotations

import numpy as np
from numpy.polynomial import legendre

from .errors import QuadratureError


def _reference_rule(order):
    x, w = legendre.leggauss(order)
    t = 0.5 * (x + 1.0)
    w = 0.5 * w
    # barycentric weights of the nodes
    diff = t[:, None] - t[None, :]
    np.fill_diagonal(diff, 1.0)
    bary = 1.0 / diff.prod(axis=1)
    return t, w, bary


def _lagrange_matrix(s, t, bary):
    """Values of the Lagrange basis on nodes ``t`` at points ``s`` (any shape)."""
    s = np.asarray(s, dtype=float)
    d = s[..., None] - t
    exact = d == 0.0
    d = np.where(exact, 1.0, d)
    terms = bary / d
    basis = terms / terms.sum(axis=-1, keepdims=True)
    hit = exact.any(axis=-1)
    if np.any(hit):
        basis = np.where(hit[..., None], exact.astype(float), basis)
    return basis


class CellQuadrature:
    """Gauss-Legendre rule of fixed order on every cell of ``edges``."""

    def __init__(self, edges, order=12):
        edges = np.asarray(edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("cell edges must be a strictly increasing 1-D array")
        self.edges = edges
        self.order = int(order)
        self.t, self.w, self.bary = _reference_rule(self.order)
        self.h = np.diff(edges)
        self.nodes = edges[:-1, None] + self.h[:, None] * self.t[None, :]
        self.weights = self.h[:, None] * self.w[None, :]
        # S[j, k] = int_0^{t_j} l_k(s) ds on the reference cell
        pts = self.t[:, None] * self.t[None, :]
        self._S = (self.t[:, None, None] * self.w[None, :, None]
                   * _lagrange_matrix(pts, self.t, self.bary)).sum(axis=1)
        # node values -> Legendre coefficients, for error estimates
        self._to_legendre = np.linalg.inv(legendre.legvander(2.0 * self.t - 1.0, self.order - 1))

    @property
    def n_cells(self):
        return self.h.size

    @property
    def lo(self):
        return self.edges[0]

    @property
    def hi(self):
        return self.edges[-1]

    def sample(self, fn):
        return np.asarray(fn(self.nodes), dtype=float)

    def cell_integrals(self, fx):
        return (fx * self.weights).sum(axis=1)

    def integral(self, fx):
        return float(np.sum(self.cell_integrals(fx)))

    def cumulative(self, fx):
        """Running integral from the left edge.

        Returns ``(at_edges, at_nodes)`` with shapes ``(n_cells + 1,)`` and
        ``(n_cells, order)``.
        """
        cells = self.cell_integrals(fx)
        at_edges = np.concatenate([[0.0], np.cumsum(cells)])
        within = (fx @ self._S.T) * self.h[:, None]
        return at_edges, at_edges[:-1, None] + within

    def reverse_cumulative(self, fx):
        """Running integral towards the right edge, ``int_x^{hi} f``."""
        cells = self.cell_integrals(fx)
        tail = np.concatenate([np.cumsum(cells[::-1])[::-1], [0.0]])
        within = (fx @ self._S.T) * self.h[:, None]
        return tail, tail[1:, None] + (cells[:, None] - within)

    def locate(self, y):
        y = np.asarray(y, dtype=float)
        idx = np.searchsorted(self.edges, y, side="right") - 1
        return np.clip(idx, 0, self.n_cells - 1)

    def interpolate(self, fx, y):
        """Polynomial interpolation of node samples inside the owning cell."""
        y = np.asarray(y, dtype=float)
        idx = self.locate(y)
        s = (y - self.edges[idx]) / self.h[idx]
        basis = _lagrange_matrix(s, self.t, self.bary)
        return (basis * fx[idx]).sum(axis=-1)

    def partial(self, fx, at_edges, y):
        """``int_{lo}^{y} f`` for arbitrary ``y`` inside the mesh."""
        y = np.asarray(y, dtype=float)
        idx = self.locate(y)
        s = (y - self.edges[idx]) / self.h[idx]
        pts = s[..., None] * self.t
        basis = _lagrange_matrix(pts, self.t, self.bary)
        vals = (basis * fx[idx][..., None, :]).sum(axis=-1)
        inner = (vals * self.w).sum(axis=-1) * s * self.h[idx]
        return at_edges[idx] + inner

    def error_estimate(self, fx):
        """Per-cell integration error proxy from the trailing Legendre modes."""
        coef = fx @ self._to_legendre.T
        tail = np.abs(coef[:, -2:]).max(axis=1)
        return tail * self.h


def adaptive_edges(fn, edges, order=12, atol=1e-12, rtol=1e-10, max_rounds=12):
    """Bisect cells of ``edges`` until the integral of ``fn`` meets tolerance.

    ``fn`` maps an array of abscissae to integrand values. The per-cell
    budget is the global tolerance shared in proportion to cell width.
    """
    edges = np.asarray(edges, dtype=float)
    for _ in range(max_rounds):
        quad = CellQuadrature(edges, order)
        fx = quad.sample(fn)
        if not np.all(np.isfinite(fx)):
            raise QuadratureError("integrand is not finite on the quadrature mesh")
        total = abs(quad.integral(fx))
        budget = max(atol, rtol * total) * quad.h / (quad.hi - quad.lo)
        bad = quad.error_estimate(fx) > budget
        if not bad.any():
            return edges
        mids = 0.5 * (edges[:-1] + edges[1:])[bad]
        edges = np.sort(np.concatenate([edges, mids]))
    raise QuadratureError(
        f"composite Gauss rule did not reach atol={atol:g}, rtol={rtol:g} "
        f"after {max_rounds} refinement rounds")
