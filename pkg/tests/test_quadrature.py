import numpy as np
import pytest

from cirsv._quadrature import CellQuadrature, adaptive_edges
from cirsv.errors import QuadratureError


@pytest.fixture
def quad():
    return CellQuadrature(np.array([0.0, 0.3, 1.0, 2.5]), order=8)


def test_polynomials_integrate_exactly(quad):
    fx = quad.sample(lambda y: 3 * y ** 5 - y ** 2 + 1)
    exact = 2.5 ** 6 / 2 - 2.5 ** 3 / 3 + 2.5
    assert quad.integral(fx) == pytest.approx(exact, rel=1e-14)


def test_cumulative_matches_antiderivative(quad):
    fx = quad.sample(np.cos)
    at_edges, at_nodes = quad.cumulative(fx)
    np.testing.assert_allclose(at_edges, np.sin(quad.edges), atol=1e-12)
    np.testing.assert_allclose(at_nodes, np.sin(quad.nodes), atol=1e-10)


def test_reverse_cumulative_is_complement(quad):
    fx = quad.sample(np.exp)
    tail_edges, tail_nodes = quad.reverse_cumulative(fx)
    np.testing.assert_allclose(tail_edges, np.exp(2.5) - np.exp(quad.edges), rtol=1e-12)
    np.testing.assert_allclose(tail_nodes, np.exp(2.5) - np.exp(quad.nodes), rtol=1e-7)


def test_interpolate_and_partial(quad):
    fx = quad.sample(np.sin)
    y = np.array([0.05, 0.7, 1.9, 2.5])
    np.testing.assert_allclose(quad.interpolate(fx, y), np.sin(y), atol=1e-8)
    at_edges, _ = quad.cumulative(fx)
    np.testing.assert_allclose(quad.partial(fx, at_edges, y), 1 - np.cos(y), atol=1e-8)


def test_adaptive_refines_a_peak():
    fn = lambda y: np.exp(-((y - 0.4) / 0.01) ** 2)
    edges = adaptive_edges(fn, np.linspace(0, 1, 5), order=8, atol=1e-13, rtol=1e-11)
    quad = CellQuadrature(edges, 8)
    assert quad.integral(quad.sample(fn)) == pytest.approx(0.01 * np.sqrt(np.pi), rel=1e-10)
    assert edges.size > 5


def test_adaptive_gives_up_on_singularity():
    with pytest.raises(QuadratureError):
        adaptive_edges(lambda y: 1 / np.abs(y - 0.5) ** 0.9, np.linspace(0, 1, 4), order=4, max_rounds=2)


def test_rejects_bad_edges():
    with pytest.raises(ValueError):
        CellQuadrature(np.array([0.0, 0.0, 1.0]))
