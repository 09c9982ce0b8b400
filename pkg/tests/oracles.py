"""Closed-form references shared by the tests."""
import math

from scipy import stats


def mixture_pdf(p, y):
    """Two-component Gamma mixture with common rate, straight from scipy."""
    beta = p.rate
    return (p.k * stats.gamma.pdf(y, p.shape(1), scale=1 / beta)
            + (1 - p.k) * stats.gamma.pdf(y, p.shape(2), scale=1 / beta))


def mixture_raw_moment(p, n):
    """E[y^n] of the Gamma mixture in closed form."""
    beta = p.rate
    out = 0.0
    for w, a in ((p.k, p.shape(1)), (1 - p.k, p.shape(2))):
        out += w * math.prod(a + j for j in range(n)) / beta ** n
    return out
