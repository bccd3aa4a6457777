"""Shared fixtures and independent oracle helpers.

The oracles here deliberately avoid the code paths they check: the mixture
pdf is summed term by term in plain Python floats (no log-sum-exp), and
derivative checks use central finite differences.
"""

import math

import numpy as np
import pytest

from diffdens.gmm import GaussianComponent, GaussianMixture


def mixture_logpdf_brute(mix: GaussianMixture, x: np.ndarray) -> float:
    """Direct summation of component pdfs; underflows for far tails, which
    is fine for the oracle's operating range."""
    total = 0.0
    for c in mix.components:
        q = 0.0
        norm = 1.0
        for d in range(mix.dim):
            q += (x[d] - c.mean[d]) ** 2 / c.cov_diag[d]
            norm *= math.sqrt(2.0 * math.pi * c.cov_diag[d])
        total += c.weight * math.exp(-0.5 * q) / norm
    return math.log(total)


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    g = np.empty_like(x, dtype=float)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


@pytest.fixture
def std_normal_2d() -> GaussianMixture:
    return GaussianMixture(
        components=(
            GaussianComponent(weight=1.0, mean=np.zeros(2), cov_diag=np.ones(2)),
        ),
        dim=2,
    )


@pytest.fixture
def two_bumps_1d() -> GaussianMixture:
    return GaussianMixture(
        components=(
            GaussianComponent(weight=0.5, mean=np.array([1.0]), cov_diag=np.ones(1)),
            GaussianComponent(weight=0.5, mean=np.array([-1.0]), cov_diag=np.ones(1)),
        ),
        dim=1,
    )
