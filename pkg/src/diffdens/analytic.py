"""Closed forms for single-Gaussian targets under the linear forward SDEs.

A Gaussian N(mean, diag(var)) stays Gaussian under both processes, so its
time-s marginal, score field, reverse drift and flow divergence all have
exact expressions. These are the independent references the estimators are
validated against: with the exact score plugged in, the path-integral bound
saturates and the flow ODE transports the density exactly.
"""

from __future__ import annotations

import numpy as np

from .sde import DiffusionProcess, diffusion_coef, drift, transition


def gaussian_marginal(
    proc: DiffusionProcess, mean: np.ndarray, var: np.ndarray, s
) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate (mean, variance) of the evolved Gaussian at time s."""
    k = transition(proc, s)
    m, std2 = np.asarray(k.mean_coef), np.asarray(k.std) ** 2
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.ndim(m) == 1:
        return m[:, None] * mean[None, :], (m**2)[:, None] * var[None, :] + std2[:, None]
    return m * mean, m**2 * var + std2


def exact_score_field(proc: DiffusionProcess, mean, var):
    """Batched callable (X, s_arr) -> grad log of the evolved marginal."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)

    def score(X: np.ndarray, s_arr: np.ndarray) -> np.ndarray:
        mu_s, var_s = gaussian_marginal(proc, mean, var, s_arr)
        return -(X - mu_s) / var_s

    return score


def exact_score_stub(proc: DiffusionProcess, mean, var):
    """Score field packaged with its vector-Jacobian product, so it can
    stand in for the network inside the trace estimator: the Jacobian of
    the evolved-Gaussian score is -diag(1 / var(s))."""
    from .nn import StubField

    score = exact_score_field(proc, mean, var)
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)

    def vjp(X: np.ndarray, s_arr: np.ndarray, dout: np.ndarray) -> np.ndarray:
        _, var_s = gaussian_marginal(proc, mean, var, s_arr)
        return -dout / var_s

    return StubField(fn=score, vjp=vjp)


def exact_em_field(proc: DiffusionProcess, mean, var):
    """The entropy-matching residual consistent with the exact score:
    score - 2 b(y, s) / sigma^2(s)."""
    score = exact_score_field(proc, mean, var)

    def resid(X: np.ndarray, s_arr: np.ndarray) -> np.ndarray:
        g2 = np.asarray(diffusion_coef(proc, s_arr)) ** 2
        return score(X, s_arr) - 2.0 * drift(proc, X, s_arr) / g2[:, None]

    return resid


def exact_reverse_drift(proc: DiffusionProcess, mean, var):
    """Batched callable (X, s_arr) -> the true reverse drift
    b(y, s) - sigma^2(s) * score(y, s), which saturates the bound."""
    score = exact_score_field(proc, mean, var)

    def rev(X: np.ndarray, s_arr: np.ndarray) -> np.ndarray:
        g2 = np.asarray(diffusion_coef(proc, s_arr)) ** 2
        return drift(proc, X, s_arr) - g2[:, None] * score(X, s_arr)

    return rev


def exact_flow_divergence(proc: DiffusionProcess, mean, var):
    """State-independent divergence of the probability-flow field for the
    evolved Gaussian: div b + (sigma^2 / 2) sum_k 1 / var_k(s)."""
    var = np.asarray(var, dtype=float)
    dim = var.size

    def div(y: np.ndarray, s: float) -> float:
        _, var_s = gaussian_marginal(proc, np.zeros(dim), var, float(s))
        g2 = float(np.asarray(diffusion_coef(proc, float(s)))) ** 2
        div_b = -0.5 * float(proc.beta(float(s))) * dim if proc.kind == "vp" else 0.0
        return div_b + 0.5 * g2 * float(np.sum(1.0 / var_s))

    return div


def gaussian_log_density(mean, var, x) -> float:
    """Diagonal-Gaussian log-pdf; the exact target value at the data side."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    x = np.asarray(x, dtype=float)
    return float(
        -0.5 * np.sum(np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)
    )
