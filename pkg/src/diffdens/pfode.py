"""Probability-flow ODE log-density, the sequential baseline estimator.

The deterministic flow dy/ds = f(y, s) with f = b - (sigma^2 / 2) * score
shares the diffusion's marginals, and along its trajectories the marginal
log-density changes at rate -div f. Integrating the augmented state
(y, l) forward from the test point at s_min to the prior side at s = T
therefore gives

    logp(x) = log prior(y(T)) + integral_{s_min}^{T} div f(y(s), s) ds.

The divergence of the network part of f is estimated with randomised
probes (Hutchinson) unless an exact divergence callback is supplied.
Stepping is an embedded Dormand-Prince 5(4) pair with a PI controller;
each solve is inherently sequential, which is precisely the property the
path-integral estimator is benchmarked against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .errors import DivergedSolverError, InvalidArgumentError, MaxStepsError
from .rng import derive_key, make_rng
from .sde import DiffusionProcess, diffusion_coef, drift, prior_log_density

# Dormand-Prince 5(4): stage times, stage coefficients, 5th-order weights
# and the (b5 - b4) error weights.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_ERR = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0

DivergenceFn = Callable[[np.ndarray, float], float]


@dataclass(frozen=True)
class OdeConfig:
    rtol: float = 1e-5
    atol: float = 1e-5
    n_eps: int = 1000
    noise: str = "gaussian"        # probe law for the trace estimator
    trace_mode: str = "per-step"   # "per-step" | "delayed"
    max_steps: int = 100_000
    seed: int = 0
    s_min: float = 1e-3

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise InvalidArgumentError("rtol and atol must be > 0")
        if self.n_eps < 1:
            raise InvalidArgumentError("n_eps must be >= 1")
        if self.max_steps < 1:
            raise InvalidArgumentError("max_steps must be >= 1")
        if self.trace_mode not in ("per-step", "delayed"):
            raise InvalidArgumentError(f"unknown trace_mode {self.trace_mode!r}")

    def to_dict(self) -> dict:
        return {
            "rtol": self.rtol,
            "atol": self.atol,
            "n_eps": self.n_eps,
            "noise": self.noise,
            "trace_mode": self.trace_mode,
            "max_steps": self.max_steps,
            "seed": self.seed,
            "s_min": self.s_min,
        }


@dataclass(frozen=True)
class OdeResult:
    logp: float
    n_steps: int
    n_rejected_steps: int
    wall_time: float
    values: tuple[float, ...] | None = None  # delayed mode: per-probe solutions


def flow_field(
    objective: str,
    net: nn.MlpParams | nn.FieldFn,
    proc: DiffusionProcess,
    y: np.ndarray,
    s,
) -> np.ndarray:
    """Flow velocity b - (sigma^2 / 2) * score_est, with the score read off
    the network per objective: sm uses it directly, em inverts the residual
    parameterisation via score = 2 b / sigma^2 + net."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = y[None, :] if single else y
    s_arr = np.broadcast_to(np.asarray(s, dtype=float), (Y.shape[0],))
    out = nn.apply_field(net, Y, s_arr)
    b = drift(proc, Y, s_arr)
    g2 = np.asarray(diffusion_coef(proc, s_arr)) ** 2
    score = out if objective == "sm" else 2.0 * b / g2[:, None] + out
    if objective not in ("sm", "em"):
        raise InvalidArgumentError(f"unknown objective {objective!r}")
    f = b - 0.5 * g2[:, None] * score
    return f[0] if single else f


def _drift_divergence(proc: DiffusionProcess, s: float, dim: int) -> float:
    return -0.5 * float(proc.beta(s)) * dim if proc.kind == "vp" else 0.0


def _flow_and_div(
    objective: str,
    net,
    proc: DiffusionProcess,
    y: np.ndarray,
    s: float,
    probes: np.ndarray | None,
    divergence_fn: DivergenceFn | None,
) -> tuple[np.ndarray, float]:
    """One augmented right-hand-side evaluation: (f, div f) at (y, s)."""
    if divergence_fn is not None:
        return flow_field(objective, net, proc, y, s), float(divergence_fn(y, s))
    dim = y.size
    n_eps = probes.shape[0]
    X = np.broadcast_to(y, (n_eps, dim))
    s_arr = np.full(n_eps, s)
    if isinstance(net, nn.MlpParams):
        out, tape = nn.forward_batch(net, np.ascontiguousarray(X), s_arr, tape=True)
        _, dx = nn._backward(net, tape, probes, want_params=False, want_input=True)
        net_out = out[0]
    else:
        net_out = net(y[None, :], np.array([s]))[0]
        dx = nn.field_input_vjp(net, np.ascontiguousarray(X), s_arr, probes)
    net_div = float(np.sum(probes * dx) / n_eps)
    b = drift(proc, y, s)
    g2 = float(np.asarray(diffusion_coef(proc, s))) ** 2
    div_b = _drift_divergence(proc, s, dim)
    if objective == "sm":
        score, score_div = net_out, net_div
    else:
        score = 2.0 * b / g2 + net_out
        score_div = 2.0 * div_b / g2 + net_div
    f = b - 0.5 * g2 * score
    return f, div_b - 0.5 * g2 * score_div


def _error_norm(err_vec: np.ndarray, w_old: np.ndarray, w_new: np.ndarray, cfg: OdeConfig) -> float:
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(w_old), np.abs(w_new))
    return float(np.sqrt(np.mean((err_vec / scale) ** 2)))


def _solve(
    objective: str,
    net,
    proc: DiffusionProcess,
    x: np.ndarray,
    cfg: OdeConfig,
    divergence_fn: DivergenceFn | None,
    probe_rng: np.random.Generator | None,
    fixed_probes: np.ndarray | None,
) -> tuple[float, int, int]:
    """Adaptive solve of the augmented system from s_min to T. Returns
    (logp, accepted steps, rejected steps). Probes are redrawn once per
    accepted step (per-step mode), or held fixed for the whole solve."""
    dim = x.size
    span_lo, span_hi = cfg.s_min, proc.horizon_T
    y = x.astype(float).copy()
    ell = 0.0
    s = span_lo
    h = (span_hi - span_lo) / 100.0
    n_acc = n_rej = 0
    err_prev = 1.0
    probes = fixed_probes
    need_probes = divergence_fn is None and fixed_probes is None
    if need_probes:
        probes = nn.draw_probes(dim, cfg.n_eps, cfg.noise, int(probe_rng.integers(2**63)))
    while s < span_hi - 1e-14 * span_hi:
        h = min(h, span_hi - s)
        if n_acc + n_rej >= cfg.max_steps:
            raise MaxStepsError(cfg.max_steps, s)
        k = np.empty((7, dim + 1))
        for i in range(7):
            si = min(s + _C[i] * h, span_hi)
            if i == 0:
                yi, li = y, ell
            else:
                incr = h * (_A[i] @ k[:i])
                yi, li = y + incr[:dim], ell + incr[dim]
            fi, di = _flow_and_div(objective, net, proc, yi, si, probes, divergence_fn)
            k[i, :dim] = fi
            k[i, dim] = di
        incr5 = h * (_B5 @ k)
        y_new = y + incr5[:dim]
        ell_new = ell + incr5[dim]
        if not (np.all(np.isfinite(y_new)) and np.isfinite(ell_new)):
            raise DivergedSolverError(s)
        w_old = np.append(y, ell)
        w_new = np.append(y_new, ell_new)
        err = _error_norm(h * (_ERR @ k), w_old, w_new, cfg)
        if err <= 1.0:
            s += h
            y, ell = y_new, ell_new
            n_acc += 1
            if need_probes:
                probes = nn.draw_probes(
                    dim, cfg.n_eps, cfg.noise, int(probe_rng.integers(2**63))
                )
            factor = _SAFETY * max(err, 1e-10) ** (-_PI_ALPHA) * err_prev**_PI_BETA
            err_prev = max(err, 1e-10)
        else:
            n_rej += 1
            factor = _SAFETY * err ** (-0.2)
        h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
    logp = float(prior_log_density(proc, y)) + ell
    return logp, n_acc, n_rej


def log_density_ode(
    objective: str,
    net: nn.MlpParams | nn.FieldFn,
    proc: DiffusionProcess,
    x: np.ndarray,
    cfg: OdeConfig,
    divergence_fn: DivergenceFn | None = None,
) -> OdeResult:
    """Log-density at x by adaptive integration of the augmented flow.

    per-step mode draws fresh probe vectors after every accepted step
    (rejected retries reuse the step's draw, so the controller sees one
    consistent field per step). delayed mode instead runs n_eps
    independent single-probe solves and averages their log-densities;
    the returned n_steps / n_rejected_steps are then the per-solve maxima.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise InvalidArgumentError("x must be a finite point of shape (D,)")
    t0 = time.perf_counter()
    if divergence_fn is not None or cfg.trace_mode == "per-step":
        rng = make_rng(cfg.seed, "ode-probes")
        logp, n_acc, n_rej = _solve(
            objective, net, proc, x, cfg, divergence_fn, rng, None
        )
        return OdeResult(logp, n_acc, n_rej, time.perf_counter() - t0)
    vals = np.empty(cfg.n_eps)
    max_acc = max_rej = 0
    for j in range(cfg.n_eps):
        probes = nn.draw_probes(x.size, 1, cfg.noise, _delayed_seed(cfg.seed, j))
        one = OdeConfig(**{**cfg.to_dict(), "trace_mode": "per-step", "n_eps": 1})
        logp, n_acc, n_rej = _solve(objective, net, proc, x, one, None, None, probes)
        vals[j] = logp
        max_acc = max(max_acc, n_acc)
        max_rej = max(max_rej, n_rej)
    return OdeResult(
        float(np.mean(vals)),
        max_acc,
        max_rej,
        time.perf_counter() - t0,
        values=tuple(float(v) for v in vals),
    )


def _delayed_seed(seed: int, j: int) -> int:
    return derive_key(seed, "ode-delayed", j) % (2**63)


def integrate_fixed_steps(
    objective: str,
    net,
    proc: DiffusionProcess,
    x: np.ndarray,
    n_steps: int,
    s_min: float,
    divergence_fn: DivergenceFn | None = None,
    probes: np.ndarray | None = None,
) -> float:
    """Fifth-order propagation on a uniform grid (order-verification hook)."""
    dim = x.size
    y = np.asarray(x, dtype=float).copy()
    ell = 0.0
    h = (proc.horizon_T - s_min) / n_steps
    for j in range(n_steps):
        s = s_min + j * h
        k = np.empty((7, dim + 1))
        for i in range(7):
            si = min(s + _C[i] * h, proc.horizon_T)
            if i == 0:
                yi, li = y, ell
            else:
                incr = h * (_A[i] @ k[:i])
                yi, li = y + incr[:dim], ell + incr[dim]
            fi, di = _flow_and_div(objective, net, proc, yi, si, probes, divergence_fn)
            k[i, :dim] = fi
            k[i, dim] = di
        incr5 = h * (_B5 @ k)
        y = y + incr5[:dim]
        ell = ell + incr5[dim]
    return float(prior_log_density(proc, y)) + ell
