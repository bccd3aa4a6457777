"""Forward diffusion processes (VP and VE) and their closed-form kernels.

The forward SDE dY = b(Y, s) ds + g(s) dW runs from the data at s = 0 to an
approximately Gaussian prior at s = T. Both supported processes have linear
(or zero) drift, so the transition density p(y_s, s | y_0, 0) is an explicit
Gaussian: y_s = m(s) y_0 + std(s) z. Everything here is a pure function of
(process, inputs, seed).

VP: b = -beta(s) y / 2, g = sqrt(beta(s)), linear beta schedule.
VE: b = 0, g = sigma_bar^s sqrt(2 ln sigma_bar), kernel variance
    sigma_bar^(2s) - 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    DivergedSamplerError,
    InvalidArgumentError,
    SchemaError,
    SingularKernelError,
)
from .rng import make_rng

# Kernel-dependent operations refuse s below this fraction of T: std -> 0
# there and the kernel score diverges.
S_MIN_FRACTION = 1e-5


@dataclass(frozen=True)
class DiffusionProcess:
    kind: str  # "vp" | "ve"
    beta_min: float = 0.1
    beta_max: float = 20.0
    sigma_bar: float = 25.0
    horizon_T: float = 1.0

    def __post_init__(self):
        if self.kind not in ("vp", "ve"):
            raise InvalidArgumentError(f"unknown process kind {self.kind!r}")
        if self.horizon_T <= 0:
            raise InvalidArgumentError("horizon_T must be > 0")
        if self.kind == "vp" and not (0 < self.beta_min <= self.beta_max):
            raise InvalidArgumentError("VP requires 0 < beta_min <= beta_max")
        if self.kind == "ve" and not self.sigma_bar > 1:
            raise InvalidArgumentError("VE requires sigma_bar > 1")

    @property
    def s_floor(self) -> float:
        return S_MIN_FRACTION * self.horizon_T

    def beta(self, s):
        """Linear VP noise rate beta(s)."""
        s = np.asarray(s, dtype=float)
        return self.beta_min + (self.beta_max - self.beta_min) * s / self.horizon_T

    def beta_integral(self, s):
        """Closed form of int_0^s beta(u) du."""
        s = np.asarray(s, dtype=float)
        return self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s**2 / self.horizon_T

    def to_dict(self) -> dict:
        if self.kind == "vp":
            return {
                "kind": "vp",
                "beta_min": self.beta_min,
                "beta_max": self.beta_max,
                "T": self.horizon_T,
            }
        return {"kind": "ve", "sigma_bar": self.sigma_bar, "T": self.horizon_T}


def process_from_dict(obj: dict, where: str = "$.process") -> DiffusionProcess:
    if not isinstance(obj, dict):
        raise SchemaError("process spec must be a JSON object", where)
    kind = obj.get("kind")
    if kind not in ("vp", "ve"):
        raise SchemaError("'kind' must be 'vp' or 've'", f"{where}.kind")
    kwargs = {"kind": kind, "horizon_T": float(obj.get("T", 1.0))}
    if kind == "vp":
        kwargs["beta_min"] = float(obj.get("beta_min", 0.1))
        kwargs["beta_max"] = float(obj.get("beta_max", 20.0))
    else:
        kwargs["sigma_bar"] = float(obj.get("sigma_bar", 25.0))
    try:
        return DiffusionProcess(**kwargs)
    except InvalidArgumentError as exc:
        raise SchemaError(str(exc), where) from exc


@dataclass(frozen=True)
class TransitionKernel:
    """Gaussian kernel p(y_s, s | y_0, 0): y_s = mean_coef * y_0 + std * z."""

    mean_coef: np.ndarray
    std: np.ndarray


def _check_time_range(proc: DiffusionProcess, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if np.any(s < 0) or np.any(s > proc.horizon_T * (1 + 1e-12)):
        raise InvalidArgumentError(
            f"time {s!r} outside [0, {proc.horizon_T}]"
        )
    return s


def _check_kernel_time(proc: DiffusionProcess, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise SingularKernelError(f"kernel requested at s <= 0 (std = 0): {s!r}")
    if np.any(s > proc.horizon_T * (1 + 1e-12)):
        raise InvalidArgumentError(f"time {s!r} beyond horizon {proc.horizon_T}")
    return s


def drift(proc: DiffusionProcess, y: np.ndarray, s) -> np.ndarray:
    """Forward drift b(y, s). VP: -beta(s) y / 2; VE: zero."""
    s = _check_time_range(proc, s)
    y = np.asarray(y, dtype=float)
    if proc.kind == "ve":
        return np.zeros_like(y)
    b = proc.beta(s)
    if y.ndim == 2:
        b = np.reshape(b, (-1, 1)) if np.ndim(b) else b
    return -0.5 * b * y


def diffusion_coef(proc: DiffusionProcess, s):
    """Noise amplitude g(s). VP: sqrt(beta(s)); VE: sigma_bar^s sqrt(2 ln sigma_bar)."""
    s = _check_time_range(proc, s)
    if proc.kind == "vp":
        return np.sqrt(proc.beta(s))
    return proc.sigma_bar**s * np.sqrt(2.0 * np.log(proc.sigma_bar))


def transition(proc: DiffusionProcess, s) -> TransitionKernel:
    """Closed-form kernel coefficients m(s), std(s); requires s > 0."""
    s = _check_kernel_time(proc, s)
    if proc.kind == "vp":
        big = proc.beta_integral(s)
        m = np.exp(-0.5 * big)
        std = np.sqrt(-np.expm1(-big))
    else:
        m = np.ones_like(s)
        std = np.sqrt(proc.sigma_bar ** (2.0 * s) - 1.0)
    return TransitionKernel(mean_coef=m, std=std)


def perturb(
    proc: DiffusionProcess,
    y0: np.ndarray,
    s,
    seed: int,
) -> np.ndarray:
    """One-step kernel draw y_s = m(s) y0 + std(s) z, deterministic per seed."""
    k = transition(proc, s)
    y0 = np.asarray(y0, dtype=float)
    z = make_rng(seed, "perturb").standard_normal(y0.shape)
    return _kernel_apply(k, y0, z)


def _kernel_apply(k: TransitionKernel, y0: np.ndarray, z: np.ndarray) -> np.ndarray:
    m, std = k.mean_coef, k.std
    if y0.ndim == 2 and np.ndim(m) == 1:
        m = m[:, None]
        std = std[:, None]
    return m * y0 + std * z


def score_from_kernel(k: TransitionKernel, y_s: np.ndarray, y0: np.ndarray) -> np.ndarray:
    """-(y_s - m y0) / std^2 for an explicit kernel."""
    y_s = np.asarray(y_s, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    m, var = np.asarray(k.mean_coef), np.asarray(k.std) ** 2
    if y_s.ndim == 2 and np.ndim(m) == 1:
        m = m[:, None]
        var = var[:, None]
    return -(y_s - m * y0) / var


def kernel_score(proc: DiffusionProcess, y_s: np.ndarray, y0: np.ndarray, s) -> np.ndarray:
    """Gradient of log p(y_s, s | y0, 0) in y_s: -(y_s - m y0) / std^2."""
    return score_from_kernel(transition(proc, s), y_s, y0)


def prior_variance(proc: DiffusionProcess) -> float:
    """Per-coordinate variance of the reference prior at s = T."""
    if proc.kind == "vp":
        return 1.0
    return float(proc.sigma_bar ** (2.0 * proc.horizon_T) - 1.0)


def prior_log_density(proc: DiffusionProcess, y: np.ndarray) -> float | np.ndarray:
    """Log-density of the zero-mean Gaussian prior, scalar or per-row."""
    y = np.asarray(y, dtype=float)
    var = prior_variance(proc)
    d = y.shape[-1]
    sq = np.sum(y * y, axis=-1)
    out = -0.5 * (d * np.log(2.0 * np.pi * var) + sq / var)
    return float(out) if y.ndim == 1 else out


ControlFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def reverse_sample(
    proc: DiffusionProcess,
    control: ControlFn,
    dim: int,
    n: int,
    n_steps: int,
    seed: int,
) -> np.ndarray:
    """Generate n samples by Euler-Maruyama integration of the controlled
    reverse SDE dX = -u(X, t) dt + g(T - t) dW from prior draws at t = 0
    to the data side at t = T, on a uniform grid.

    ``control`` is called with forward-time arguments: control(y, s) where
    s = T - t, batched over rows. Diagnostic sampler only; first order.
    """
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    if n_steps < 10:
        raise InvalidArgumentError("n_steps must be >= 10")
    rng = make_rng(seed, "reverse-sample")
    T = proc.horizon_T
    dt = T / n_steps
    x = np.sqrt(prior_variance(proc)) * rng.standard_normal((n, dim))
    for i in range(n_steps):
        t = i * dt
        s = max(T - t, proc.s_floor)
        u = control(x, np.full(n, s))
        g = float(diffusion_coef(proc, s))
        x = x - u * dt + g * np.sqrt(dt) * rng.standard_normal((n, dim))
        if not np.all(np.isfinite(x)):
            raise DivergedSamplerError(i)
    return x
