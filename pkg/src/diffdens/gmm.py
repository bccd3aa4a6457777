"""Gaussian mixtures with diagonal covariances.

Ground-truth distributions for the benchmarks: exact log-densities (the
reference for KL evaluation), exact sampling, and a seeded generator for
reproducible benchmark mixtures. Full covariance matrices are intentionally
unsupported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, SchemaError
from .rng import make_rng

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianComponent:
    """One mixture component: weight, mean vector, diagonal covariance."""

    weight: float
    mean: np.ndarray
    cov_diag: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov_diag", np.asarray(self.cov_diag, dtype=float))
        if not (0.0 < self.weight <= 1.0):
            raise InvalidArgumentError(f"component weight {self.weight} not in (0, 1]")
        if self.mean.ndim != 1 or self.cov_diag.ndim != 1:
            raise InvalidArgumentError("mean and cov_diag must be 1-D")
        if self.mean.shape != self.cov_diag.shape:
            raise InvalidArgumentError(
                f"mean length {self.mean.size} != cov_diag length {self.cov_diag.size}"
            )
        if self.mean.size < 1:
            raise InvalidArgumentError("component dimension must be >= 1")
        if not np.all(self.cov_diag > 0):
            raise InvalidArgumentError("all cov_diag entries must be > 0")


@dataclass(frozen=True)
class GaussianMixture:
    """Ordered list of components sharing one dimension; weights sum to 1."""

    components: tuple[GaussianComponent, ...]
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if len(self.components) == 0:
            raise InvalidArgumentError("mixture needs at least one component")
        for k, c in enumerate(self.components):
            if c.mean.size != self.dim:
                raise InvalidArgumentError(
                    f"component {k} has dim {c.mean.size}, mixture has dim {self.dim}"
                )
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise InvalidArgumentError(f"weights sum to {total!r}, expected 1")

    # Stacked parameter views used by the vectorized math below.
    def _stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        w = np.array([c.weight for c in self.components])
        mu = np.stack([c.mean for c in self.components])
        var = np.stack([c.cov_diag for c in self.components])
        return w, mu, var


def gmm_log_density(mix: GaussianMixture, x: np.ndarray) -> float | np.ndarray:
    """Exact mixture log-density, in nats.

    Accepts a single point of shape (D,) or a batch of shape (n, D); returns
    a scalar or an (n,) array accordingly. Uses a log-sum-exp reduction over
    components so tail points do not underflow.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    if pts.ndim != 2 or pts.shape[1] != mix.dim:
        raise InvalidArgumentError(
            f"point dimension {x.shape[-1] if x.ndim else 0} != mixture dim {mix.dim}"
        )
    w, mu, var = mix._stacked()
    diff = pts[:, None, :] - mu[None, :, :]  # (n, K, D)
    maha = np.sum(diff * diff / var[None, :, :], axis=-1)  # (n, K)
    log_norm = -0.5 * (mix.dim * _LOG_2PI + np.sum(np.log(var), axis=-1))  # (K,)
    log_comp = np.log(w)[None, :] + log_norm[None, :] - 0.5 * maha
    # log-sum-exp over components
    m = np.max(log_comp, axis=1, keepdims=True)
    out = m[:, 0] + np.log(np.sum(np.exp(log_comp - m), axis=1))
    return float(out[0]) if single else out


def gmm_score(mix: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Gradient of the mixture log-density, via analytic responsibilities."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    w, mu, var = mix._stacked()
    diff = pts[:, None, :] - mu[None, :, :]
    maha = np.sum(diff * diff / var[None, :, :], axis=-1)
    log_norm = -0.5 * (mix.dim * _LOG_2PI + np.sum(np.log(var), axis=-1))
    log_comp = np.log(w)[None, :] + log_norm[None, :] - 0.5 * maha
    m = np.max(log_comp, axis=1, keepdims=True)
    resp = np.exp(log_comp - m)
    resp /= np.sum(resp, axis=1, keepdims=True)  # (n, K)
    comp_score = -diff / var[None, :, :]  # (n, K, D)
    out = np.sum(resp[:, :, None] * comp_score, axis=1)
    return out[0] if single else out


def gmm_sample(mix: GaussianMixture, n: int, seed: int) -> np.ndarray:
    """Draw n exact samples; identical (mix, n, seed) gives identical output."""
    if n < 1:
        raise InvalidArgumentError(f"sample count must be >= 1, got {n}")
    rng = make_rng(seed)
    w, mu, var = mix._stacked()
    idx = rng.choice(len(w), size=n, p=w / w.sum())
    z = rng.standard_normal((n, mix.dim))
    return mu[idx] + np.sqrt(var[idx]) * z


def benchmark_mixture(
    dim: int,
    n_components: int = 6,
    seed: int = 2024,
    half_width: float = 2.5,
    comp_std: float = 0.6,
    center: float = 0.0,
) -> GaussianMixture:
    """Seeded benchmark mixture: equal weights, isotropic equal variances,
    means drawn once from the uniform box center +- half_width per axis.

    The layout is a recorded convention of this project, not a claim about
    any external dataset; configs echo all six arguments.
    """
    rng = make_rng(seed, "benchmark-mixture", dim, n_components)
    means = center + rng.uniform(-half_width, half_width, size=(n_components, dim))
    comps = tuple(
        GaussianComponent(
            weight=1.0 / n_components,
            mean=means[k],
            cov_diag=np.full(dim, comp_std**2),
        )
        for k in range(n_components)
    )
    return GaussianMixture(components=comps, dim=dim)


# ---------------------------------------------------------------------------
# JSON spec files
# ---------------------------------------------------------------------------

def mixture_to_dict(mix: GaussianMixture) -> dict:
    return {
        "dim": mix.dim,
        "components": [
            {
                "weight": c.weight,
                "mean": c.mean.tolist(),
                "cov_diag": c.cov_diag.tolist(),
            }
            for c in mix.components
        ],
    }


def mixture_from_dict(obj: dict, where: str = "$") -> GaussianMixture:
    """Build a mixture from a parsed JSON object, reporting the offending
    field path on schema errors."""
    if not isinstance(obj, dict):
        raise SchemaError("mixture spec must be a JSON object", where)
    if "dim" not in obj:
        raise SchemaError("missing field 'dim'", f"{where}.dim")
    if not isinstance(obj["dim"], int) or obj["dim"] < 1:
        raise SchemaError("'dim' must be a positive integer", f"{where}.dim")
    comps = obj.get("components")
    if not isinstance(comps, list) or not comps:
        raise SchemaError("'components' must be a non-empty list", f"{where}.components")
    out = []
    for k, c in enumerate(comps):
        path = f"{where}.components[{k}]"
        if not isinstance(c, dict):
            raise SchemaError("component must be an object", path)
        for field in ("weight", "mean", "cov_diag"):
            if field not in c:
                raise SchemaError(f"missing field '{field}'", f"{path}.{field}")
        try:
            comp = GaussianComponent(
                weight=float(c["weight"]),
                mean=np.asarray(c["mean"], dtype=float),
                cov_diag=np.asarray(c["cov_diag"], dtype=float),
            )
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc), path) from exc
        out.append(comp)
    try:
        return GaussianMixture(components=tuple(out), dim=obj["dim"])
    except InvalidArgumentError as exc:
        raise SchemaError(str(exc), where) from exc


def load_mixture(path: str | Path) -> GaussianMixture:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc}", str(path)) from exc
    return mixture_from_dict(obj, where=str(path))


def save_mixture(mix: GaussianMixture, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(mixture_to_dict(mix), fh, indent=2)
        fh.write("\n")
