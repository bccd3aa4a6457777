"""Simulation-free training of score / entropy-matching models.

Each training epoch projects every data sample to n_throws random instants
of the forward process with the closed-form Gaussian kernel (one step, no
SDE simulation) and regresses the network on the kernel-conditional target.
The squared-error rows are weighted by sigma^2(s) times the length of the
sampled time interval, so the epoch mean is a Monte-Carlo estimate of the
weighted time integral of the denoising objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import DivergedTrainingError, InvalidArgumentError
from .rng import make_rng
from .sde import DiffusionProcess, drift, diffusion_coef, kernel_score, transition, process_from_dict

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    n_samples: int
    n_throws: int
    n_epochs: int
    process: DiffusionProcess
    objective: str = "sm"              # "sm" | "em"
    batch_size: int = 512
    learning_rate: float = 1e-3
    seed: int = 0
    s_min: float = 1e-3
    stratified_times: bool = True      # False = plain uniform draws
    n_features: int = 32
    hidden: tuple[int, ...] = (128, 128)
    x_bandwidth: float = 1.0
    t_bandwidth: float = 30.0

    def __post_init__(self):
        for name in ("n_samples", "n_throws", "n_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if not (0.0 < self.s_min < self.process.horizon_T):
            raise InvalidArgumentError("s_min must lie in (0, T)")
        if self.objective not in ("sm", "em"):
            raise InvalidArgumentError(f"objective must be 'sm' or 'em', got {self.objective!r}")

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_throws": self.n_throws,
            "n_epochs": self.n_epochs,
            "process": self.process.to_dict(),
            "objective": self.objective,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "s_min": self.s_min,
            "stratified_times": self.stratified_times,
            "n_features": self.n_features,
            "hidden": list(self.hidden),
            "x_bandwidth": self.x_bandwidth,
            "t_bandwidth": self.t_bandwidth,
        }


def train_config_from_dict(obj: dict) -> TrainConfig:
    proc = process_from_dict(obj.get("process", {"kind": "vp"}))
    kwargs = {k: obj[k] for k in (
        "n_samples", "n_throws", "n_epochs", "objective", "batch_size",
        "learning_rate", "seed", "s_min", "stratified_times", "n_features",
        "x_bandwidth", "t_bandwidth",
    ) if k in obj}
    if "hidden" in obj:
        kwargs["hidden"] = tuple(obj["hidden"])
    return TrainConfig(process=proc, **kwargs)


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    mean_loss: float
    wall_time: float


def denoising_target(
    objective: str, proc: DiffusionProcess, y0: np.ndarray, y_s: np.ndarray, s
) -> np.ndarray:
    """Regression target at one kernel throw.

    sm: the kernel score itself.
    em: kernel score minus 2 b(y_s, s) / sigma^2(s); with zero forward
        drift the two coincide exactly (same code path, literal zero).
    """
    target = kernel_score(proc, y_s, y0, s)
    if objective == "em":
        g2 = np.asarray(diffusion_coef(proc, s), dtype=float) ** 2
        if np.ndim(g2) == 1 and np.ndim(target) == 2:
            g2 = g2[:, None]
        target = target - 2.0 * drift(proc, y_s, s) / g2
    elif objective != "sm":
        raise InvalidArgumentError(f"unknown objective {objective!r}")
    return target


def loss_weight(cfg: TrainConfig, s) -> np.ndarray:
    """Per-row weight sigma^2(s) (T - s_min): the squared diffusion
    coefficient from the denoising objectives times the measure of the
    sampled time interval."""
    g2 = np.asarray(diffusion_coef(cfg.process, s), dtype=float) ** 2
    return g2 * (cfg.process.horizon_T - cfg.s_min)


def _loss_rows(
    params: nn.MlpParams,
    cfg: TrainConfig,
    y0_rows: np.ndarray,
    s_rows: np.ndarray,
    z_rows: np.ndarray,
) -> tuple[float, list[list[np.ndarray]]]:
    """Weighted half-squared-error loss and parameter gradients for a block
    of (sample, throw) rows with pre-drawn times and kernel noise."""
    k = transition(cfg.process, s_rows)
    y_s = k.mean_coef[:, None] * y0_rows + k.std[:, None] * z_rows
    target = denoising_target(cfg.objective, cfg.process, y0_rows, y_s, s_rows)
    w = loss_weight(cfg, s_rows)
    if isinstance(params, nn.MlpParams):
        out, tape = nn.forward_batch(params, y_s, s_rows, tape=True)
        resid = out - target
        dout = (w[:, None] * resid) / len(s_rows)
        grads, _ = nn._backward(params, tape, dout, want_params=True, want_input=False)
    else:  # analytic stub: loss value only, no parameters to differentiate
        resid = params(y_s, s_rows) - target
        grads = []
    loss = float(np.mean(w * 0.5 * np.sum(resid * resid, axis=1)))
    return loss, grads


def _draw_throw_times(cfg: TrainConfig, rng: np.random.Generator, n_rows: int) -> np.ndarray:
    """Times for one sample's throws laid out contiguously; stratified draws
    place one uniform point per stratum of width (T - s_min) / n_throws."""
    T, lo, nt = cfg.process.horizon_T, cfg.s_min, cfg.n_throws
    u = rng.random((n_rows, nt))
    if cfg.stratified_times:
        u = (np.arange(nt)[None, :] + u) / nt
    return (lo + (T - lo) * u).ravel()


def loss_minibatch(
    params: nn.MlpParams,
    cfg: TrainConfig,
    y0_batch: np.ndarray,
    epoch_seed: int,
) -> tuple[float, list[list[np.ndarray]]]:
    """Monte-Carlo loss over a batch of data points: n_throws fresh
    (time, kernel draw) pairs per point, all drawn from epoch_seed."""
    y0_batch = np.asarray(y0_batch, dtype=float)
    if y0_batch.ndim != 2 or y0_batch.shape[0] == 0:
        raise InvalidArgumentError("y0_batch must be a non-empty (n, D) matrix")
    rng = make_rng(epoch_seed, "minibatch")
    n, d = y0_batch.shape
    s_rows = _draw_throw_times(cfg, rng, n)
    z_rows = rng.standard_normal((n * cfg.n_throws, d))
    y0_rows = np.repeat(y0_batch, cfg.n_throws, axis=0)
    loss, grads = _loss_rows(params, cfg, y0_rows, s_rows, z_rows)
    if not np.isfinite(loss):
        raise DivergedTrainingError(epoch=-1, batch=-1)
    return loss, grads


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1 - ADAM_BETA2) * grad * grad
        mhat = self.m / (1 - ADAM_BETA1**self.t)
        vhat = self.v / (1 - ADAM_BETA2**self.t)
        return theta - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def train(cfg: TrainConfig, data: np.ndarray) -> tuple[nn.MlpParams, list[LossRecord]]:
    """Fixed-budget first-order training; deterministic per cfg.seed.

    Every epoch re-draws n_throws (time, noise) pairs per sample, shuffles
    the (sample, throw) rows, and runs Adam over minibatches of rows.
    """
    data = np.asarray(data, dtype=float)
    if data.size == 0:
        raise InvalidArgumentError("training data is empty")
    if data.ndim != 2 or data.shape[0] != cfg.n_samples:
        raise InvalidArgumentError(
            f"data shape {data.shape} does not match n_samples {cfg.n_samples}"
        )
    n, dim = data.shape
    params = nn.init_params(
        dim,
        cfg.seed,
        n_features=cfg.n_features,
        hidden=cfg.hidden,
        x_bandwidth=cfg.x_bandwidth,
        t_bandwidth=cfg.t_bandwidth,
        horizon=cfg.process.horizon_T,
    )
    theta = nn.trainable_to_vec(params.layers)
    adam = _AdamState(m=np.zeros_like(theta), v=np.zeros_like(theta))
    sample_idx = np.repeat(np.arange(n), cfg.n_throws)
    history: list[LossRecord] = []
    for epoch in range(cfg.n_epochs):
        t0 = time.perf_counter()
        rng = make_rng(cfg.seed, "epoch", epoch)
        s_flat = _draw_throw_times(cfg, rng, n)
        z_flat = rng.standard_normal((n * cfg.n_throws, dim))
        order = rng.permutation(n * cfg.n_throws)
        total, rows_seen = 0.0, 0
        for b0 in range(0, len(order), cfg.batch_size):
            sel = order[b0 : b0 + cfg.batch_size]
            loss, grads = _loss_rows(
                params, cfg, data[sample_idx[sel]], s_flat[sel], z_flat[sel]
            )
            if not np.isfinite(loss):
                raise DivergedTrainingError(epoch=epoch, batch=b0 // cfg.batch_size)
            theta = adam.step(theta, nn.trainable_to_vec(grads), cfg.learning_rate)
            nn.vec_to_trainable(theta, params.layers)
            total += loss * len(sel)
            rows_seen += len(sel)
        history.append(
            LossRecord(epoch=epoch, mean_loss=total / rows_seen,
                       wall_time=time.perf_counter() - t0)
        )
    return params, history


def save_loss_history(path, history: list[LossRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss,wall_time_s\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.mean_loss:.10g},{rec.wall_time:.6f}\n")
