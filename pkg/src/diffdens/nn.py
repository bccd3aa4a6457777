"""Small MLP with frozen random-feature embeddings and hand-written
reverse-mode differentiation.

The network maps (x, s) -> R^D and is used either as a score model or as an
entropy-matching residual model; nothing in this module depends on that
choice. Inputs are embedded with frozen Gaussian random features,
[sin, cos] of random projections of x and of the scaled time s / horizon,
then passed through a dense stack with a smooth gated activation
(silu: z * sigmoid(z)) and a zero-initialised linear output layer.

Reverse mode is explicit: a Tape records one forward pass and the two
backward passes (parameter gradients for training, input gradients for the
trace estimator) reuse it. No autodiff framework is involved, which keeps
the batched vector-Jacobian product for the divergence estimator a handful
of matrix multiplies.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError, SchemaError
from .rng import make_rng
from .sde import DiffusionProcess, process_from_dict

CHECKPOINT_MAGIC = b"DDE1"

# A "field" everywhere below is either MlpParams or a plain callable
# (X, s) -> values, batched over rows; callables serve as analytic stubs.
FieldFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class MlpParams:
    """Network parameters. ``layers`` holds the trainable dense stack
    (hidden layers then the output layer); the feature matrices are frozen
    and never touched by training.
    """

    x_w: np.ndarray                 # (D, F) frozen random projections of x
    x_scale: np.ndarray             # (F,) frozen per-feature scale
    t_w: np.ndarray                 # (1, F) frozen random projections of s
    layers: list[list[np.ndarray]]  # [[W, b], ...], output layer last
    horizon: float                  # network sees s / horizon in [0, 1]
    activation: str = "silu"

    def __post_init__(self):
        if self.activation != "silu":
            raise InvalidArgumentError(f"unsupported activation {self.activation!r}")
        width = 4 * self.x_w.shape[1]
        for k, (w, b) in enumerate(self.layers):
            if w.shape[0] != width or w.shape[1] != b.shape[0]:
                raise InvalidArgumentError(
                    f"layer {k} shape {w.shape} does not chain from width {width}"
                )
            width = w.shape[1]
        if width != self.dim:
            raise InvalidArgumentError("output layer width must equal input dim")

    @property
    def dim(self) -> int:
        return self.x_w.shape[0]

    @property
    def n_features(self) -> int:
        return self.x_w.shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            x_w=self.x_w.copy(),
            x_scale=self.x_scale.copy(),
            t_w=self.t_w.copy(),
            layers=[[w.copy(), b.copy()] for w, b in self.layers],
            horizon=self.horizon,
            activation=self.activation,
        )


def init_params(
    dim: int,
    seed: int,
    n_features: int = 32,
    hidden: Sequence[int] = (128, 128),
    x_bandwidth: float = 1.0,
    t_bandwidth: float = 30.0,
    horizon: float = 1.0,
) -> MlpParams:
    """Fresh parameters: He-initialised hidden layers, zero output layer,
    frozen N(0, 1) feature projections scaled by the two bandwidths."""
    rng = make_rng(seed, "mlp-init")
    # unit-variance projections regardless of dim keep the sin/cos phases
    # in a comparable range across experiments
    x_w = rng.standard_normal((dim, n_features)) / np.sqrt(dim)
    x_scale = np.full(n_features, float(x_bandwidth))
    t_w = rng.standard_normal((1, n_features)) * t_bandwidth
    widths = [4 * n_features, *hidden, dim]
    layers: list[list[np.ndarray]] = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:-1]):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append([w, np.zeros(fan_out)])
    layers.append([np.zeros((widths[-2], widths[-1])), np.zeros(widths[-1])])
    return MlpParams(x_w=x_w, x_scale=x_scale, t_w=t_w, layers=layers, horizon=horizon)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Recorded intermediates of one batched forward pass."""

    u: np.ndarray                    # (n, F) x-projection pre-sin/cos
    hs: list[np.ndarray] = field(default_factory=list)   # activations, h0 first
    pre: list[np.ndarray] = field(default_factory=list)  # hidden pre-activations
    sig: list[np.ndarray] = field(default_factory=list)  # cached gate values


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # clip keeps exp in range; the gate saturates well before +-60 anyway
    return 1.0 / (1.0 + np.exp(-np.clip(a, -60.0, 60.0)))


def _silu_grad(a: np.ndarray, sig: np.ndarray) -> np.ndarray:
    return sig * (1.0 + a * (1.0 - sig))


def _as_batch(x: np.ndarray, s) -> tuple[np.ndarray, np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    s_arr = np.broadcast_to(np.asarray(s, dtype=float), (X.shape[0],))
    return X, s_arr, single


def forward_batch(
    params: MlpParams, X: np.ndarray, s_arr: np.ndarray, tape: bool = False
) -> tuple[np.ndarray, Tape | None]:
    """Evaluate the network on a batch of rows with per-row times."""
    if X.ndim != 2 or X.shape[1] != params.dim:
        raise InvalidArgumentError(
            f"input shape {X.shape} incompatible with dim {params.dim}"
        )
    u = (X @ params.x_w) * params.x_scale
    v = (s_arr / params.horizon)[:, None] * params.t_w[0][None, :]
    h = np.concatenate([np.sin(u), np.cos(u), np.sin(v), np.cos(v)], axis=1)
    rec = Tape(u=u) if tape else None
    if rec is not None:
        rec.hs.append(h)
    for w, b in params.layers[:-1]:
        a = h @ w + b
        sig = _sigmoid(a)
        h = a * sig
        if rec is not None:
            rec.pre.append(a)
            rec.sig.append(sig)
            rec.hs.append(h)
    w_out, b_out = params.layers[-1]
    out = h @ w_out + b_out
    return out, rec


def forward(params: MlpParams, x: np.ndarray, s) -> np.ndarray:
    """Single-point evaluation; see forward_batch."""
    X, s_arr, single = _as_batch(x, s)
    out, _ = forward_batch(params, X, s_arr)
    return out[0] if single else out


def _backward(
    params: MlpParams,
    tape: Tape,
    dout: np.ndarray,
    want_params: bool,
    want_input: bool,
) -> tuple[list[list[np.ndarray]] | None, np.ndarray | None]:
    """Shared reverse pass. ``dout`` is (n, D); parameter gradients are
    summed over the batch, input gradients returned per row."""
    grads: list[list[np.ndarray]] | None = [] if want_params else None
    w_out, _ = params.layers[-1]
    if grads is not None:
        grads.append([tape.hs[-1].T @ dout, dout.sum(axis=0)])
    dh = dout @ w_out.T
    for k in range(len(params.layers) - 2, -1, -1):
        da = dh * _silu_grad(tape.pre[k], tape.sig[k])
        if grads is not None:
            grads.append([tape.hs[k].T @ da, da.sum(axis=0)])
        dh = da @ params.layers[k][0].T
    if grads is not None:
        grads.reverse()
    dx = None
    if want_input:
        f = params.n_features
        # embedding block layout: [sin u, cos u, sin v, cos v]
        du = dh[:, :f] * np.cos(tape.u) - dh[:, f : 2 * f] * np.sin(tape.u)
        dx = (du * params.x_scale) @ params.x_w.T
    return grads, dx


def grad_params(
    params: MlpParams, x: np.ndarray, s, upstream: np.ndarray
) -> list[list[np.ndarray]]:
    """d(upstream . forward)/d theta by reverse accumulation."""
    upstream = np.asarray(upstream, dtype=float)
    if not np.all(np.isfinite(upstream)):
        raise InvalidArgumentError("upstream vector must be finite")
    X, s_arr, single = _as_batch(x, s)
    dout = upstream[None, :] if single else upstream
    if dout.shape != X.shape[:1] + (params.dim,):
        raise InvalidArgumentError("upstream shape must match output shape")
    _, tape = forward_batch(params, X, s_arr, tape=True)
    grads, _ = _backward(params, tape, dout, want_params=True, want_input=False)
    return grads


def grad_input_dot(params: MlpParams, x: np.ndarray, s, eps: np.ndarray) -> np.ndarray:
    """grad_x (eps . forward(params, x, s)) by reverse accumulation through
    the x embedding."""
    eps = np.asarray(eps, dtype=float)
    if not np.all(np.isfinite(eps)):
        raise InvalidArgumentError("eps must be finite")
    X, s_arr, single = _as_batch(x, s)
    dout = eps[None, :] if single else eps
    if dout.shape[-1] != params.dim:
        raise InvalidArgumentError("eps length must equal dim")
    _, tape = forward_batch(params, X, s_arr, tape=True)
    _, dx = _backward(params, tape, dout, want_params=False, want_input=True)
    return dx[0] if single else dx


@dataclass
class StubField:
    """Analytic stand-in for the network: a value function plus its
    vector-Jacobian product, both batched over rows (test/oracle hook)."""

    fn: FieldFn
    vjp: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, X: np.ndarray, s_arr: np.ndarray) -> np.ndarray:
        return self.fn(X, s_arr)


def apply_field(net: MlpParams | FieldFn, X: np.ndarray, s_arr: np.ndarray) -> np.ndarray:
    """Evaluate a network or analytic stub on a batch."""
    if isinstance(net, MlpParams):
        out, _ = forward_batch(net, X, s_arr)
        return out
    return net(X, s_arr)


def field_input_vjp(
    net: MlpParams | StubField | Callable,
    X: np.ndarray,
    s_arr: np.ndarray,
    dout: np.ndarray,
) -> np.ndarray:
    """Per-row input gradient of row-wise dot(dout, net): the batched
    vector-Jacobian product. Bare callables are taken to be the VJP itself,
    (X, s, dout) -> dX."""
    if isinstance(net, MlpParams):
        _, tape = forward_batch(net, X, s_arr, tape=True)
        _, dx = _backward(net, tape, dout, want_params=False, want_input=True)
        return dx
    if isinstance(net, StubField):
        return net.vjp(X, s_arr, dout)
    return net(X, s_arr, dout)


def batched_eps_divergence(
    net: MlpParams | Callable,
    x: np.ndarray,
    s: float,
    n_eps: int,
    noise: str = "rademacher",
    seed: int = 0,
) -> float:
    """Randomised divergence estimate of the field at one point.

    Replicates x across an n_eps batch, draws one probe vector per row and
    contracts (1/n_eps) sum_mu eps_mu . grad_x(eps_mu . net) with a single
    fused backward pass over the batch. Probe vectors have zero mean and
    unit per-coordinate variance (gaussian or rademacher).
    """
    if n_eps < 1:
        raise InvalidArgumentError("n_eps must be >= 1")
    x = np.asarray(x, dtype=float)
    eps = draw_probes(len(x), n_eps, noise, seed)
    X = np.broadcast_to(x, (n_eps, len(x))).copy()
    s_arr = np.full(n_eps, float(s))
    dx = field_input_vjp(net, X, s_arr, eps)
    return float(np.sum(eps * dx) / n_eps)


def draw_probes(dim: int, n_eps: int, noise: str, seed: int) -> np.ndarray:
    rng = make_rng(seed, "trace-probes")
    if noise == "gaussian":
        return rng.standard_normal((n_eps, dim))
    if noise == "rademacher":
        return rng.integers(0, 2, size=(n_eps, dim)).astype(float) * 2.0 - 1.0
    raise InvalidArgumentError(f"unknown probe noise {noise!r}")


# ---------------------------------------------------------------------------
# Flat parameter vector (optimiser interface)
# ---------------------------------------------------------------------------

def trainable_to_vec(layers: list[list[np.ndarray]]) -> np.ndarray:
    return np.concatenate([a.ravel() for pair in layers for a in pair])


def vec_to_trainable(vec: np.ndarray, layers: list[list[np.ndarray]]) -> None:
    """Scatter a flat vector back into the layer arrays, in place."""
    off = 0
    for pair in layers:
        for i, a in enumerate(pair):
            pair[i][...] = vec[off : off + a.size].reshape(a.shape)
            off += a.size
    if off != vec.size:
        raise InvalidArgumentError("flat vector length does not match layers")


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------
#
# Layout (versioned by the magic):
#   bytes 0-3   magic "DDE1"
#   bytes 4-7   uint32 little-endian header length L
#   bytes 8-..  L bytes of UTF-8 JSON header:
#               {"kind": "sm"|"em", "process": {...}, "dim": D,
#                "n_features": F, "hidden": [..], "horizon": T,
#                "activation": "silu"}
#   then row-major float64 little-endian arrays, in declaration order:
#               x_w (D,F), x_scale (F,), t_w (1,F),
#               then per layer: W (fan_in, fan_out), b (fan_out,)

def save_checkpoint(
    path: str | Path,
    params: MlpParams,
    objective: str,
    process: DiffusionProcess,
) -> None:
    if objective not in ("sm", "em"):
        raise InvalidArgumentError(f"objective must be 'sm' or 'em', got {objective!r}")
    header = {
        "kind": objective,
        "process": process.to_dict(),
        "dim": params.dim,
        "n_features": params.n_features,
        "hidden": [int(w.shape[1]) for w, _ in params.layers[:-1]],
        "horizon": params.horizon,
        "activation": params.activation,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for arr in _array_order(params):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[MlpParams, str, DiffusionProcess]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise SchemaError("bad checkpoint magic", str(path))
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode())
    proc = process_from_dict(header["process"], where=f"{path}:header.process")
    dim, f = header["dim"], header["n_features"]
    widths = [4 * f, *header["hidden"], dim]
    params = MlpParams(
        x_w=np.zeros((dim, f)),
        x_scale=np.zeros(f),
        t_w=np.zeros((1, f)),
        layers=[
            [np.zeros((a, b)), np.zeros(b)] for a, b in zip(widths[:-1], widths[1:])
        ],
        horizon=float(header["horizon"]),
        activation=header.get("activation", "silu"),
    )
    off = 8 + hlen
    for arr in _array_order(params):
        n = arr.size * 8
        if off + n > len(raw):
            raise SchemaError("checkpoint truncated", str(path))
        arr[...] = np.frombuffer(raw[off : off + n], dtype="<f8").reshape(arr.shape)
        off += n
    if off != len(raw):
        raise SchemaError("trailing bytes after arrays", str(path))
    return params, header["kind"], proc


def _array_order(params: MlpParams):
    yield params.x_w
    yield params.x_scale
    yield params.t_w
    for w, b in params.layers:
        yield w
        yield b
