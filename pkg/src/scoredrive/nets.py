"""Minimal feed-forward network toolkit on flat float64 parameter vectors.

Provides exact reverse-mode gradients with respect to both parameters and
inputs (verified against central finite differences in the test suite), a
bias-corrected adaptive first-order optimizer, seeded initialization, and a
self-describing binary checkpoint format with bit-exact round trips.

All arithmetic is 64-bit. Hidden activations are tanh; the output is either
identity or a scaled tanh (used to bound policy outputs to an action box).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import backend

CHECKPOINT_MAGIC = b"SDNET01\n"
CHECKPOINT_VERSION = 1

_OUT_MODES = {"identity": 0, "tanh": 1}


class CheckpointError(Exception):
    """Raised when a checkpoint file is malformed or inconsistent."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture descriptor; immutable after construction."""

    input_dim: int
    hidden: tuple[int, ...] = (256, 256)
    output_dim: int = 1
    activation: str = "tanh"
    output_activation: str = "identity"
    output_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer dims must be >= 1")
        if self.activation != "tanh":
            raise ValueError("only tanh hidden activations are supported")
        if self.output_activation not in _OUT_MODES:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.output_scale <= 0.0:
            raise ValueError("output_scale must be positive")

    @property
    def dims(self) -> np.ndarray:
        return np.asarray(
            (self.input_dim, *self.hidden, self.output_dim), dtype=np.int64
        )

    @property
    def n_params(self) -> int:
        return backend.n_params(self.dims)

    @property
    def out_mode(self) -> int:
        return _OUT_MODES[self.output_activation]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "output_activation": self.output_activation,
            "output_scale": self.output_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden=tuple(d["hidden"]),
            output_dim=int(d["output_dim"]),
            activation=d["activation"],
            output_activation=d["output_activation"],
            output_scale=float(d["output_scale"]),
        )


def layer_slices(spec: NetworkSpec) -> list[tuple[slice, slice]]:
    """(weight_slice, bias_slice) per layer into the flat parameter vector."""
    dims = spec.dims
    out = []
    off = 0
    for i in range(len(dims) - 1):
        nw = int(dims[i] * dims[i + 1])
        out.append((slice(off, off + nw), slice(off + nw, off + nw + dims[i + 1])))
        off += nw + int(dims[i + 1])
    return out


def init_params(spec: NetworkSpec, rng: np.random.Generator, zero_output_layer: bool = False) -> np.ndarray:
    """Symmetric uniform weights with variance 1/fan_in; zero biases.

    ``zero_output_layer`` zeroes the last layer so the net starts as the
    constant-zero map (used by the denoiser and the policy head).
    """
    params = np.zeros(spec.n_params, dtype=np.float64)
    slices = layer_slices(spec)
    dims = spec.dims
    for i, (ws, _) in enumerate(slices):
        if zero_output_layer and i == len(slices) - 1:
            continue
        fan_in = int(dims[i])
        bound = np.sqrt(3.0 / fan_in)
        params[ws] = rng.uniform(-bound, bound, size=ws.stop - ws.start)
    return params


def _check_input(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(
            f"input dim {x.shape[-1]} does not match spec input_dim {spec.input_dim}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    return x


def forward(spec: NetworkSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    x = _check_input(spec, x)
    out = backend.mlp_forward(
        spec.dims, params, np.ascontiguousarray(x.reshape(1, -1)), spec.out_mode, spec.output_scale
    )
    return out[0]


def forward_batch(spec: NetworkSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = _check_input(spec, x)
    return backend.mlp_forward(
        spec.dims, params, np.ascontiguousarray(x), spec.out_mode, spec.output_scale
    )


def forward_acts_batch(
    spec: NetworkSpec, params: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass that also returns the activation workspace for a later
    reverse pass via :func:`vjp_from_acts`."""
    x = _check_input(spec, x)
    acts = np.empty((x.shape[0], backend.n_units(spec.dims)), dtype=np.float64)
    out = backend.mlp_forward_acts(
        spec.dims, params, np.ascontiguousarray(x), spec.out_mode, spec.output_scale, acts
    )
    return out.copy(), acts


def vjp_from_acts(
    spec: NetworkSpec, params: np.ndarray, acts: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass over cached activations.

    Returns (parameter gradient summed over the batch, per-sample input
    gradients). ``upstream`` holds d(loss)/d(output) rows.
    """
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    return backend.mlp_vjp_from_acts(
        spec.dims, params, acts, upstream, spec.out_mode, spec.output_scale
    )


def value_and_grads_batch(
    spec: NetworkSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward plus reverse pass over a batch.

    Returns (outputs, parameter gradient summed over the batch, per-sample
    input gradients). ``upstream`` holds d(loss)/d(output) rows.
    """
    out, acts = forward_acts_batch(spec, params, x)
    grad, grad_x = vjp_from_acts(spec, params, acts, upstream)
    return out, grad, grad_x


def grad_params(spec, params, x, upstream) -> np.ndarray:
    """d(upstream . output)/d(params) for one input vector."""
    _, grad, _ = value_and_grads_batch(
        spec, params, np.reshape(x, (1, -1)), np.reshape(upstream, (1, -1))
    )
    return grad


def grad_input(spec, params, x, upstream) -> np.ndarray:
    """d(upstream . output)/d(input) for one input vector."""
    _, _, grad_x = value_and_grads_batch(
        spec, params, np.reshape(x, (1, -1)), np.reshape(upstream, (1, -1))
    )
    return grad_x[0]


@dataclass
class AdamState:
    """First/second moment accumulators plus step count for one net."""

    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float) -> "AdamState":
        return cls(lr=lr, m=np.zeros_like(params), v=np.zeros_like(params))


def adam_step(
    state: AdamState, params: np.ndarray, grad: np.ndarray, direction: str = "minimize"
) -> np.ndarray:
    """One bias-corrected adaptive update; returns the new parameter vector.

    ``direction="maximize"`` ascends instead of descending. A non-finite
    gradient skips the update and increments ``state.skipped``.
    """
    if grad.shape != params.shape:
        raise ValueError("gradient shape does not match params")
    if direction not in ("minimize", "maximize"):
        raise ValueError(f"unknown direction {direction!r}")
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        return params
    g = -grad if direction == "maximize" else grad
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def params_digest(params: np.ndarray) -> str:
    """Hex digest of the exact parameter bytes (frozen-weights assertions)."""
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(params, dtype=np.float64).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, meta JSON (spec + extra), param floats,
# then an optional optimizer-state block. All integers/floats little-endian.
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    spec: NetworkSpec,
    params: np.ndarray,
    extra: dict | None = None,
    opt_state: AdamState | None = None,
) -> None:
    meta = {"spec": spec.to_dict(), "extra": extra or {}}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = np.ascontiguousarray(params, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<Q", params.shape[0]))
        f.write(params.astype("<f8").tobytes())
        if opt_state is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(
                struct.pack(
                    "<QQdddd",
                    opt_state.step,
                    opt_state.skipped,
                    opt_state.lr,
                    opt_state.beta1,
                    opt_state.beta2,
                    opt_state.eps,
                )
            )
            f.write(opt_state.m.astype("<f8").tobytes())
            f.write(opt_state.v.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[NetworkSpec, np.ndarray, dict, AdamState | None]:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes: not a network checkpoint")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<Q", take(8, "meta length"))
    try:
        meta = json.loads(take(meta_len, "meta json").decode("utf-8"))
        spec = NetworkSpec.from_dict(meta["spec"])
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"invalid checkpoint metadata: {e}") from e
    (n,) = struct.unpack("<Q", take(8, "param count"))
    if n != spec.n_params:
        raise CheckpointError(
            f"param count {n} does not match spec ({spec.n_params})"
        )
    params = np.frombuffer(take(8 * n, "params"), dtype="<f8").copy()
    (has_opt,) = struct.unpack("<B", take(1, "optimizer flag"))
    opt_state = None
    if has_opt:
        step, skipped, lr, b1, b2, eps = struct.unpack(
            "<QQdddd", take(48, "optimizer header")
        )
        m = np.frombuffer(take(8 * n, "optimizer m"), dtype="<f8").copy()
        v = np.frombuffer(take(8 * n, "optimizer v"), dtype="<f8").copy()
        opt_state = AdamState(
            lr=lr, m=m, v=v, step=step, beta1=b1, beta2=b2, eps=eps, skipped=skipped
        )
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return spec, params, meta["extra"], opt_state
