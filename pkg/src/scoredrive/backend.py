"""Hot numeric kernels with optional numba JIT compilation.

Every kernel exists in two functionally identical flavours: the plain numpy
implementation (suffix ``_np``) and, when numba is importable, a JIT-compiled
version of the same source. The active flavour is chosen once at import time:
set ``SCOREDRIVE_NUMBA=0`` in the environment to force the pure-numpy path.
``benchmarks/bench_backends.py`` times both flavours side by side.

Kernel conventions:
  * MLP parameters live in one flat float64 vector; ``dims`` is an int64
    array ``[d0, d1, ..., dL]`` and the layout is W0 (d0 x d1, row-major),
    b0, W1, b1, ... in order.
  * Hidden activations are tanh. ``out_mode`` 0 is identity output,
    1 is ``out_scale * tanh``.
  * Batched gradients are summed over the batch, not averaged.
"""

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_FLAG = os.environ.get("SCOREDRIVE_NUMBA", "1").strip().lower()
USE_NUMBA = HAS_NUMBA and _FLAG not in ("0", "false", "no", "off")


def n_params(dims):
    """Total parameter count for the layer width list ``dims``."""
    dims = np.asarray(dims, dtype=np.int64)
    total = 0
    for i in range(len(dims) - 1):
        total += int(dims[i]) * int(dims[i + 1]) + int(dims[i + 1])
    return total


def n_units(dims):
    """Total activation slots (sum of layer widths, input included)."""
    return int(np.sum(np.asarray(dims, dtype=np.int64)))


# ---------------------------------------------------------------------------
# kernel sources (numba-compatible numpy code; compiled below when enabled)
# ---------------------------------------------------------------------------


def _mlp_forward(dims, params, x, out_mode, out_scale):
    n_layers = dims.shape[0] - 1
    h = x
    off = 0
    for i in range(n_layers):
        d_in = dims[i]
        d_out = dims[i + 1]
        w = params[off : off + d_in * d_out].reshape(d_in, d_out)
        off += d_in * d_out
        b = params[off : off + d_out]
        off += d_out
        z = np.dot(h, w) + b
        if i < n_layers - 1:
            h = np.tanh(z)
        elif out_mode == 1:
            h = out_scale * np.tanh(z)
        else:
            h = z
    return h


def _mlp_forward_acts(dims, params, x, out_mode, out_scale, acts):
    # acts: (batch, sum(dims)) workspace; layer i occupies its dims[i] slice.
    n_layers = dims.shape[0] - 1
    acts[:, : dims[0]] = x
    off = 0
    a_lo = 0
    for i in range(n_layers):
        d_in = dims[i]
        d_out = dims[i + 1]
        w = params[off : off + d_in * d_out].reshape(d_in, d_out)
        off += d_in * d_out
        b = params[off : off + d_out]
        off += d_out
        h = acts[:, a_lo : a_lo + d_in]
        z = np.dot(np.ascontiguousarray(h), w) + b
        a_lo += d_in
        if i < n_layers - 1:
            acts[:, a_lo : a_lo + d_out] = np.tanh(z)
        elif out_mode == 1:
            acts[:, a_lo : a_lo + d_out] = out_scale * np.tanh(z)
        else:
            acts[:, a_lo : a_lo + d_out] = z
    return acts[:, a_lo : a_lo + dims[n_layers]]


def _mlp_vjp_from_acts(dims, params, acts, upstream, out_mode, out_scale):
    # Reverse pass given cached activations. Returns (param grads summed over
    # the batch, gradient w.r.t. the input block of acts).
    n_layers = dims.shape[0] - 1
    grad = np.zeros(params.shape[0], dtype=np.float64)

    out_dim = dims[n_layers]
    a_hi = 0
    for i in range(n_layers + 1):
        a_hi += dims[i]
    out_act = acts[:, a_hi - out_dim : a_hi]

    if out_mode == 1:
        delta = upstream * (out_scale - out_act * out_act / out_scale)
    else:
        delta = upstream.copy()

    w_off = params.shape[0]
    a_lo = a_hi - out_dim
    for i in range(n_layers - 1, -1, -1):
        d_in = dims[i]
        d_out = dims[i + 1]
        w_off -= d_in * d_out + d_out
        w = params[w_off : w_off + d_in * d_out].reshape(d_in, d_out)
        a_lo -= d_in
        a_prev = np.ascontiguousarray(acts[:, a_lo : a_lo + d_in])
        grad[w_off : w_off + d_in * d_out] = np.dot(a_prev.T, delta).ravel()
        gb = grad[w_off + d_in * d_out : w_off + d_in * d_out + d_out]
        for r in range(delta.shape[0]):
            gb += delta[r]
        back = np.dot(delta, np.ascontiguousarray(w.T))
        if i > 0:
            delta = back * (1.0 - a_prev * a_prev)
        else:
            delta = back
    return grad, delta


def _bicycle_rollout(x, y, heading, speed, accels, steers, dt, wheelbase, v_max):
    # Semi-implicit step: update speed first, then advance along the exact
    # constant-curvature arc for the step. Exact for piecewise-constant
    # controls, which makes the circular-arc oracle hold at any dt.
    h = accels.shape[0]
    out = np.empty((h, 4), dtype=np.float64)
    for k in range(h):
        speed = speed + accels[k] * dt
        if speed < 0.0:
            speed = 0.0
        elif speed > v_max:
            speed = v_max
        omega = speed * np.tan(steers[k]) / wheelbase
        if np.abs(omega) > 1e-12:
            new_heading = heading + omega * dt
            radius = speed / omega
            x = x + radius * (np.sin(new_heading) - np.sin(heading))
            y = y - radius * (np.cos(new_heading) - np.cos(heading))
            heading = new_heading
        else:
            x = x + speed * np.cos(heading) * dt
            y = y + speed * np.sin(heading) * dt
        # wrap to (-pi, pi]
        heading = (heading + np.pi) % (2.0 * np.pi) - np.pi
        if heading <= -np.pi:
            heading = np.pi
        out[k, 0] = x
        out[k, 1] = y
        out[k, 2] = heading
        out[k, 3] = speed
    return out


# numpy flavours (always available)
mlp_forward_np = _mlp_forward
mlp_forward_acts_np = _mlp_forward_acts
mlp_vjp_from_acts_np = _mlp_vjp_from_acts
bicycle_rollout_np = _bicycle_rollout

if HAS_NUMBA:
    _jit = numba.njit(cache=True)
    mlp_forward_nb = _jit(_mlp_forward)
    mlp_forward_acts_nb = _jit(_mlp_forward_acts)
    mlp_vjp_from_acts_nb = _jit(_mlp_vjp_from_acts)
    bicycle_rollout_nb = _jit(_bicycle_rollout)
else:  # pragma: no cover
    mlp_forward_nb = None
    mlp_forward_acts_nb = None
    mlp_vjp_from_acts_nb = None
    bicycle_rollout_nb = None

if USE_NUMBA:
    mlp_forward = mlp_forward_nb
    mlp_forward_acts = mlp_forward_acts_nb
    mlp_vjp_from_acts = mlp_vjp_from_acts_nb
    bicycle_rollout = bicycle_rollout_nb
else:
    mlp_forward = mlp_forward_np
    mlp_forward_acts = mlp_forward_acts_np
    mlp_vjp_from_acts = mlp_vjp_from_acts_np
    bicycle_rollout = bicycle_rollout_np
