"""Minimal recurrent kernel: GRU cell, parameter store, Adam, finite differences.

Everything runs in float64 numpy.  Model sizes in this library are small
(hidden size tens, sequences of a few dozen steps), so double precision is
free and keeps finite-difference gradient checks meaningful.

The GRU follows the gated formulation with the reset gate applied to the
previous hidden state inside the candidate:

    z_t = sigmoid(w_z x_t + u_z h_{t-1} + b_z)        update gate
    r_t = sigmoid(w_r x_t + u_r h_{t-1} + b_r)        reset gate
    hc  = tanh(w_c x_t + u_c (r_t * h_{t-1}) + b_c)   candidate
    h_t = z_t * h_{t-1} + (1 - z_t) * hc

With h_0 = 0 every hidden entry stays in (-1, 1): h_t is a convex
combination of h_{t-1} and a tanh output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import expit as sigmoid

from .errors import DimensionError, TrainingError

# Output head taxonomy: name -> (rows of head_w, whether head_b exists).
# "direct" maps a hidden state straight to one hazard via softplus(w . h)
# with no bias; the distribution heads emit one or two positive parameters
# per step and do carry a per-parameter bias.
HEAD_DIMS = {
    "direct": (1, False),
    "exponential": (1, True),
    "rayleigh": (1, True),
    "poisson": (1, True),
    "weibull": (2, True),
}

GATE_NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c")


def softplus(z):
    """log(1 + exp(z)), elementwise, stable for |z| up to ~700.

    Evaluated as max(z, 0) + log1p(exp(-|z|)): large z returns ~z, very
    negative z returns ~exp(z), nothing overflows.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return out if out.ndim else float(out)


@dataclass
class ModelParams:
    """All trainable weights of a recurrent hazard model.

    Gate matrices map inputs (w_*) and hidden states (u_*) to the hidden
    dimension; b_* are gate biases.  head_w has one row per output-head
    parameter; head_b is None for the direct hazard head.
    """

    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_c: np.ndarray
    u_c: np.ndarray
    b_c: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray | None
    head_kind: str
    hidden_size: int
    input_size: int
    rng_seed: int

    def arrays(self) -> dict[str, np.ndarray]:
        """Named weight arrays, in a fixed order (head_b omitted when absent)."""
        out = {name: getattr(self, name) for name in GATE_NAMES}
        out["head_w"] = self.head_w
        if self.head_b is not None:
            out["head_b"] = self.head_b
        return out

    def copy(self) -> "ModelParams":
        fresh = {name: arr.copy() for name, arr in self.arrays().items()}
        return replace(self, **fresh)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())


def init_params(
    input_size: int, hidden_size: int, seed: int, head_kind: str = "direct"
) -> ModelParams:
    """Seeded initialization: matrices uniform in +-1/sqrt(hidden), biases zero.

    The uniform scale keeps head pre-activations near 0 at the start, so
    initial hazards sit near softplus(0) = ln 2.
    """
    if head_kind not in HEAD_DIMS:
        raise ValueError(f"unknown head kind {head_kind!r}")
    if input_size < 1 or hidden_size < 1:
        raise ValueError("input_size and hidden_size must be positive")
    n_out, has_bias = HEAD_DIMS[head_kind]
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(hidden_size)

    def mat(rows, cols):
        return rng.uniform(-bound, bound, size=(rows, cols))

    h, d = hidden_size, input_size
    return ModelParams(
        w_z=mat(h, d), u_z=mat(h, h), b_z=np.zeros(h),
        w_r=mat(h, d), u_r=mat(h, h), b_r=np.zeros(h),
        w_c=mat(h, d), u_c=mat(h, h), b_c=np.zeros(h),
        head_w=mat(n_out, h),
        head_b=np.zeros(n_out) if has_bias else None,
        head_kind=head_kind,
        hidden_size=hidden_size,
        input_size=input_size,
        rng_seed=seed,
    )


def zero_hidden(params: ModelParams) -> np.ndarray:
    return np.zeros(params.hidden_size)


def gru_step(x: np.ndarray, h_prev: np.ndarray, params: ModelParams) -> np.ndarray:
    """One GRU update; returns the next hidden state."""
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x.shape != (params.input_size,):
        raise DimensionError(
            f"input has shape {x.shape}, expected ({params.input_size},)"
        )
    if h_prev.shape != (params.hidden_size,):
        raise DimensionError(
            f"hidden state has shape {h_prev.shape}, expected ({params.hidden_size},)"
        )
    z = sigmoid(params.w_z @ x + params.u_z @ h_prev + params.b_z)
    r = sigmoid(params.w_r @ x + params.u_r @ h_prev + params.b_r)
    hc = np.tanh(params.w_c @ x + params.u_c @ (r * h_prev) + params.b_c)
    return z * h_prev + (1.0 - z) * hc


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; shapes mirror the ModelParams arrays."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def new_adam_state(params: ModelParams, learning_rate: float = 1e-3) -> AdamState:
    m = {name: np.zeros_like(a) for name, a in params.arrays().items()}
    v = {name: np.zeros_like(a) for name, a in params.arrays().items()}
    return AdamState(learning_rate=learning_rate, m=m, v=v)


def adam_update(
    params: ModelParams, grads: dict[str, np.ndarray], state: AdamState
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam step; returns fresh (params, state).

    Zero gradients leave the parameters unchanged.  Non-finite gradients
    raise TrainingError rather than silently corrupting the weights.
    """
    arrays = params.arrays()
    if set(grads) != set(arrays):
        raise DimensionError(
            f"gradient keys {sorted(grads)} do not match parameters {sorted(arrays)}"
        )
    for name, g in grads.items():
        if g.shape != arrays[name].shape:
            raise DimensionError(f"gradient {name} has shape {g.shape}, "
                                 f"expected {arrays[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_arr = {}, {}, {}
    for name, g in grads.items():
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_m[name] = m
        new_v[name] = v
        new_arr[name] = arrays[name] - state.learning_rate * m_hat / (
            np.sqrt(v_hat) + state.epsilon
        )

    if "head_b" not in new_arr:
        new_arr["head_b"] = None
    new_params = replace(params, **new_arr)
    if not new_params.all_finite():
        raise TrainingError("parameters became non-finite after Adam step")
    new_state = replace(state, step_count=t, m=new_m, v=new_v)
    return new_params, new_state


def finite_diff_gradient(
    f: Callable[[ModelParams], float], params: ModelParams, step: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of the parameters.

    Entry-by-entry: exact for quadratics up to roundoff.  Intended as a
    test oracle for backpropagation, so it never shares code with it.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    work = params.copy()
    grads = {}
    for name, arr in work.arrays().items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(work)
            flat[i] = orig - step
            down = f(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads
