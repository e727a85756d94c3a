"""Parametric output heads for the recurrent survival model.

Instead of emitting a hazard directly, a head maps each hidden state to the
positive parameter(s) of a lifetime distribution (exponential, Weibull,
Rayleigh, or Poisson) and converts them into the cumulative-hazard
increment over the step (t-1, t].  The increments then feed the same
survival losses as directly-predicted hazards, so the only difference
between head kinds is the shape prior baked into the increment formula.

Increment formulas, using the parameters predicted at step t:

    exponential(rate)      L_t = rate
    weibull(scale, shape)  L_t = (t/scale)^shape - ((t-1)/scale)^shape
    rayleigh(scale)        Weibull with shape fixed at 2 (same code path,
                           so equal scales give bit-identical increments)
    poisson(mean)          L_t = -log(1 - pmf(t-1)/P{X >= t-1}), the pmf
                           support shifted so the first step already
                           carries event mass

All parameters are strictly positive by construction (softplus plus a
floor).  ``increment_partials`` returns dL_t/d(parameter) in closed form
for backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson

from .errors import DimensionError
from .nn import HEAD_DIMS, softplus
from .survival import HAZARD_FLOOR, add_clamp_events

HEAD_KINDS = ("exponential", "weibull", "rayleigh", "poisson")

# Discrete hazards f_t / S_t are capped just below 1 so the log stays
# finite when the tail mass truncates to zero numerically.
POISSON_HAZARD_CAP = 1.0 - 1e-12


@dataclass
class DistParams:
    """Per-timestep positive distribution parameters, one row per step."""

    kind: str
    values: np.ndarray  # (T, n_params)

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        n_out, _ = HEAD_DIMS[self.kind]
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != n_out:
            raise DimensionError(
                f"{self.kind} head expects (T, {n_out}) parameters, "
                f"got {self.values.shape}"
            )


def floor_positive(values: np.ndarray) -> np.ndarray:
    """Floor softplus outputs at HAZARD_FLOOR, feeding the shared clamp counter."""
    low = values < HAZARD_FLOOR
    n = int(np.count_nonzero(low))
    if n:
        add_clamp_events(n)
        values = np.where(low, HAZARD_FLOOR, values)
    return values


def head_params(h_seq: np.ndarray, head_w: np.ndarray,
                head_b: np.ndarray, kind: str) -> DistParams:
    """Map hidden states (T, H) to positive parameters softplus(W h + b)."""
    h_seq = np.asarray(h_seq, dtype=np.float64)
    if h_seq.ndim != 2 or h_seq.size == 0:
        raise DimensionError("hidden sequence must be a non-empty (T, H) array")
    if head_w.ndim != 2 or head_w.shape[1] != h_seq.shape[1]:
        raise DimensionError(
            f"head weights {head_w.shape} incompatible with hidden size "
            f"{h_seq.shape[1]}"
        )
    theta = softplus(h_seq @ head_w.T + head_b)
    return DistParams(kind=kind, values=floor_positive(np.atleast_2d(theta)))


def _step_grid(theta: np.ndarray) -> np.ndarray:
    # 1-based timestep grid aligned with axis -2 of theta, broadcastable.
    steps = theta.shape[-2]
    shape = [1] * theta.ndim
    shape[-2] = steps
    return np.arange(1.0, steps + 1.0).reshape(shape)


def increments(kind: str, theta: np.ndarray, count_mask=None) -> np.ndarray:
    """Cumulative-hazard increments L_t from parameters of shape (..., T, n).

    Returns shape (..., T).  Rayleigh is routed through the Weibull formula
    with shape pinned at 2.  count_mask narrows Poisson cap counting to the
    given positions (False suppresses it entirely).
    """
    t = _step_grid(theta)
    if kind == "exponential":
        return theta[..., 0]
    if kind == "rayleigh":
        b = theta[..., :1]
        k = np.full_like(b, 2.0)
        return _weibull_increment(b, k, t)[..., 0]
    if kind == "weibull":
        b = theta[..., :1]
        k = theta[..., 1:2]
        return _weibull_increment(b, k, t)[..., 0]
    if kind == "poisson":
        return _poisson_increment(theta[..., 0], t[..., 0], count_mask)
    raise ValueError(f"unknown head kind {kind!r}")


def _weibull_increment(b, k, t):
    return (t / b) ** k - ((t - 1.0) / b) ** k


def _poisson_hazard(mu, t, count_mask=None):
    # Discrete hazard of T = X + 1 with X ~ Poisson(mu):
    # P{T = t | T >= t} = pmf(t-1) / P{X >= t-1}, capped below 1.
    # count_mask selects which capped entries feed the clamp counter
    # (False suppresses counting, e.g. when recomputing for partials).
    m = t - 1.0
    f = poisson.pmf(m, mu)
    s = poisson.sf(m - 1.0, mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(s > 0.0, f / s, 1.0)
    over = q > POISSON_HAZARD_CAP
    if count_mask is not False:
        counted = over if count_mask is None else over & count_mask
        n = int(np.count_nonzero(counted))
        if n:
            add_clamp_events(n)
    q = np.where(over, POISSON_HAZARD_CAP, q)
    return q, over


def _poisson_increment(mu, t, count_mask=None):
    q, _ = _poisson_hazard(mu, t, count_mask)
    return -np.log1p(-q)


def increment_partials(kind: str, theta: np.ndarray) -> np.ndarray:
    """dL_t/d(theta_t), shape matching theta (..., T, n)."""
    t = _step_grid(theta)
    if kind == "exponential":
        return np.ones_like(theta)
    if kind == "rayleigh":
        b = theta[..., :1]
        lam = _weibull_increment(b, np.full_like(b, 2.0), t)
        return -2.0 * lam / b
    if kind == "weibull":
        b = theta[..., :1]
        k = theta[..., 1:2]
        hi = (t / b) ** k
        lo = ((t - 1.0) / b) ** k
        d_b = -(k / b) * (hi - lo)
        # the t = 1 term of the shape derivative vanishes with its 0^k factor
        with np.errstate(divide="ignore", invalid="ignore"):
            lo_log = np.where(t > 1.0, lo * np.log((t - 1.0) / b), 0.0)
        d_k = hi * np.log(t / b) - lo_log
        return np.concatenate([d_b, d_k], axis=-1)
    if kind == "poisson":
        mu = theta[..., 0]
        q, capped = _poisson_hazard(mu, t[..., 0], count_mask=False)
        m = t[..., 0] - 1.0
        f = poisson.pmf(m, mu)
        s = poisson.sf(m - 1.0, mu)
        df = f * (m / mu - 1.0)
        ds = poisson.pmf(m - 1.0, mu)
        with np.errstate(divide="ignore", invalid="ignore"):
            dq = np.where(s > 0.0, (df * s - f * ds) / (s * s), 0.0)
            d_mu = np.where(capped, 0.0, dq / (1.0 - q))
        return d_mu[..., None]
    raise ValueError(f"unknown head kind {kind!r}")


def hazard_increment(params: DistParams, t: int) -> float:
    """Increment over (t-1, t] from the parameters predicted at step t."""
    steps = params.values.shape[0]
    if not 1 <= t <= steps:
        raise IndexError(f"timestep {t} out of range 1..{steps}")
    return float(increments(params.kind, params.values)[t - 1])
