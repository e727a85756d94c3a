"""Forward and backward passes of the recurrent hazard model.

A model is a GRU over per-timestep covariates followed by an output head
(see ``nn`` for the cell and ``heads`` for the parametric heads).  The
configured loss kind selects both the head and the likelihood:

    "safe"        direct hazard head, early-detection likelihood
    "safe-r"      direct hazard head, regular survival likelihood
    "exponential" | "weibull" | "rayleigh" | "poisson"
                  the named distribution head; the likelihood defaults to
                  the early-detection one and can be overridden.

``backward`` is hand-rolled reverse-mode differentiation through the
unrolled sequence.  The single-record and batched implementations are kept
separate on purpose: the batched path is the trainer's hot loop, the
single-record path is the reference the tests cross-check it (and the
finite-difference oracle) against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import heads, survival
from .errors import DimensionError
from .nn import ModelParams, sigmoid, softplus
from .survival import HAZARD_FLOOR, SAFE, SAFE_R, CensorLabel

CONFIG_KINDS = (SAFE, SAFE_R) + heads.HEAD_KINDS


def resolve_kinds(loss_kind: str, likelihood: str | None = None) -> tuple[str, str]:
    """Map a configured loss kind to (head_kind, likelihood)."""
    if loss_kind in (SAFE, SAFE_R):
        if likelihood not in (None, loss_kind):
            raise ValueError(
                f"loss kind {loss_kind!r} fixes its own likelihood; "
                f"got override {likelihood!r}"
            )
        return "direct", loss_kind
    if loss_kind in heads.HEAD_KINDS:
        likelihood = SAFE if likelihood is None else likelihood
        if likelihood not in (SAFE, SAFE_R):
            raise ValueError(f"unknown likelihood {likelihood!r}")
        return loss_kind, likelihood
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _check_sequence(x_seq, params: ModelParams) -> np.ndarray:
    x = np.asarray(x_seq, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("covariate sequence must be a non-empty (T, D) array")
    if x.shape[1] != params.input_size:
        raise DimensionError(
            f"covariate dimension {x.shape[1]} does not match model input "
            f"size {params.input_size}"
        )
    return x


@dataclass
class SequenceCache:
    """Everything the backward pass needs from one forward run."""

    x: np.ndarray                 # (T, D)
    h: np.ndarray                 # (T, H)
    z: np.ndarray                 # (T, H)
    r: np.ndarray                 # (T, H)
    hc: np.ndarray                # (T, H)
    s: np.ndarray                 # (T, n_out) head pre-activations
    theta: np.ndarray | None      # (T, n) floored positive params, or None
    theta_live: np.ndarray | None  # 1.0 where theta escaped the floor
    hazards: np.ndarray           # (T,) floored
    live: np.ndarray              # (T,) 1.0 where the hazard escaped the floor


def _floor_counted(raw: np.ndarray, count_mask=None):
    low = raw < HAZARD_FLOOR
    counted = low if count_mask is None else low & count_mask
    n = int(np.count_nonzero(counted))
    if n:
        survival.add_clamp_events(n)
    return np.where(low, HAZARD_FLOOR, raw), (~low).astype(np.float64)


def forward_sequence(x_seq, params: ModelParams) -> SequenceCache:
    """Run the GRU and head over a (T, D) sequence, caching intermediates."""
    x = _check_sequence(x_seq, params)
    steps = x.shape[0]
    hsize = params.hidden_size
    h_all = np.empty((steps, hsize))
    z_all = np.empty((steps, hsize))
    r_all = np.empty((steps, hsize))
    hc_all = np.empty((steps, hsize))
    h = np.zeros(hsize)
    for t in range(steps):
        xt = x[t]
        z = sigmoid(params.w_z @ xt + params.u_z @ h + params.b_z)
        r = sigmoid(params.w_r @ xt + params.u_r @ h + params.b_r)
        hc = np.tanh(params.w_c @ xt + params.u_c @ (r * h) + params.b_c)
        h = z * h + (1.0 - z) * hc
        z_all[t], r_all[t], hc_all[t], h_all[t] = z, r, hc, h

    s = h_all @ params.head_w.T
    if params.head_b is not None:
        s = s + params.head_b
    if params.head_kind == "direct":
        theta = theta_live = None
        raw = softplus(s[:, 0])
    else:
        theta, theta_live = _floor_counted(softplus(s))
        raw = heads.increments(params.head_kind, theta)
    hazards, live = _floor_counted(raw)
    return SequenceCache(
        x=x, h=h_all, z=z_all, r=r_all, hc=hc_all, s=s,
        theta=theta, theta_live=theta_live, hazards=hazards, live=live,
    )


def forward_hazards(x_seq, params: ModelParams) -> np.ndarray:
    """Per-timestep hazards (or cumulative-hazard increments), all positive.

    Output length equals input length; values are floored at HAZARD_FLOOR
    (counted) so downstream log-likelihoods stay finite.
    """
    return forward_sequence(x_seq, params).hazards


def survival_curve(x_seq, params: ModelParams) -> np.ndarray:
    """Survival probabilities S_t for a record; strictly decreasing."""
    return survival.hazards_to_survival(forward_hazards(x_seq, params))


def record_loss(
    x_seq,
    params: ModelParams,
    loss_kind: str,
    c: int,
    t_label: int,
    likelihood: str | None = None,
) -> float:
    """Per-record loss of the configured kind; uses only steps <= t_label."""
    _, lik = _agree(params, loss_kind, likelihood)
    x = _check_sequence(x_seq, params)
    if not 1 <= t_label <= x.shape[0]:
        raise ValueError(f"t_label {t_label} out of range 1..{x.shape[0]}")
    lam = forward_sequence(x[:t_label], params).hazards
    return survival.per_sample_loss(lam, CensorLabel(c, t_label), lik)


def _agree(params, loss_kind, likelihood):
    head_kind, lik = resolve_kinds(loss_kind, likelihood)
    if head_kind != params.head_kind:
        raise ValueError(
            f"loss kind {loss_kind!r} needs a {head_kind!r} head but the "
            f"parameters carry {params.head_kind!r}"
        )
    return head_kind, lik


def backward(
    x_seq,
    params: ModelParams,
    loss_kind: str,
    c: int,
    t_label: int,
    likelihood: str | None = None,
) -> dict[str, np.ndarray]:
    """Gradient of the per-record loss w.r.t. every parameter array.

    Reverse-mode through the head and then backwards through time.  Shapes
    mirror ``params.arrays()``; all entries finite.
    """
    head_kind, lik = _agree(params, loss_kind, likelihood)
    x = _check_sequence(x_seq, params)
    if not 1 <= t_label <= x.shape[0]:
        raise ValueError(f"t_label {t_label} out of range 1..{x.shape[0]}")
    cache = forward_sequence(x[:t_label], params)
    label = CensorLabel(c, t_label)
    g_lam = survival.analytic_hazard_grad(cache.hazards, label, lik) * cache.live

    # head stage: gradient on head weights plus per-step pull on h_t
    if head_kind == "direct":
        gs = g_lam * sigmoid(cache.s[:, 0])                   # (T,)
        d_head_w = (gs[:, None] * cache.h).sum(axis=0)[None, :]
        d_head_b = None
        dh_head = gs[:, None] * params.head_w[0][None, :]      # (T, H)
    else:
        partials = heads.increment_partials(head_kind, cache.theta)
        dtheta = g_lam[:, None] * partials * cache.theta_live  # (T, n)
        ds = dtheta * sigmoid(cache.s)
        d_head_w = ds.T @ cache.h                              # (n, H)
        d_head_b = ds.sum(axis=0)
        dh_head = ds @ params.head_w                           # (T, H)

    grads = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    grads["head_w"] = d_head_w
    if d_head_b is not None:
        grads["head_b"] = d_head_b

    hsize = params.hidden_size
    carry = np.zeros(hsize)
    for t in range(t_label - 1, -1, -1):
        h_prev = cache.h[t - 1] if t > 0 else np.zeros(hsize)
        z, r, hc = cache.z[t], cache.r[t], cache.hc[t]
        delta = dh_head[t] + carry
        da_z = delta * (h_prev - hc) * z * (1.0 - z)
        da_c = delta * (1.0 - z) * (1.0 - hc * hc)
        drh = params.u_c.T @ da_c
        da_r = drh * h_prev * r * (1.0 - r)
        xt = cache.x[t]
        grads["w_z"] += np.outer(da_z, xt)
        grads["u_z"] += np.outer(da_z, h_prev)
        grads["b_z"] += da_z
        grads["w_r"] += np.outer(da_r, xt)
        grads["u_r"] += np.outer(da_r, h_prev)
        grads["b_r"] += da_r
        grads["w_c"] += np.outer(da_c, xt)
        grads["u_c"] += np.outer(da_c, r * h_prev)
        grads["b_c"] += da_c
        carry = delta * z + params.u_z.T @ da_z + params.u_r.T @ da_r + drh * r
    return grads


# ---------------------------------------------------------------------------
# batched path (the trainer's hot loop)
# ---------------------------------------------------------------------------

def _log_expm1_vec(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    big = s > 30.0
    out[big] = s[big] + np.log1p(-np.exp(-s[big]))
    out[~big] = np.log(np.expm1(s[~big]))
    return out


def _event_grad_vec(totals: np.ndarray) -> np.ndarray:
    return 1.0 - 1.0 / (-np.expm1(-totals))


@dataclass
class BatchCache:
    x: np.ndarray        # (B, L, D)
    h: np.ndarray        # (B, L, H)
    z: np.ndarray
    r: np.ndarray
    hc: np.ndarray
    s: np.ndarray        # (B, L, n_out)
    theta: np.ndarray | None
    theta_live: np.ndarray | None
    hazards: np.ndarray  # (B, L)
    live: np.ndarray     # (B, L)


def batched_forward(x: np.ndarray, valid: np.ndarray, params: ModelParams) -> BatchCache:
    """Forward over a padded (B, L, D) tensor; valid marks real timesteps."""
    bsz, steps, dim = x.shape
    if dim != params.input_size:
        raise DimensionError(
            f"batch covariate dimension {dim} does not match model input "
            f"size {params.input_size}"
        )
    hsize = params.hidden_size
    h_all = np.empty((bsz, steps, hsize))
    z_all = np.empty((bsz, steps, hsize))
    r_all = np.empty((bsz, steps, hsize))
    hc_all = np.empty((bsz, steps, hsize))
    h = np.zeros((bsz, hsize))
    for t in range(steps):
        xt = x[:, t, :]
        z = sigmoid(xt @ params.w_z.T + h @ params.u_z.T + params.b_z)
        r = sigmoid(xt @ params.w_r.T + h @ params.u_r.T + params.b_r)
        hc = np.tanh(xt @ params.w_c.T + (r * h) @ params.u_c.T + params.b_c)
        h = z * h + (1.0 - z) * hc
        z_all[:, t], r_all[:, t], hc_all[:, t], h_all[:, t] = z, r, hc, h

    s = h_all @ params.head_w.T
    if params.head_b is not None:
        s = s + params.head_b
    if params.head_kind == "direct":
        theta = theta_live = None
        raw = softplus(s[..., 0])
    else:
        theta, theta_live = _floor_counted(softplus(s), valid[..., None])
        raw = heads.increments(params.head_kind, theta, count_mask=valid)
    hazards, live = _floor_counted(raw, valid)
    return BatchCache(
        x=x, h=h_all, z=z_all, r=r_all, hc=hc_all, s=s,
        theta=theta, theta_live=theta_live, hazards=hazards, live=live,
    )


def batch_losses_and_grads(
    batch,
    params: ModelParams,
    loss_kind: str,
    likelihood: str | None = None,
    with_grads: bool = True,
):
    """Per-record losses and (optionally) batch-mean gradients.

    The padded positions contribute exactly zero: the per-record loss sums
    hazards only through that record's t_label, and the loss gradient is
    masked the same way before backpropagation through time.
    """
    head_kind, lik = _agree(params, loss_kind, likelihood)
    bsz, steps, _ = batch.x.shape
    cache = batched_forward(batch.x, batch.mask.astype(bool), params)

    step_idx = np.arange(steps)
    loss_mask = (step_idx[None, :] < batch.t_label[:, None]).astype(np.float64)
    lam = cache.hazards
    totals = (lam * loss_mask).sum(axis=1)
    label_idx = batch.t_label - 1
    lam_label = np.take_along_axis(lam, label_idx[:, None], axis=1)[:, 0]
    is_event = batch.c == 1

    losses = totals.copy()
    if lik == SAFE:
        event_arg = totals
    else:
        event_arg = lam_label
    if np.any(is_event):
        losses[is_event] -= _log_expm1_vec(event_arg[is_event])

    if not with_grads:
        return losses, None

    g = loss_mask.copy()
    if lik == SAFE:
        ev = _event_grad_vec(totals)
        g[is_event] *= ev[is_event, None]
    else:
        ev = _event_grad_vec(lam_label)
        rows = np.nonzero(is_event)[0]
        g[rows, label_idx[rows]] = ev[rows]
    g *= cache.live

    if head_kind == "direct":
        gs = g * sigmoid(cache.s[..., 0])                       # (B, L)
        d_head_w = np.einsum("bl,blh->h", gs, cache.h)[None, :]
        d_head_b = None
        dh_head = gs[..., None] * params.head_w[0]
    else:
        partials = heads.increment_partials(head_kind, cache.theta)
        dtheta = g[..., None] * partials * cache.theta_live
        ds = dtheta * sigmoid(cache.s)
        d_head_w = np.einsum("bln,blh->nh", ds, cache.h)
        d_head_b = ds.sum(axis=(0, 1))
        dh_head = ds @ params.head_w

    grads = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    grads["head_w"] = d_head_w
    if d_head_b is not None:
        grads["head_b"] = d_head_b

    hsize = params.hidden_size
    carry = np.zeros((bsz, hsize))
    zeros = np.zeros((bsz, hsize))
    for t in range(steps - 1, -1, -1):
        h_prev = cache.h[:, t - 1] if t > 0 else zeros
        z, r, hc = cache.z[:, t], cache.r[:, t], cache.hc[:, t]
        delta = dh_head[:, t] + carry
        da_z = delta * (h_prev - hc) * z * (1.0 - z)
        da_c = delta * (1.0 - z) * (1.0 - hc * hc)
        drh = da_c @ params.u_c
        da_r = drh * h_prev * r * (1.0 - r)
        xt = batch.x[:, t]
        grads["w_z"] += da_z.T @ xt
        grads["u_z"] += da_z.T @ h_prev
        grads["b_z"] += da_z.sum(axis=0)
        grads["w_r"] += da_r.T @ xt
        grads["u_r"] += da_r.T @ h_prev
        grads["b_r"] += da_r.sum(axis=0)
        grads["w_c"] += da_c.T @ xt
        grads["u_c"] += da_c.T @ (r * h_prev)
        grads["b_c"] += da_c.sum(axis=0)
        carry = delta * z + da_z @ params.u_z + da_r @ params.u_r + drh * r

    for name in grads:
        grads[name] = grads[name] / bsz
    return losses, grads
