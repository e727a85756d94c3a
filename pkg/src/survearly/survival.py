"""Discrete-time survival math on per-timestep hazards.

A hazard sequence is a 1-D float64 array of strictly positive values
``lam[t]`` for timesteps t = 1..T.  The survival curve derived from it is

    S_t = exp(-(lam_1 + ... + lam_t)),

which is strictly decreasing because every hazard is positive, and the
cumulative event probability is F_t = 1 - S_t.

Two per-sample negative log-likelihoods are provided for a label
(c, t_label), where c = 1 marks an observed terminal event at t_label and
c = 0 a right-censored record last observed at t_label:

``safe_r_loss``
    The regular censored survival loss.  An event sample is credited with
    the probability of the event landing exactly on t_label, so only the
    hazard at the label step is pushed up during training.

``safe_loss``
    The early-detection variant.  The event term is the cumulative
    probability of the event happening by t_label, which pushes *every*
    hazard at t <= t_label upward and therefore drags the survival curve
    down before the (late) label time.

Both losses share the censored term sum(lam[:t_label]).  Their analytic
gradients with respect to each hazard are in ``analytic_hazard_grad`` and
double as test oracles for backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAFE = "safe"
SAFE_R = "safe-r"
LOSS_KINDS = (SAFE, SAFE_R)

# Floor applied to model-produced hazards before they reach a loss; keeps
# logs finite when softplus underflows in pathological training states.
HAZARD_FLOOR = 1e-12

_clamp_count = 0


def clamp_hazards(values: np.ndarray) -> np.ndarray:
    """Floor hazards at HAZARD_FLOOR, counting every clamped entry.

    The count is cumulative and process-wide; read it with
    ``get_clamp_count`` and reset with ``reset_clamp_count``.  A healthy
    training run never trips the floor.
    """
    global _clamp_count
    values = np.asarray(values, dtype=np.float64)
    low = values < HAZARD_FLOOR
    n = int(np.count_nonzero(low))
    if n == 0:
        return values
    _clamp_count += n
    return np.where(low, HAZARD_FLOOR, values)


def add_clamp_events(n: int) -> None:
    """Credit n clamp events to the shared counter (used by the model heads)."""
    global _clamp_count
    _clamp_count += n


def get_clamp_count() -> int:
    return _clamp_count


def reset_clamp_count() -> None:
    global _clamp_count
    _clamp_count = 0


@dataclass(frozen=True)
class CensorLabel:
    """Censor indicator and label time for one record.

    c = 1: terminal event observed at timestep t_label.
    c = 0: record right-censored, last observed at timestep t_label.
    """

    c: int
    t_label: int

    def __post_init__(self):
        if self.c not in (0, 1):
            raise ValueError(f"censor indicator must be 0 or 1, got {self.c}")
        if self.t_label < 1:
            raise ValueError(f"t_label must be >= 1, got {self.t_label}")


def _checked_hazards(values, t_label: int | None = None) -> np.ndarray:
    lam = np.asarray(values, dtype=np.float64)
    if lam.ndim != 1 or lam.size == 0:
        raise ValueError("hazard sequence must be a non-empty 1-D array")
    if not np.all(np.isfinite(lam)):
        raise ValueError("hazard sequence contains non-finite entries")
    if np.any(lam <= 0.0):
        raise ValueError("hazards must be strictly positive")
    if t_label is not None and t_label > lam.size:
        raise ValueError(
            f"t_label {t_label} exceeds sequence length {lam.size}"
        )
    return lam


def hazards_to_survival(values) -> np.ndarray:
    """Survival curve S_t = exp(-cumsum(lam)); strictly decreasing, in (0, 1]."""
    lam = _checked_hazards(values)
    return np.exp(-np.cumsum(lam))


def cdf_from_hazards(values, t: int) -> float:
    """Cumulative event probability F_t = 1 - S_t at 1-indexed timestep t."""
    lam = _checked_hazards(values)
    if not 1 <= t <= lam.size:
        raise IndexError(f"timestep {t} out of range 1..{lam.size}")
    # -expm1(-x) = 1 - exp(-x) without cancellation for small x
    return float(-np.expm1(-np.sum(lam[:t])))


def stable_log_expm1(s: float) -> float:
    """log(exp(s) - 1) without overflow for s up to ~700.

    For large s the identity log(e^s - 1) = s + log(1 - e^-s) is used; the
    direct expm1 route is exact for moderate s.
    """
    if not s > 0.0:
        raise ValueError(f"stable_log_expm1 requires s > 0, got {s}")
    if s > 30.0:
        return s + np.log1p(-np.exp(-s))
    return float(np.log(np.expm1(s)))


def safe_r_loss(values, label: CensorLabel) -> float:
    """Regular censored survival negative log-likelihood for one record.

    sum(lam[:t_label]) - c * log(exp(lam[t_label]) - 1).  Always >= 0.
    """
    lam = _checked_hazards(values, label.t_label)
    total = float(np.sum(lam[: label.t_label]))
    if label.c == 0:
        return total
    return total - stable_log_expm1(float(lam[label.t_label - 1]))


def safe_loss(values, label: CensorLabel) -> float:
    """Early-detection survival loss for one record.

    sum(lam[:t_label]) - c * log(exp(sum(lam[:t_label])) - 1); equal to
    -log(F_{t_label}) for an event sample, and to safe_r_loss for a
    censored one.  Always >= 0.
    """
    lam = _checked_hazards(values, label.t_label)
    total = float(np.sum(lam[: label.t_label]))
    if label.c == 0:
        return total
    return total - stable_log_expm1(total)


def per_sample_loss(values, label: CensorLabel, kind: str) -> float:
    if kind == SAFE:
        return safe_loss(values, label)
    if kind == SAFE_R:
        return safe_r_loss(values, label)
    raise ValueError(f"unknown loss kind {kind!r}")


def batch_loss(records, kind: str) -> float:
    """Sum of per-sample losses over (hazards, label) pairs.

    Plain sum; any per-batch averaging is the trainer's business.
    """
    records = list(records)
    if not records:
        raise ValueError("batch_loss requires at least one record")
    return sum(per_sample_loss(lam, label, kind) for lam, label in records)


def _event_grad_at(total: float) -> float:
    # 1 - e^S/(e^S - 1) rewritten as 1 - 1/(1 - e^-S): stable for any S > 0,
    # strictly negative, and -> 0- as S grows.
    return 1.0 - 1.0 / float(-np.expm1(-total))


def analytic_hazard_grad(values, label: CensorLabel, kind: str) -> np.ndarray:
    """d(loss)/d(lam_t) for t = 1..t_label, in closed form.

    Censored records give exactly 1 at every step for both kinds.  For an
    event record the early-detection loss gives the same strictly negative
    value 1 - e^S/(e^S - 1) (S = sum of hazards through the label) at every
    step, while the regular loss gives exactly 1 before the label and a
    strictly negative value only at the label step.
    """
    lam = _checked_hazards(values, label.t_label)
    t_label = label.t_label
    grad = np.ones(t_label)
    if label.c == 0:
        return grad
    if kind == SAFE:
        grad[:] = _event_grad_at(float(np.sum(lam[:t_label])))
    elif kind == SAFE_R:
        grad[t_label - 1] = _event_grad_at(float(lam[t_label - 1]))
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return grad
