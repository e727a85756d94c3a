"""Dataset model: record format, synthetic generator, splits, batching.

Records travel as JSON Lines, one object per line with fields
``user_id``, ``covariates`` (list of per-timestep feature vectors, which
are per-step deltas of the underlying counters), ``c``, ``t_label`` and,
for synthetic fraudsters only, ``ground_truth_fraud_time``.  The ground
truth is never visible to training; it exists so early-detection results
can be scored against the actual onset.

The generator builds the observable/label structure the early-detection
loss exploits: a fraudster's feature distribution shifts at an onset time,
but the label (account suspension) only arrives a few steps later, so
t_label strictly trails the onset.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError, DimensionError


@dataclass
class UserRecord:
    user_id: str
    covariates: np.ndarray          # (T, D) float64
    c: int                          # 1 = terminal event observed, 0 = censored
    t_label: int                    # event time (c=1) or last-observed time (c=0)
    ground_truth_fraud_time: int | None = None

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if self.covariates.ndim != 2 or self.covariates.shape[0] == 0:
            raise DataError(f"record {self.user_id}: covariates must be (T, D)")
        if not np.all(np.isfinite(self.covariates)):
            raise DataError(f"record {self.user_id}: non-finite covariates")
        if self.c not in (0, 1):
            raise DataError(f"record {self.user_id}: c must be 0 or 1")
        if not 1 <= self.t_label <= self.covariates.shape[0]:
            raise DataError(
                f"record {self.user_id}: t_label {self.t_label} outside "
                f"1..{self.covariates.shape[0]}"
            )
        if self.ground_truth_fraud_time is not None:
            if self.c == 0:
                raise DataError(
                    f"record {self.user_id}: censored record carries a "
                    "ground-truth fraud time"
                )
            if not 1 <= self.ground_truth_fraud_time <= self.t_label:
                raise DataError(
                    f"record {self.user_id}: ground-truth fraud time "
                    f"{self.ground_truth_fraud_time} outside 1..{self.t_label}"
                )

    @property
    def length(self) -> int:
        return self.covariates.shape[0]


def write_records(records: Iterable[UserRecord], path) -> None:
    """Write records as JSON Lines with full float round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "user_id": rec.user_id,
                "covariates": rec.covariates.tolist(),
                "c": rec.c,
                "t_label": rec.t_label,
            }
            if rec.ground_truth_fraud_time is not None:
                obj["ground_truth_fraud_time"] = rec.ground_truth_fraud_time
            fh.write(json.dumps(obj) + "\n")


def parse_records(path) -> list[UserRecord]:
    """Read and validate a JSON Lines dataset.

    Raises DataError naming the offending line for malformed JSON or
    missing fields, and naming both dimensions if the covariate dimension
    is not uniform across the file.
    """
    records: list[UserRecord] = []
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc})")
            try:
                rec = UserRecord(
                    user_id=obj["user_id"],
                    covariates=np.asarray(obj["covariates"], dtype=np.float64),
                    c=obj["c"],
                    t_label=obj["t_label"],
                    ground_truth_fraud_time=obj.get("ground_truth_fraud_time"),
                )
            except KeyError as exc:
                raise DataError(f"{path}: line {lineno}: missing field {exc}")
            except (DataError, ValueError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}")
            if dim is None:
                dim = rec.covariates.shape[1]
            elif rec.covariates.shape[1] != dim:
                raise DataError(
                    f"{path}: line {lineno}: covariate dimension "
                    f"{rec.covariates.shape[1]} != {dim} seen earlier"
                )
            records.append(rec)
    return records


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic benchmark knobs.

    Defaults mirror a balanced 5540-user set with 5 delta features and
    sequence lengths 12..21.  The label delay is the gap between a
    fraudster's distribution shift and the suspension label.
    """

    n_users: int = 5540
    fraud_fraction: float = 0.5
    covariate_dim: int = 5
    min_length: int = 12
    max_length: int = 21
    delay_min: int = 1
    delay_max: int = 6
    ar_coeff: float = 0.6
    noise_scale: float = 1.0
    style_scale: float = 0.7       # fraudster offset present from the first step
    shift_scale: float = 2.5       # additional offset from the onset step on
    shift_feature_prob: float = 0.5
    censor_scatter: bool = False    # scatter censoring times across steps

    def validate(self) -> None:
        if self.n_users < 1:
            raise ConfigError("n_users must be positive")
        if not 0.0 <= self.fraud_fraction <= 1.0:
            raise ConfigError("fraud_fraction must lie in [0, 1]")
        if self.covariate_dim < 1:
            raise ConfigError("covariate_dim must be positive")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError("need 1 <= min_length <= max_length")
        if not 1 <= self.delay_min <= self.delay_max:
            raise ConfigError("need 1 <= delay_min <= delay_max")
        if self.min_length - self.delay_max < 2:
            raise ConfigError(
                f"min_length {self.min_length} leaves no room for a fraud "
                f"onset before a delay of {self.delay_max}"
            )
        if not 0.0 < abs(self.ar_coeff) < 1.0 and self.ar_coeff != 0.0:
            raise ConfigError("ar_coeff must have magnitude < 1")


def _ar_sequence(rng, steps, dim, coeff, scale):
    # stationary AR(1) per feature; the stationary start avoids a burn-in
    out = np.empty((steps, dim))
    stat = scale / np.sqrt(1.0 - coeff * coeff) if coeff else scale
    out[0] = rng.normal(0.0, stat, size=dim)
    noise = rng.normal(0.0, scale, size=(steps - 1, dim))
    for t in range(1, steps):
        out[t] = coeff * out[t - 1] + noise[t - 1]
    return out


def generate_synthetic(cfg: GeneratorConfig, seed: int) -> list[UserRecord]:
    """Deterministic synthetic dataset with known fraud onsets.

    Normal users: stationary AR(1) deltas, censored at their full length
    (or at a scattered time with censor_scatter).  Fraudsters: the same
    AR process plus a weak mean offset on a random feature subset from the
    very first step (their operating style differs subtly throughout), and
    a hard additional shift on the same features from the onset time
    drawn uniformly from [2, length - delay_max].  The label arrives at
    onset + delay with delay uniform in [delay_min, delay_max], so the
    onset always strictly precedes the label; the weak early signal is
    what an early-detection loss can exploit before the onset is visible.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_fraud = int(round(cfg.n_users * cfg.fraud_fraction))
    records = []
    for i in range(cfg.n_users):
        is_fraud = i < n_fraud
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        x = _ar_sequence(rng, length, cfg.covariate_dim, cfg.ar_coeff,
                         cfg.noise_scale)
        user_id = f"u{i:06d}"
        if is_fraud:
            onset = int(rng.integers(2, length - cfg.delay_max + 1))
            delay = int(rng.integers(cfg.delay_min, cfg.delay_max + 1))
            marked = rng.random(cfg.covariate_dim) < cfg.shift_feature_prob
            if not marked.any():
                marked[int(rng.integers(cfg.covariate_dim))] = True
            signs = rng.choice([-1.0, 1.0], size=cfg.covariate_dim)
            x += marked * signs * cfg.style_scale
            x[onset - 1:] += marked * signs * cfg.shift_scale
            records.append(UserRecord(
                user_id=user_id, covariates=x, c=1,
                t_label=onset + delay, ground_truth_fraud_time=onset,
            ))
        else:
            if cfg.censor_scatter:
                t_label = int(rng.integers(2, length + 1))
            else:
                t_label = length
            records.append(UserRecord(
                user_id=user_id, covariates=x, c=0, t_label=t_label,
            ))
    return records


@dataclass
class DatasetSplit:
    train: list[UserRecord]
    validation: list[UserRecord]
    test: list[UserRecord]
    split_seed: int


def split_dataset(records: list[UserRecord], seed: int) -> DatasetSplit:
    """Stratified 7:1:2 shuffle split (within one record per class).

    Falls back to a plain shuffle split, with a warning, when any class
    has fewer than 10 members.
    """
    if len(records) < 10:
        raise DataError(f"need at least 10 records to split, got {len(records)}")
    rng = np.random.default_rng(seed)
    classes = [[r for r in records if r.c == 1], [r for r in records if r.c == 0]]
    if any(0 < len(group) < 10 for group in classes):
        warnings.warn(
            "a class has fewer than 10 members; splitting without "
            "stratification", stacklevel=2,
        )
        classes = [list(records)]
    parts: list[list[UserRecord]] = [[], [], []]
    for group in classes:
        if not group:
            continue
        order = rng.permutation(len(group))
        n = len(group)
        i_train = int(round(0.7 * n))
        i_val = int(round(0.8 * n))
        for slot, sel in enumerate(
            (order[:i_train], order[i_train:i_val], order[i_val:])
        ):
            parts[slot].extend(group[j] for j in sel)
    for part in parts:
        # interleave the classes so split prefixes are not class-sorted
        rng.shuffle(part)
    return DatasetSplit(
        train=parts[0], validation=parts[1], test=parts[2], split_seed=seed
    )


@dataclass
class Batch:
    """Padded minibatch; mask is zero beyond each record's length."""

    x: np.ndarray          # (B, L, D), zero-padded
    lengths: np.ndarray    # (B,)
    c: np.ndarray          # (B,)
    t_label: np.ndarray    # (B,)
    mask: np.ndarray       # (B, L) float 0/1
    user_ids: list[str] = field(default_factory=list)


def pack_batch(records: list[UserRecord]) -> Batch:
    max_len = max(r.length for r in records)
    dim = records[0].covariates.shape[1]
    x = np.zeros((len(records), max_len, dim))
    mask = np.zeros((len(records), max_len))
    for i, rec in enumerate(records):
        if rec.covariates.shape[1] != dim:
            raise DimensionError(
                f"record {rec.user_id} has covariate dimension "
                f"{rec.covariates.shape[1]}, batch expects {dim}"
            )
        x[i, : rec.length] = rec.covariates
        mask[i, : rec.length] = 1.0
    return Batch(
        x=x,
        lengths=np.array([r.length for r in records], dtype=np.int64),
        c=np.array([r.c for r in records], dtype=np.int64),
        t_label=np.array([r.t_label for r in records], dtype=np.int64),
        mask=mask,
        user_ids=[r.user_id for r in records],
    )


def make_batches(records: list[UserRecord], batch_size: int, seed: int) -> list[Batch]:
    """Shuffle by seed, chunk into batches of <= batch_size, pad per batch."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not records:
        return []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    return [
        pack_batch(shuffled[i: i + batch_size])
        for i in range(0, len(shuffled), batch_size)
    ]


@dataclass
class Standardizer:
    """Per-feature z-scoring fit on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    @classmethod
    def fit(cls, records: list[UserRecord]) -> "Standardizer":
        if not records:
            raise DataError("cannot fit a standardizer on an empty split")
        stacked = np.concatenate([r.covariates for r in records], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=mean, std=std)

    def transform(self, record: UserRecord) -> UserRecord:
        return UserRecord(
            user_id=record.user_id,
            covariates=(record.covariates - self.mean) / self.std,
            c=record.c,
            t_label=record.t_label,
            ground_truth_fraud_time=record.ground_truth_fraud_time,
        )

    def transform_all(self, records: list[UserRecord]) -> list[UserRecord]:
        return [self.transform(r) for r in records]
