"""Training loop, threshold selection, @k metrics, early-detection reports.

The trainer standardizes covariates with statistics fit on the training
split only, minimizes the batch-mean loss with Adam, and keeps the
parameters from the epoch with the best validation loss (early stopping on
a patience counter).  Evaluation flags a record at the first timestep
whose survival probability drops below a threshold chosen on the
validation split; since survival curves are strictly decreasing, a flagged
record stays flagged, so predictions are consistent across time.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import Batch, DatasetSplit, Standardizer, UserRecord, pack_batch, make_batches
from .errors import ConfigError, DataError, TrainingError
from .model import CONFIG_KINDS, batch_losses_and_grads, resolve_kinds, survival_curve
from .nn import ModelParams, adam_update, init_params, new_adam_state


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "safe"
    likelihood: str | None = None   # override for distribution heads only
    hidden_size: int = 32
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 100
    patience: int = 10
    init_seed: int = 0
    shuffle_seed: int = 0

    def validate(self) -> None:
        if self.loss_kind not in CONFIG_KINDS:
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        resolve_kinds(self.loss_kind, self.likelihood)
        for name in ("hidden_size", "batch_size", "learning_rate", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats]
    scaler: Standardizer
    best_epoch: int
    best_val_loss: float


def _chunk_batches(records: list[UserRecord], batch_size: int) -> list[Batch]:
    return [
        pack_batch(records[i: i + batch_size])
        for i in range(0, len(records), batch_size)
    ]


def _mean_loss(batches, params, cfg) -> float:
    total, count = 0.0, 0
    for batch in batches:
        losses, _ = batch_losses_and_grads(
            batch, params, cfg.loss_kind, cfg.likelihood, with_grads=False
        )
        total += float(losses.sum())
        count += losses.size
    return total / count


def train(split: DatasetSplit, cfg: TrainConfig) -> TrainResult:
    """Train on the split per the config; deterministic given the seeds."""
    cfg.validate()
    if not split.train:
        raise DataError("training split is empty")
    scaler = Standardizer.fit(split.train)
    train_records = scaler.transform_all(split.train)
    val_records = scaler.transform_all(split.validation)
    dim = train_records[0].covariates.shape[1]
    head_kind, _ = resolve_kinds(cfg.loss_kind, cfg.likelihood)
    params = init_params(dim, cfg.hidden_size, cfg.init_seed, head_kind)
    state = new_adam_state(params, cfg.learning_rate)

    history: list[EpochStats] = []
    best_params = params
    best_epoch = 0
    best_val = float("inf")
    val_batches = _chunk_batches(val_records, cfg.batch_size)
    bad_epochs = 0
    for epoch in range(1, cfg.epochs + 1):
        epoch_seed = cfg.shuffle_seed * 1_000_003 + epoch
        total, count = 0.0, 0
        for b_idx, batch in enumerate(
            make_batches(train_records, cfg.batch_size, epoch_seed)
        ):
            losses, grads = batch_losses_and_grads(
                batch, params, cfg.loss_kind, cfg.likelihood
            )
            if not np.all(np.isfinite(losses)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b_idx}"
                )
            total += float(losses.sum())
            count += losses.size
            params, state = adam_update(params, grads, state)
        train_loss = total / count
        val_loss = _mean_loss(val_batches, params, cfg) if val_records else train_loss
        history.append(EpochStats(epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    if best_epoch == 0:
        best_params, best_val = params, float("nan")
    return TrainResult(
        params=best_params, history=history, scaler=scaler,
        best_epoch=best_epoch, best_val_loss=best_val,
    )


def predict_flag_time(params: ModelParams, record: UserRecord, tau: float) -> int | None:
    """First 1-indexed timestep with survival below tau, or None.

    Covariates must already be in the model's feature space.  Because the
    survival curve is strictly decreasing, the set of flagged timesteps is
    always a suffix: once flagged, a record stays flagged.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    curve = survival_curve(record.covariates, params)
    below = np.nonzero(curve < tau)[0]
    return int(below[0]) + 1 if below.size else None


def _flag_times(params, records, tau):
    return [predict_flag_time(params, rec, tau) for rec in records]


@dataclass(frozen=True)
class MetricsAtK:
    k: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int


def _confusion(preds: np.ndarray, truth: np.ndarray, k: int) -> MetricsAtK:
    tp = int(np.sum(preds & (truth == 1)))
    fp = int(np.sum(preds & (truth == 0)))
    fn = int(np.sum(~preds & (truth == 1)))
    tn = int(np.sum(~preds & (truth == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = (tp + tn) / truth.size
    return MetricsAtK(k=k, precision=precision, recall=recall, f1=f1,
                      accuracy=accuracy, tp=tp, fp=fp, tn=tn, fn=fn)


def metrics_at_k(params: ModelParams, tau: float, test: list[UserRecord], k: int) -> MetricsAtK:
    """Confusion metrics using only the first k timesteps.

    A record is predicted positive iff it is flagged by step min(k, length);
    for a strictly decreasing curve that is the same as S_k < tau.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not test:
        raise DataError("empty test set")
    flags = _flag_times(params, test, tau)
    return _metrics_from_flags(flags, test, k)


def _metrics_from_flags(flags, records, k) -> MetricsAtK:
    preds = np.array([
        f is not None and f <= min(k, rec.length)
        for f, rec in zip(flags, records)
    ])
    truth = np.array([rec.c for rec in records])
    return _confusion(preds, truth, k)


def metrics_table(
    params: ModelParams, tau: float, test: list[UserRecord], ks=(1, 2, 3, 4, 5)
) -> tuple[list[MetricsAtK], dict]:
    """MetricsAtK for each k plus the mean row over k."""
    if not test:
        raise DataError("empty test set")
    flags = _flag_times(params, test, tau)
    rows = [_metrics_from_flags(flags, test, k) for k in ks]
    mean_row = {
        "k": "mean",
        "precision": float(np.mean([r.precision for r in rows])),
        "recall": float(np.mean([r.recall for r in rows])),
        "f1": float(np.mean([r.f1 for r in rows])),
        "accuracy": float(np.mean([r.accuracy for r in rows])),
    }
    return rows, mean_row


def select_threshold(params: ModelParams, validation: list[UserRecord],
                     ks=(1, 2, 3, 4, 5)) -> float:
    """Threshold maximizing mean accuracy over the first-k evaluations.

    The grid is every distinct survival value observed on the validation
    split, their midpoints, and the midpoints toward 0 and 1, so every
    achievable confusion matrix is visited.  Accuracy is the objective
    because on balanced data it scores the degenerate flag-everyone /
    flag-no-one thresholds at chance level instead of rewarding them the
    way F1 rewards flag-everyone.  Ties break toward the larger threshold
    (earlier flags).  Touches only the validation records.
    """
    truths = np.array([r.c for r in validation])
    if not validation or len(set(truths.tolist())) < 2:
        raise DataError("threshold selection needs both classes in validation")
    curves = [survival_curve(r.covariates, params) for r in validation]
    s_at_k = np.array([
        [curve[min(k, curve.size) - 1] for k in ks] for curve in curves
    ])
    values = np.unique(np.concatenate(curves))
    grid = np.unique(np.concatenate([
        values,
        (values[1:] + values[:-1]) / 2.0,
        [values[0] / 2.0, (values[-1] + 1.0) / 2.0],
    ]))

    pos = truths == 1
    best_tau, best_score = None, -1.0
    for chunk in np.array_split(grid, max(1, grid.size // 2048)):
        preds = s_at_k[None, :, :] < chunk[:, None, None]     # (m, n, K)
        correct = (preds == pos[None, :, None]).sum(axis=1).astype(float)
        scores = (correct / len(validation)).mean(axis=1)
        for tau, score in zip(chunk, scores):
            if score >= best_score:
                best_tau, best_score = float(tau), float(score)
    return best_tau


@dataclass(frozen=True)
class GroupEarlyStats:
    t_label: int
    n_fraudsters: int
    n_early: int
    fraction_early: float
    mean_lead: float | None


@dataclass
class EarlyDetectionReport:
    """Early detections (flag strictly before the label time) by label group."""

    groups: list[GroupEarlyStats]
    fraction_early: float
    mean_lead: float | None
    n_fraudsters: int


def early_detection_report(
    params: ModelParams, tau: float, test: list[UserRecord]
) -> EarlyDetectionReport:
    fraudsters = [r for r in test if r.c == 1]
    if not fraudsters:
        raise DataError("early-detection report needs fraudsters in the test set")
    flags = _flag_times(params, fraudsters, tau)
    leads = {}
    for rec, flag in zip(fraudsters, flags):
        early = flag is not None and flag < rec.t_label
        leads.setdefault(rec.t_label, []).append(
            rec.t_label - flag if early else None
        )
    groups = []
    all_leads = []
    n_early_total = 0
    for t_label in sorted(leads):
        entries = leads[t_label]
        got = [v for v in entries if v is not None]
        n_early_total += len(got)
        all_leads.extend(got)
        groups.append(GroupEarlyStats(
            t_label=t_label,
            n_fraudsters=len(entries),
            n_early=len(got),
            fraction_early=len(got) / len(entries),
            mean_lead=float(np.mean(got)) if got else None,
        ))
    return EarlyDetectionReport(
        groups=groups,
        fraction_early=n_early_total / len(fraudsters),
        mean_lead=float(np.mean(all_leads)) if all_leads else None,
        n_fraudsters=len(fraudsters),
    )


@dataclass
class ExperimentResult:
    cfg: TrainConfig
    train_result: TrainResult
    threshold: float
    metrics: list[MetricsAtK]
    metrics_mean: dict
    early: EarlyDetectionReport


def run_experiment(split: DatasetSplit, cfg: TrainConfig,
                   ks=(1, 2, 3, 4, 5)) -> ExperimentResult:
    """Train, pick the threshold on validation, evaluate on test."""
    result = train(split, cfg)
    val = result.scaler.transform_all(split.validation)
    test = result.scaler.transform_all(split.test)
    tau = select_threshold(result.params, val, ks)
    rows, mean_row = metrics_table(result.params, tau, test, ks)
    early = early_detection_report(result.params, tau, test)
    return ExperimentResult(
        cfg=cfg, train_result=result, threshold=tau,
        metrics=rows, metrics_mean=mean_row, early=early,
    )


def _early_as_dict(early: EarlyDetectionReport) -> dict:
    return {
        "fraction_early": early.fraction_early,
        "mean_lead": early.mean_lead,
        "n_fraudsters": early.n_fraudsters,
        "groups": [asdict(g) for g in early.groups],
    }


def _cell_worker(args):
    split, cfg, seed, ks = args
    run_cfg = replace(cfg, init_seed=seed, shuffle_seed=seed + 1)
    try:
        result = run_experiment(split, run_cfg, ks)
    except (TrainingError, DataError, ValueError) as exc:
        return {"status": "error", "seed": seed, "message": str(exc)}
    return {
        "status": "ok",
        "seed": seed,
        "threshold": result.threshold,
        "best_epoch": result.train_result.best_epoch,
        "metrics": [asdict(m) for m in result.metrics],
        "metrics_mean": result.metrics_mean,
        "early": _early_as_dict(result.early),
    }


def compare_models(
    split: DatasetSplit,
    cfgs: list[TrainConfig],
    seeds: list[int],
    ks=(1, 2, 3, 4, 5),
    jobs: int = 1,
) -> dict:
    """Train/evaluate every (config, seed) cell; aggregate mean +- std.

    Std is the population standard deviation over seeds.  A failed cell is
    recorded with its error message and excluded from the aggregates; the
    remaining cells still run.
    """
    if len(cfgs) < 1:
        raise ConfigError("compare_models needs at least one config")
    tasks = [
        (ci, seed, (split, cfg, seed, tuple(ks)))
        for ci, cfg in enumerate(cfgs)
        for seed in seeds
    ]
    results: dict[tuple[int, int], dict] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (ci, seed, _), out in zip(
                tasks, pool.map(_cell_worker, [t[2] for t in tasks])
            ):
                results[(ci, seed)] = out
    else:
        for ci, seed, args in tasks:
            results[(ci, seed)] = _cell_worker(args)

    cells = []
    summary = []
    for ci, cfg in enumerate(cfgs):
        ok_cells = []
        for seed in seeds:
            cell = dict(results[(ci, seed)])
            cell["config_index"] = ci
            cell["loss_kind"] = cfg.loss_kind
            cells.append(cell)
            if cell["status"] == "ok":
                ok_cells.append(cell)
        rows = []
        k_labels = list(ks) + ["mean"]
        for pos, k in enumerate(k_labels):
            row = {"k": k}
            for metric in ("precision", "recall", "f1", "accuracy"):
                if k == "mean":
                    vals = [c["metrics_mean"][metric] for c in ok_cells]
                else:
                    vals = [c["metrics"][pos][metric] for c in ok_cells]
                row[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
                row[f"{metric}_std"] = float(np.std(vals)) if vals else None
            rows.append(row)
        fractions = [c["early"]["fraction_early"] for c in ok_cells]
        lead_vals = [
            c["early"]["mean_lead"] for c in ok_cells
            if c["early"]["mean_lead"] is not None
        ]
        summary.append({
            "config_index": ci,
            "loss_kind": cfg.loss_kind,
            "likelihood": resolve_kinds(cfg.loss_kind, cfg.likelihood)[1],
            "n_ok": len(ok_cells),
            "rows": rows,
            "early": {
                "fraction_early_mean": float(np.mean(fractions)) if fractions else None,
                "fraction_early_std": float(np.std(fractions)) if fractions else None,
                "mean_lead_mean": float(np.mean(lead_vals)) if lead_vals else None,
                "mean_lead_std": float(np.std(lead_vals)) if lead_vals else None,
            },
        })
    return {
        "configs": [asdict(cfg) for cfg in cfgs],
        "seeds": list(seeds),
        "ks": list(ks),
        "cells": cells,
        "summary": summary,
    }
