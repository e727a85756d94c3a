"""Checkpoint files: JSON with flattened weight arrays keyed by name.

The format round-trips bit-exactly at 64-bit (floats are serialized with
Python's shortest round-trip repr).  Training adds the feature scaler, the
selected threshold, and the seeds needed to reproduce the split, so a
checkpoint alone is enough to evaluate or predict.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Standardizer
from .errors import DataError
from .nn import HEAD_DIMS, AdamState, ModelParams, init_params

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState | None = None
    scaler: Standardizer | None = None
    threshold: float | None = None
    loss_kind: str | None = None
    likelihood: str | None = None
    split_seed: int | None = None


def _flatten(arrays: dict[str, np.ndarray]) -> dict[str, list[float]]:
    return {name: arr.reshape(-1).tolist() for name, arr in arrays.items()}


def _unflatten(flat: dict, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, ref in like.items():
        if name not in flat:
            raise DataError(f"checkpoint is missing weight array {name!r}")
        values = np.asarray(flat[name], dtype=np.float64)
        if values.size != ref.size:
            raise DataError(
                f"checkpoint array {name!r} has {values.size} entries, "
                f"expected {ref.size}"
            )
        out[name] = values.reshape(ref.shape)
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    params = ckpt.params
    doc = {
        "format_version": FORMAT_VERSION,
        "hidden_size": params.hidden_size,
        "input_size": params.input_size,
        "rng_seed": params.rng_seed,
        "head_kind": params.head_kind,
        "weights": _flatten(params.arrays()),
        "adam": None,
        "scaler": None,
        "threshold": ckpt.threshold,
        "loss_kind": ckpt.loss_kind,
        "likelihood": ckpt.likelihood,
        "split_seed": ckpt.split_seed,
    }
    if ckpt.adam is not None:
        doc["adam"] = {
            "learning_rate": ckpt.adam.learning_rate,
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "epsilon": ckpt.adam.epsilon,
            "step_count": ckpt.adam.step_count,
            "m": _flatten(ckpt.adam.m),
            "v": _flatten(ckpt.adam.v),
        }
    if ckpt.scaler is not None:
        doc["scaler"] = {
            "mean": ckpt.scaler.mean.tolist(),
            "std": ckpt.scaler.std.tolist(),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a valid checkpoint ({exc})")
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint format "
            f"{doc.get('format_version')!r}"
        )
    head_kind = doc["head_kind"]
    if head_kind not in HEAD_DIMS:
        raise DataError(f"{path}: unknown head kind {head_kind!r}")
    template = init_params(
        doc["input_size"], doc["hidden_size"], doc["rng_seed"], head_kind
    )
    arrays = _unflatten(doc["weights"], template.arrays())
    for name, arr in arrays.items():
        setattr(template, name, arr)
    adam = None
    if doc.get("adam") is not None:
        raw = doc["adam"]
        adam = AdamState(
            learning_rate=raw["learning_rate"],
            beta1=raw["beta1"],
            beta2=raw["beta2"],
            epsilon=raw["epsilon"],
            step_count=raw["step_count"],
            m=_unflatten(raw["m"], template.arrays()),
            v=_unflatten(raw["v"], template.arrays()),
        )
    scaler = None
    if doc.get("scaler") is not None:
        scaler = Standardizer(
            mean=np.asarray(doc["scaler"]["mean"], dtype=np.float64),
            std=np.asarray(doc["scaler"]["std"], dtype=np.float64),
        )
    return Checkpoint(
        params=template,
        adam=adam,
        scaler=scaler,
        threshold=doc.get("threshold"),
        loss_kind=doc.get("loss_kind"),
        likelihood=doc.get("likelihood"),
        split_seed=doc.get("split_seed"),
    )
