"""Command-line entry point.

Subcommands: generate | train | evaluate | predict | gradcheck | compare.
A run is configured by a single JSON document with sections ``generator``,
``train``, ``eval`` and ``compare``; unknown keys are rejected, command
flags override file values, and the fully resolved config is echoed next
to the outputs for provenance.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import model as model_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    GeneratorConfig,
    Standardizer,
    generate_synthetic,
    parse_records,
    split_dataset,
    write_records,
)
from .errors import ConfigError, DataError, TrainingError
from .nn import finite_diff_gradient, init_params
from .survival import SAFE, SAFE_R, CensorLabel, analytic_hazard_grad, per_sample_loss
from .training import (
    TrainConfig,
    compare_models,
    early_detection_report,
    metrics_table,
    predict_flag_time,
    select_threshold,
    train,
)

DEFAULT_KS = [1, 2, 3, 4, 5]


def _default_config() -> dict:
    return {
        "generator": {**asdict(GeneratorConfig()), "seed": 7},
        "train": {**asdict(TrainConfig()), "split_seed": 101},
        "eval": {"ks": list(DEFAULT_KS)},
        "compare": {
            "loss_kinds": ["safe", "safe-r"],
            "seeds": [0, 1, 2, 3, 4],
            "likelihood": None,
            "ks": list(DEFAULT_KS),
        },
    }


def _merge_checked(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge_checked(base[key], value, where)
        else:
            out[key] = value
    return out


def load_run_config(path: str | None) -> dict:
    cfg = _default_config()
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})")
    if not isinstance(user, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return _merge_checked(cfg, user)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(cfg: dict, path) -> None:
    _write_json(path, cfg)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} {path} does not exist")
    return p


def _prepare_out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _train_config(section: dict, args) -> tuple[TrainConfig, int]:
    section = dict(section)
    split_seed = section.pop("split_seed")
    for flag in ("loss_kind", "likelihood", "hidden_size", "batch_size",
                 "learning_rate", "epochs", "patience", "init_seed",
                 "shuffle_seed"):
        value = getattr(args, flag, None)
        if value is not None:
            section[flag] = value
    if getattr(args, "split_seed", None) is not None:
        split_seed = args.split_seed
    cfg = TrainConfig(**section)
    cfg.validate()
    return cfg, split_seed


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_run_config(args.config)
    gen = dict(cfg["generator"])
    if args.seed is not None:
        gen["seed"] = args.seed
    if args.n_users is not None:
        gen["n_users"] = args.n_users
    if args.fraud_fraction is not None:
        gen["fraud_fraction"] = args.fraud_fraction
    cfg["generator"] = gen
    seed = gen.pop("seed")
    gcfg = GeneratorConfig(**gen)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    records = generate_synthetic(gcfg, seed)
    write_records(records, out)
    _echo_config(cfg, str(out) + ".config.json")

    n_fraud = sum(r.c for r in records)
    print(f"wrote {len(records)} records to {out}")
    print(f"classes: {n_fraud} fraudsters, {len(records) - n_fraud} normal")
    lengths = {}
    for rec in records:
        lengths[rec.length] = lengths.get(rec.length, 0) + 1
    print("length histogram:")
    for length in sorted(lengths):
        print(f"  T={length:<3d} {lengths[length]}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    tcfg, split_seed = _train_config(cfg["train"], args)
    cfg["train"] = {**asdict(tcfg), "split_seed": split_seed}
    _require_file(args.data, "dataset")
    records = parse_records(args.data)
    split = split_dataset(records, split_seed)
    print(
        f"split {len(records)} records into {len(split.train)} train / "
        f"{len(split.validation)} validation / {len(split.test)} test"
    )

    result = train(split, tcfg)
    for stats in result.history:
        print(
            f"epoch {stats.epoch:3d}  train_loss={stats.train_loss:.6f}  "
            f"val_loss={stats.val_loss:.6f}"
        )
    print(f"best epoch: {result.best_epoch} (val_loss={result.best_val_loss:.6f})")

    val = result.scaler.transform_all(split.validation)
    test = result.scaler.transform_all(split.test)
    ks = cfg["eval"]["ks"]
    tau = select_threshold(result.params, val, ks)
    print(f"selected threshold tau={tau!r}")
    rows, mean_row = metrics_table(result.params, tau, test, ks)
    early = early_detection_report(result.params, tau, test)
    for row in rows:
        print(
            f"k={row.k}  precision={row.precision:.4f} recall={row.recall:.4f} "
            f"f1={row.f1:.4f} accuracy={row.accuracy:.4f}"
        )
    print(
        f"k=mean  precision={mean_row['precision']:.4f} "
        f"recall={mean_row['recall']:.4f} f1={mean_row['f1']:.4f} "
        f"accuracy={mean_row['accuracy']:.4f}"
    )
    print(
        f"early detection: fraction={early.fraction_early:.4f} "
        f"mean_lead={early.mean_lead}"
    )

    ckpt_path = Path(args.checkpoint_out)
    if ckpt_path.parent and not ckpt_path.parent.exists():
        ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, Checkpoint(
        params=result.params,
        scaler=result.scaler,
        threshold=tau,
        loss_kind=tcfg.loss_kind,
        likelihood=tcfg.likelihood,
        split_seed=split_seed,
    ))
    history_path = args.history_out or str(ckpt_path) + ".history.csv"
    _write_csv(
        history_path,
        ["epoch", "train_loss", "val_loss"],
        [[s.epoch, s.train_loss, s.val_loss] for s in result.history],
    )
    metrics_doc = _metrics_doc(rows, mean_row, early, tau)
    _write_json(str(ckpt_path) + ".train_metrics.json", metrics_doc)
    _echo_config(cfg, str(ckpt_path) + ".config.json")
    print(f"checkpoint written to {ckpt_path}")
    return 0


def _metrics_doc(rows, mean_row, early, tau) -> dict:
    return {
        "threshold": tau,
        "metrics": [asdict(r) for r in rows],
        "metrics_mean": mean_row,
        "early_detection": {
            "fraction_early": early.fraction_early,
            "mean_lead": early.mean_lead,
            "n_fraudsters": early.n_fraudsters,
            "groups": [asdict(g) for g in early.groups],
        },
    }


def _metrics_csv_rows(rows, mean_row) -> list[list]:
    out = [
        [r.k, r.precision, r.recall, r.f1, r.accuracy, r.tp, r.fp, r.tn, r.fn]
        for r in rows
    ]
    out.append([
        "mean", mean_row["precision"], mean_row["recall"], mean_row["f1"],
        mean_row["accuracy"], None, None, None, None,
    ])
    return out


def _eval_records(args, ckpt) -> list:
    records = parse_records(args.data)
    dim = records[0].covariates.shape[1] if records else 0
    if records and dim != ckpt.params.input_size:
        raise DataError(
            f"dataset covariate dimension {dim} does not match checkpoint "
            f"input size {ckpt.params.input_size}"
        )
    if args.all or ckpt.split_seed is None:
        return records
    return split_dataset(records, ckpt.split_seed).test


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    _require_file(args.data, "dataset")
    out_dir = _prepare_out_dir(args.out_dir)
    test = _eval_records(args, ckpt)
    if not test:
        raise DataError("no records to evaluate")
    tau = args.threshold if args.threshold is not None else ckpt.threshold
    if tau is None:
        raise ConfigError("checkpoint has no stored threshold; pass --threshold")
    scaler = ckpt.scaler or Standardizer.identity(ckpt.params.input_size)
    scaled = scaler.transform_all(test)
    ks = cfg["eval"]["ks"]
    rows, mean_row = metrics_table(ckpt.params, tau, scaled, ks)
    early = early_detection_report(ckpt.params, tau, scaled)

    doc = _metrics_doc(rows, mean_row, early, tau)
    _write_json(out_dir / "metrics.json", doc)
    _write_csv(
        out_dir / "metrics.csv",
        ["k", "precision", "recall", "f1", "accuracy", "tp", "fp", "tn", "fn"],
        _metrics_csv_rows(rows, mean_row),
    )
    _write_csv(
        out_dir / "early_detection.csv",
        ["t_label", "n_fraudsters", "n_early", "fraction_early", "mean_lead"],
        [
            [g.t_label, g.n_fraudsters, g.n_early, g.fraction_early, g.mean_lead]
            for g in early.groups
        ] + [["all", early.n_fraudsters, None, early.fraction_early, early.mean_lead]],
    )
    _echo_config(cfg, out_dir / "resolved_config.json")
    for row in rows:
        print(
            f"k={row.k}  precision={row.precision:.4f} recall={row.recall:.4f} "
            f"f1={row.f1:.4f} accuracy={row.accuracy:.4f}"
        )
    print(
        f"k=mean  f1={mean_row['f1']:.4f} accuracy={mean_row['accuracy']:.4f}"
    )
    print(f"outputs written to {out_dir}")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    _require_file(args.data, "dataset")
    records = parse_records(args.data)
    if records and records[0].covariates.shape[1] != ckpt.params.input_size:
        raise DataError(
            f"dataset covariate dimension {records[0].covariates.shape[1]} "
            f"does not match checkpoint input size {ckpt.params.input_size}"
        )
    tau = args.threshold if args.threshold is not None else ckpt.threshold
    if tau is None:
        raise ConfigError("checkpoint has no stored threshold; pass --threshold")
    scaler = ckpt.scaler or Standardizer.identity(ckpt.params.input_size)
    out = Path(args.out)
    n_flagged = 0
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            scaled = scaler.transform(rec)
            curve = model_mod.survival_curve(scaled.covariates, ckpt.params)
            flag = predict_flag_time(ckpt.params, scaled, tau)
            n_flagged += flag is not None
            obj = {
                "user_id": rec.user_id,
                "survival": curve.tolist(),
                "flag_time": flag,
                "c": rec.c,
                "t_label": rec.t_label,
                "early": (flag is not None and flag < rec.t_label)
                if rec.c == 1 else None,
            }
            fh.write(json.dumps(obj) + "\n")
    print(f"wrote {len(records)} predictions to {out} ({n_flagged} flagged)")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _rel_err(analytic: np.ndarray, reference: np.ndarray, floor: float) -> float:
    return float(np.max(np.abs(analytic - reference) / (np.abs(reference) + floor)))


def _gradcheck_hazard_suite(rng, n_instances=50):
    """Closed-form d(loss)/d(hazard) vs central differences of the loss."""
    worst = 0.0
    for _ in range(n_instances):
        t_label = int(rng.integers(1, 9))
        length = t_label + int(rng.integers(0, 3))
        lam = rng.uniform(0.05, 0.6, size=length)
        c = int(rng.integers(0, 2))
        label = CensorLabel(c, t_label)
        for kind in (SAFE, SAFE_R):
            grad = analytic_hazard_grad(lam, label, kind)
            fd = np.zeros(t_label)
            h = 1e-6
            for i in range(t_label):
                up, down = lam.copy(), lam.copy()
                up[i] += h
                down[i] -= h
                fd[i] = (
                    per_sample_loss(up, label, kind)
                    - per_sample_loss(down, label, kind)
                ) / (2 * h)
            worst = max(worst, _rel_err(grad, fd, 1e-12))
    return worst


def _gradcheck_sign_suite(rng, n_instances=50):
    """Exact sign laws of the hazard gradients."""
    worst = 0.0
    for _ in range(n_instances):
        t_label = int(rng.integers(1, 9))
        lam = rng.uniform(0.05, 0.6, size=t_label)
        for c in (0, 1):
            label = CensorLabel(c, t_label)
            g_safe = analytic_hazard_grad(lam, label, SAFE)
            g_reg = analytic_hazard_grad(lam, label, SAFE_R)
            if c == 0:
                bad = max(np.max(np.abs(g_safe - 1.0)), np.max(np.abs(g_reg - 1.0)))
            else:
                bad = 0.0 if np.all(g_safe < 0.0) else 1.0
                if t_label > 1 and not np.all(g_reg[:-1] == 1.0):
                    bad = 1.0
                if not g_reg[-1] < 0.0:
                    bad = 1.0
            worst = max(worst, float(bad))
    return worst


def _gradcheck_bptt_suite(rng, corrupt=False, per_case=4):
    """Backpropagation vs the finite-difference oracle for every loss kind
    and both censor classes."""
    from .model import backward, record_loss

    results = []
    for kind in model_mod.CONFIG_KINDS:
        head_kind, _ = model_mod.resolve_kinds(kind)
        for c in (0, 1):
            worst = 0.0
            for _ in range(per_case):
                hidden = int(rng.integers(2, 5))
                dim = int(rng.integers(1, 4))
                length = int(rng.integers(1, 6))
                t_label = int(rng.integers(1, length + 1))
                params = init_params(dim, hidden, int(rng.integers(1 << 30)),
                                     head_kind)
                x = rng.normal(size=(length, dim))
                grads = backward(x, params, kind, c, t_label)
                if corrupt:
                    grads["head_w"] = grads["head_w"] + 1e-3
                fd = finite_diff_gradient(
                    lambda p: record_loss(x, p, kind, c, t_label), params
                )
                for name in fd:
                    worst = max(worst, _rel_err(grads[name], fd[name], 1e-3))
            results.append((kind, c, worst))
    return results


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0

    worst = _gradcheck_hazard_suite(rng)
    status = "ok" if worst < 1e-6 else "FAIL"
    failures += status != "ok"
    print(f"suite=hazard-grad max_rel_err={worst:.3e} tol=1e-06 status={status}")

    worst = _gradcheck_sign_suite(rng)
    status = "ok" if worst == 0.0 else "FAIL"
    failures += status != "ok"
    print(f"suite=sign-laws max_deviation={worst:.3e} tol=0 status={status}")

    for kind, c, err in _gradcheck_bptt_suite(rng, corrupt=args.corrupt):
        status = "ok" if err < 1e-4 else "FAIL"
        failures += status != "ok"
        print(
            f"suite=bptt kind={kind} c={c} max_rel_err={err:.3e} "
            f"tol=1e-04 status={status}"
        )
    if failures:
        print(f"gradcheck FAILED ({failures} suites)")
        return 3
    print("gradcheck passed")
    return 0


def cmd_compare(args) -> int:
    cfg = load_run_config(args.config)
    tcfg, split_seed = _train_config(cfg["train"], args)
    comp = cfg["compare"]
    _require_file(args.data, "dataset")
    out_dir = _prepare_out_dir(args.out_dir)
    records = parse_records(args.data)
    split = split_dataset(records, split_seed)
    cfgs = []
    for kind in comp["loss_kinds"]:
        likelihood = comp["likelihood"] if kind not in (SAFE, SAFE_R) else None
        cfgs.append(replace(tcfg, loss_kind=kind, likelihood=likelihood))
    table = compare_models(split, cfgs, comp["seeds"], comp["ks"], jobs=args.jobs)

    _write_json(out_dir / "comparison.json", table)
    header = ["loss_kind", "k"]
    for metric in ("precision", "recall", "f1", "accuracy"):
        header += [f"{metric}_mean", f"{metric}_std"]
    header += ["fraction_early_mean", "fraction_early_std",
               "mean_lead_mean", "mean_lead_std"]
    rows = []
    for entry in table["summary"]:
        for row in entry["rows"]:
            csv_row = [entry["loss_kind"], row["k"]]
            for metric in ("precision", "recall", "f1", "accuracy"):
                csv_row += [row[f"{metric}_mean"], row[f"{metric}_std"]]
            csv_row += [
                entry["early"]["fraction_early_mean"],
                entry["early"]["fraction_early_std"],
                entry["early"]["mean_lead_mean"],
                entry["early"]["mean_lead_std"],
            ]
            rows.append(csv_row)
    _write_csv(out_dir / "comparison.csv", header, rows)
    _echo_config(cfg, out_dir / "resolved_config.json")

    for entry in table["summary"]:
        mean_row = entry["rows"][-1]
        print(
            f"{entry['loss_kind']:<12s} mean_f1={mean_row['f1_mean']} "
            f"fraction_early={entry['early']['fraction_early_mean']}"
        )
    print(f"outputs written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="survearly",
        description="Recurrent survival analysis for early detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[], help="write a synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-users", type=int, default=None, dest="n_users")
    p.add_argument("--fraud-fraction", type=float, default=None,
                   dest="fraud_fraction")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint-out", required=True, dest="checkpoint_out")
    p.add_argument("--history-out", default=None, dest="history_out")
    p.add_argument("--loss-kind", default=None, dest="loss_kind")
    p.add_argument("--likelihood", default=None)
    p.add_argument("--hidden-size", type=int, default=None, dest="hidden_size")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None,
                   dest="learning_rate")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--init-seed", type=int, default=None, dest="init_seed")
    p.add_argument("--shuffle-seed", type=int, default=None, dest="shuffle_seed")
    p.add_argument("--split-seed", type=int, default=None, dest="split_seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--all", action="store_true",
                   help="evaluate every record instead of the stored test split")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write per-user survival curves")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="gradient verification suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true",
                   help="inject a deliberate gradient error (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="train and compare several loss kinds")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
