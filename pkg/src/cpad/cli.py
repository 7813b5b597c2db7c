"""Command-line entry point: ``cpad <command> [flags]``.

Exit codes: 0 success, 1 invalid input (bad flags, bad data, missing labels),
2 file-system failure. Blackout percentages are given in percent (2 = 2%).
Config files are flat ``key = value`` text; explicit flags win over them.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .core import ANOMALY_TYPES, DatasetSplit, SchemaError, iter_dataset, make_split, write_dataset
from .generator import GenConfig, generate_scenarios
from .labeler import LabelerConfig, label_scenario
from .lof import LofConfig, featurize_trajectory, lof_classify
from .metrics import report as metrics_report, roc_auc, write_roc_csv
from .temporal import Model, ModelConfig
from .trainer import (BlackoutSpec, EvalResult, TrainConfig, collect, evaluate, train, write_report)

SWEEP_FIELDS = ("f1", "auc", "precision", "recall", "mcc", "accuracy")


class UsageError(Exception):
    """Invalid flags or inputs; exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --- config files ------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are field names and may be upper case (T)
    with open(path, encoding="utf-8") as fh:
        parser.read_string("[config]\n" + fh.read())
    extra = [name for name in parser.sections() if name != "config"]
    if extra:
        raise UsageError(f"{path}: config files are plain key = value lines; unexpected section [{extra[0]}]")
    return dict(parser["config"])


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(","))
    if isinstance(default, dict):
        # "Zigzag:0.2, Tailgating:0.8"
        pairs = (item.split(":") for item in raw.split(",") if item.strip())
        return {k.strip(): float(v) for k, v in pairs}
    return raw


def build_config(cls, file_values: dict[str, str], overrides: dict, source: str = "config"):
    """Dataclass defaults, then matching ``file_values``, then non-None ``overrides``."""
    template = cls()
    values = {}
    for key, raw in file_values.items():
        try:
            values[key] = _coerce(raw, getattr(template, key))
        except ValueError as exc:
            raise UsageError(f"{source}: bad value for {key!r}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _config_file(path, *classes) -> list[dict[str, str]]:
    """Split a config file's keys among ``classes``; unknown keys are an error."""
    raw = read_config(path) if path else {}
    parts = []
    for cls in classes:
        names = {f.name for f in dataclasses.fields(cls)}
        parts.append({k: v for k, v in raw.items() if k in names})
    unknown = set(raw) - set().union(*(p.keys() for p in parts))
    if unknown:
        raise UsageError(f"{path}: unknown key {sorted(unknown)[0]!r}")
    return parts


def _fraction(pct: float) -> float:
    if not 0.0 <= pct <= 100.0:
        raise UsageError(f"blackout percentage must lie in [0, 100], got {pct}")
    return pct / 100.0


def _same_file(a, b) -> bool:
    return Path(a).resolve() == Path(b).resolve()


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dataset_split(args) -> DatasetSplit:
    if args.split_file:
        return DatasetSplit.from_json(json.loads(Path(args.split_file).read_text()))
    index = [(sc.scenario_id, [a.agent_id for a in sc.agents]) for sc in iter_dataset(args.data)]
    return make_split(index, seed=args.split_seed)


def _segment_samples(args, segment: str):
    split = _dataset_split(args)
    return collect(iter_dataset(args.data), {segment: split.segment(segment)})[segment]


# --- commands --------------------------------------------------------------------


def cmd_generate(args) -> int:
    (file_vals,) = _config_file(args.config, GenConfig)
    cfg = build_config(GenConfig, file_vals, {"n_agents": args.agents, "seed": args.seed}, args.config)
    if args.scenarios < 0:
        raise UsageError("--scenarios must be >= 0")
    counts = dict.fromkeys(ANOMALY_TYPES, 0)
    stats = {"agents": 0, "anomalous": 0}

    def tally(scenarios):
        for sc in scenarios:
            for a in sc.agents:
                stats["agents"] += 1
                stats["anomalous"] += a.label.is_anomalous
                for t in a.label.types:
                    counts[t] += 1
            yield sc if args.label else sc.with_agents(tuple(a.with_label(None) for a in sc.agents))

    n = write_dataset(tally(generate_scenarios(cfg, args.scenarios)), args.out)
    share = stats["anomalous"] / stats["agents"] if stats["agents"] else 0.0
    print(f"wrote {n} scenarios ({stats['agents']} agents) to {args.out}")
    print(f"anomalous share: {share:.4f}")
    for t in ANOMALY_TYPES:
        frac = counts[t] / stats["agents"] if stats["agents"] else 0.0
        print(f"  {t}: {frac:.4f}")
    return 0


def cmd_label(args) -> int:
    if _same_file(args.data, args.out):
        raise UsageError("--out must differ from --data (inputs are never rewritten)")
    (file_vals,) = _config_file(args.config, LabelerConfig)
    cfg = build_config(LabelerConfig, file_vals, {}, args.config)
    n = write_dataset((label_scenario(sc, cfg) for sc in iter_dataset(args.data)), args.out)
    print(f"labeled {n} scenarios into {args.out}")
    return 0


def _train_blackout(args):
    if args.train_blackout is None:
        return None
    return BlackoutSpec(args.train_blackout, _fraction(args.train_pct), args.max_block, args.seed or 0)


def cmd_train(args) -> int:
    train_vals, model_vals = _config_file(args.config, TrainConfig, ModelConfig)
    tc = build_config(TrainConfig, train_vals, {
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
        "pos_weight": args.pos_weight, "seed": args.seed, "patience": args.patience,
        "train_blackout": _train_blackout(args),
    }, args.config)
    mc = build_config(ModelConfig, model_vals, {
        "hidden": args.hidden, "gat_heads": args.gat_heads, "layers": args.layers, "attn_heads": args.attn_heads,
    }, args.config)
    split = _dataset_split(args)
    if args.split_out:
        _write_json(split.to_json(), args.split_out)

    def progress(row):
        print(f"epoch {row['epoch']}: train_loss={row['train_loss']:.5f} val_f1={row['val_f1']:.4f}",
              file=sys.stderr, flush=True)

    result = train(args.data, split, tc, mc, progress)
    result.model.save(args.model_out)
    if args.log:
        result.write_log(args.log)
    print(f"best epoch {result.best_epoch} (val F1 {result.best_val_f1:.4f}); model written to {args.model_out}")
    return 0


def _eval_blackout(args):
    if args.blackout is None:
        if args.pct not in (None, 0):
            raise UsageError("--pct needs --blackout")
        return None
    return BlackoutSpec(args.blackout, _fraction(args.pct or 0.0), args.max_block, args.seed)


def cmd_eval(args) -> int:
    spec = _eval_blackout(args)
    model = Model.load(args.model)
    samples = _segment_samples(args, args.segment)
    result = evaluate(model, samples, spec)
    write_report(result, args.out)
    if args.probs:
        result.write_probabilities(args.probs)
    r = result.report
    auc = "n/a" if r.auc is None else f"{r.auc:.4f}"
    print(f"{args.segment}: F1={r.f1:.4f} AUC={auc} precision={r.precision:.4f} recall={r.recall:.4f}")
    return 0


def _parse_pcts(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"--pcts must be comma-separated numbers, got {text!r}") from None


def cmd_blackout_sweep(args) -> int:
    modes = ["random", "sequential"] if args.mode == "both" else [args.mode]
    pcts = _parse_pcts(args.pcts)
    for p in pcts:
        _fraction(p)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    model = Model.load(args.model)
    samples = _segment_samples(args, args.segment)
    rows = sweep(model, samples, modes, pcts, range(args.seeds), args.max_block)
    write_sweep_csv(rows, args.out)
    for row in rows:
        if row["seed"] == "mean":
            print(f"{row['mode']:>10} {row['pct']:>6}%  F1={row['f1']:.4f}  AUC={row['auc']:.4f}")
    return 0


def sweep(model, samples, modes, pcts, seeds, max_block: int = 10) -> list[dict]:
    """Per-seed rows followed by one ``seed = "mean"`` row per (mode, pct)."""
    rows, means = [], []
    for mode in modes:
        for pct in pcts:
            block = []
            for seed in seeds:
                spec = BlackoutSpec(mode, pct / 100.0, max_block, seed)
                r = evaluate(model, samples, spec).report
                vals = {k: (float("nan") if getattr(r, k) is None else getattr(r, k)) for k in SWEEP_FIELDS}
                block.append({"mode": mode, "pct": pct, "seed": seed, **vals})
            rows += block
            means.append({"mode": mode, "pct": pct, "seed": "mean",
                          **{k: float(np.mean([b[k] for b in block])) for k in SWEEP_FIELDS}})
    return rows + means


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "pct", "seed", *SWEEP_FIELDS])
        for r in rows:
            w.writerow([r["mode"], f"{r['pct']:g}", r["seed"], *(repr(float(r[k])) for k in SWEEP_FIELDS)])


def cmd_roc(args) -> int:
    labels, scores = [], []
    with open(args.probs, newline="") as fh:
        for row in csv.DictReader(fh):
            labels.append(int(row["label"]))
            scores.append(float(row["prob"]))
    try:
        auc, points = roc_auc(labels, scores)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_roc_csv(points, args.out)
    print(f"AUC={auc:.4f} over {len(labels)} samples; {len(points)} ROC points written to {args.out}")
    return 0


def cmd_baseline_lof(args) -> int:
    (file_vals,) = _config_file(args.config, LofConfig)
    cfg = build_config(LofConfig, file_vals, {"k": args.k, "threshold": args.threshold}, args.config)
    split = _dataset_split(args)
    fit_pairs, test_pairs = set(split.train), set(split.segment(args.segment))
    fit, test, labels, keys = [], [], [], []
    for sc in iter_dataset(args.data):
        for a in sc.agents:
            key = (sc.scenario_id, a.agent_id)
            if key in fit_pairs:
                fit.append(featurize_trajectory(a))
            if key in test_pairs:
                if a.label is None:
                    raise UsageError(f"scenario {sc.scenario_id} agent {a.agent_id} has no label; run `cpad label` first")
                test.append(featurize_trajectory(a))
                labels.append(int(a.label.is_anomalous))
                keys.append(key)
    if not test:
        raise UsageError(f"split segment {args.segment!r} is empty")
    _, scores = lof_classify(np.array(fit), np.array(test), cfg)
    result = EvalResult(metrics_report(labels, scores, threshold=cfg.threshold), keys, np.array(labels), scores)
    write_report(result, args.out)
    if args.probs:
        result.write_probabilities(args.probs)
    r = result.report
    auc = "n/a" if r.auc is None else f"{r.auc:.4f}"
    print(f"LOF {args.segment}: F1={r.f1:.4f} AUC={auc} precision={r.precision:.4f} recall={r.recall:.4f}")
    return 0


# --- parser ----------------------------------------------------------------------


def _split_flags(p, segment: bool = True) -> None:
    if segment:
        p.add_argument("--split", dest="segment", choices=("train", "val", "test"), default="test",
                       help="which split segment to score")
    p.add_argument("--split-file", help="split JSON written by `train --split-out`")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the 80/10/10 scenario split")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpad", description="Cooperative-perception anomaly detection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="simulate scenarios to JSONL")
    p.add_argument("--scenarios", type=int, required=True)
    p.add_argument("--agents", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--no-label", dest="label", action="store_false", help="leave labels empty")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("label", help="apply the rule labeler to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train the classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--log", help="per-epoch CSV")
    p.add_argument("--split-out", help="write the split used")
    _split_flags(p, segment=False)
    for flag, kind in (("--epochs", int), ("--batch-size", int), ("--lr", float), ("--pos-weight", float),
                       ("--seed", int), ("--patience", int), ("--hidden", int), ("--gat-heads", int),
                       ("--layers", int), ("--attn-heads", int)):
        p.add_argument(flag, type=kind)
    p.add_argument("--train-blackout", choices=("random", "sequential"), help="blackout during training (off by default)")
    p.add_argument("--train-pct", type=float, default=0.0)
    p.add_argument("--max-block", type=int, default=10)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model, optionally under blackout")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--probs", help="per-sample probability CSV")
    _split_flags(p)
    p.add_argument("--blackout", choices=("random", "sequential"))
    p.add_argument("--pct", type=float, help="percent of non-ego slots blacked out")
    p.add_argument("--max-block", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("blackout-sweep", help="metrics over a grid of blackout levels and seeds")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("random", "sequential", "both"), default="both")
    p.add_argument("--pcts", default="2,5,8,10,15,25")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--max-block", type=int, default=10)
    p.add_argument("--out", required=True)
    _split_flags(p)
    p.set_defaults(func=cmd_blackout_sweep)

    p = sub.add_parser("roc", help="ROC curve from a probability CSV")
    p.add_argument("--probs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("baseline-lof", help="Local Outlier Factor baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probs")
    p.add_argument("--k", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--config")
    _split_flags(p)
    p.set_defaults(func=cmd_baseline_lof)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, SchemaError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
