"""Run the desk-scale experiment end to end through the CLI and time each step.

Artifacts land in ``--out`` (default ``artifacts/desk_scale``); the dataset
itself is written to ``--data`` because it is large. Steps whose outputs
already exist are skipped unless ``--force`` is given, and their recorded
timings are kept.
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from cpad.cli import main as cpad

PIPELINE = ("generate", "train", "eval", "baseline-lof")  # counted toward the pipeline runtime
SWEEP_PCTS = "0,2,5,8,10,15,25"


def steps(data: Path, out: Path, scenarios: int, seed: int, seeds: int):
    split = ["--split-file", str(out / "split.json")]
    yield "generate", data, ["generate", "--scenarios", str(scenarios), "--seed", str(seed), "--out", str(data)]
    yield "train", out / "model.json", ["train", "--data", str(data), "--model-out", str(out / "model.json"),
                                        "--log", str(out / "train_log.csv"), "--split-out", str(out / "split.json")]
    yield "eval", out / "test_metrics.json", ["eval", "--model", str(out / "model.json"), "--data", str(data), *split,
                                              "--out", str(out / "test_metrics.json"),
                                              "--probs", str(out / "test_probs.csv")]
    yield "baseline-lof", out / "lof_metrics.json", ["baseline-lof", "--data", str(data), *split,
                                                     "--out", str(out / "lof_metrics.json"),
                                                     "--probs", str(out / "lof_probs.csv")]
    yield "roc", out / "roc.csv", ["roc", "--probs", str(out / "test_probs.csv"), "--out", str(out / "roc.csv")]
    yield "blackout-sweep", out / "sweep.csv", ["blackout-sweep", "--model", str(out / "model.json"),
                                                "--data", str(data), *split, "--pcts", SWEEP_PCTS,
                                                "--seeds", str(seeds), "--out", str(out / "sweep.csv")]


def run(data: Path, out: Path, scenarios: int = 1500, seed: int = 0, seeds: int = 5, force: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    timing_path = out / "timings.json"
    timings = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    for name, product, argv in steps(data, out, scenarios, seed, seeds):
        if product.exists() and not force and name in timings:
            print(f"[skip] {name}: {product} exists")
            continue
        print(f"[run] cpad {' '.join(argv)}", flush=True)
        start = time.perf_counter()
        code = cpad(argv)
        if code != 0:
            raise SystemExit(f"cpad {name} failed with exit code {code}")
        timings[name] = round(time.perf_counter() - start, 1)
        timing_path.write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    timings["pipeline_total"] = round(sum(timings[k] for k in PIPELINE), 1)
    timing_path.write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return timings


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("artifacts/desk_scale"))
    p.add_argument("--data", type=Path, default=Path("artifacts/desk_scale/data.jsonl"))
    p.add_argument("--scenarios", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5, help="blackout seeds per (mode, pct)")
    p.add_argument("--force", action="store_true")
    args = p.parse_args(argv)
    timings = run(args.data, args.out, args.scenarios, args.seed, args.seeds, args.force)
    print(json.dumps(timings, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
