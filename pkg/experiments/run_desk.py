"""Desk-scale end-to-end run and ablation arms.

    python3 experiments/run_desk.py --work /path/to/scratch

Generates the dataset, trains every arm (trunk × alpha × seed) through the
CLI, evaluates each at 12 iterations and copies the small artefacts
(configs, logs, reports, timings) into experiments/results/. The seed-0
LSTM/alpha=0.1 model is also copied, since the acceptance suite re-evaluates
it. Finished arms are skipped, so the script can be re-run after an
interruption.
"""
import argparse
import json
import shutil
import time
from pathlib import Path

from deeprm.cli import main as cli
from deeprm.network import DeepRMNet

HERE = Path(__file__).parent
RESULTS = HERE / "results"
ARMS = [("lstm", 0.1), ("mlp", 0.1), ("lstm", 0.0)]
SEEDS = (0, 1, 2)


def arm_name(trunk, alpha, seed):
    return f"{trunk}_a{alpha:g}_s{seed}"


def run(argv):
    code = cli(argv)
    if code != 0:
        raise SystemExit(f"command failed ({code}): {' '.join(argv)}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", required=True, help="scratch directory for the dataset and checkpoints")
    ap.add_argument("--seeds", type=int, nargs="*", default=list(SEEDS))
    args = ap.parse_args()
    work = Path(args.work)
    data = work / "data"
    if not (data / "meta.json").exists():
        run(["gen-data", "--config", str(HERE / "desk_gen.json"), "--out", str(data)])
    for seed in args.seeds:
        for trunk, alpha in ARMS:
            name = arm_name(trunk, alpha, seed)
            dest = RESULTS / name
            if (dest / "eval_summary.json").exists():
                continue
            out = work / "runs" / name
            t0 = time.time()
            run(["-v", "train", "--config", str(HERE / "desk_train.json"), "--data", str(data), "--out", str(out),
                 "--trunk", trunk, "--alpha", str(alpha), "--seed", str(seed)])
            train_s = time.time() - t0
            t0 = time.time()
            run(["eval", "--checkpoint", str(out / "model"), "--data", str(data), "--iters", "12",
                 "--out", str(out / "eval")])
            eval_s = time.time() - t0
            dest.mkdir(parents=True, exist_ok=True)
            shutil.copy(out / "config.json", dest / "train_config.json")
            shutil.copy(out / "train_log.csv", dest / "train_log.csv")
            for f in ("eval.csv", "eval_iterations.csv", "eval_plot.svg", "eval_summary.json"):
                shutil.copy(out / "eval" / f, dest / f)
            (dest / "timing.json").write_text(json.dumps({"train_seconds": train_s, "eval_seconds": eval_s,
                                                          "threads": 1}, indent=1))
            if (trunk, alpha, seed) == ("lstm", 0.1, 0):
                # re-save rather than copy: the manifest names its blob file
                DeepRMNet.load(out / "model").save(RESULTS / "a7_model")
            print(f"{name}: train {train_s / 60:.1f} min, eval {eval_s:.0f} s", flush=True)


if __name__ == "__main__":
    main()
