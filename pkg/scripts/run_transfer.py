"""Train BiKC and the unconditioned CM on the transfer task and compare them."""

import argparse
import json

from bikc.experiments import run_task_experiment, transfer_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--demos", type=int, default=100)
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--iters", type=int, default=None, help="generator iterations (default from config)")
    ap.add_argument("--threshold", type=float, default=None, help="keypose switch threshold")
    args = ap.parse_args()
    kw = {"n_demos": args.demos, "n_episodes": args.episodes}
    if args.threshold is not None:
        kw["switch_threshold"] = args.threshold
    exp = transfer_experiment(**kw)
    if args.iters is not None:
        for g in exp.stacks.values():
            g.iters = args.iters
    res = run_task_experiment(exp)
    summary = {name: s["overall"] for name, s in res["stacks"].items()}
    summary["predictor_heldout_mse"] = res["predictor"]["heldout_mse"]
    summary["minutes"] = round(res["timings"]["total"] / 60, 1)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
