"""Conveyor catch under per-NFE latency: one-step CM against 10-step DDPM."""

import argparse
import json

from bikc.experiments import conveyor_experiment, run_task_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--cost-per-nfe-ms", type=float, default=20.0)
    args = ap.parse_args()
    exp = conveyor_experiment(n_episodes=args.episodes)
    exp.latency.cost_per_nfe_ms = args.cost_per_nfe_ms
    res = run_task_experiment(exp)
    out = {name: {r["stage"]: r["rate"] for r in s["rows"]} for name, s in res["stacks"].items()}
    out["minutes"] = round(res["timings"]["total"] / 60, 1)
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
