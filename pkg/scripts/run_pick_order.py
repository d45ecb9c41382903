"""Train a CM on both pick-order styles and count which gripper closes first."""

import argparse
import json

from bikc.experiments import first_close_counts, pick_order_experiment, run_task_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--demos", type=int, default=50, help="total demos, split evenly across styles")
    ap.add_argument("--episodes", type=int, default=50)
    args = ap.parse_args()
    res = run_task_experiment(pick_order_experiment(n_demos=args.demos, n_episodes=args.episodes))
    stack = res["stacks"]["cp"]
    print(json.dumps({"first_close": first_close_counts(stack["reports"]), "overall": stack["overall"],
                      "minutes": round(res["timings"]["total"] / 60, 1)}, indent=2))


if __name__ == "__main__":
    main()
