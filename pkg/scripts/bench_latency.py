"""Per-call wall-clock of one-step CM against DDPM sampling on the same backbone."""

import argparse

import numpy as np

from bikc.consistency import CtConfig, init_cm_policy, make_backbone
from bikc.data import NormStats
from bikc.ddpm import DdpmConfig, init_ddpm_policy
from bikc.experiments import bench_latency


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--calls", type=int, default=50)
    ap.add_argument("--eval-steps", type=int, default=10)
    ap.add_argument("--obs-dim", type=int, default=12)
    args = ap.parse_args()
    ct = CtConfig()
    net = make_backbone(ct, 6, args.obs_dim)
    stats = NormStats.identity(args.obs_dim, 6, 6)
    cm = init_cm_policy(net, ct, stats, 0)
    dp = init_ddpm_policy(net, DdpmConfig(eval_steps=args.eval_steps), stats, 0)
    rows = bench_latency(cm, dp, calls=args.calls)
    for algo in ("cm", "ddpm"):
        ms = [r["wall_ms"] for r in rows if r["algo"] == algo]
        nfe = rows[[r["algo"] for r in rows].index(algo)]["nfe"]
        print(f"{algo:>4}: nfe {nfe:2d}  median {np.median(ms):.2f} ms  p90 {np.percentile(ms, 90):.2f} ms")
    print(f"nfe ratio {rows[0]['nfe_ratio']:.0f}")


if __name__ == "__main__":
    main()
