"""Fit CM and DDPM to the two-mode toy distribution over several seeds."""

import argparse

from bikc.toy import ToyConfig, mode_report, train_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--dim", type=int, default=1, choices=[1, 2])
    ap.add_argument("--iters", type=int, default=20000)
    args = ap.parse_args()
    for seed in range(args.seeds):
        cfg = ToyConfig(dim=args.dim, iters=args.iters, seed=seed)
        for algo in ("cm", "ddpm"):
            rep = mode_report(train_toy(algo, cfg)[2], cfg.dim, cfg.mode_radius)
            freq = " ".join(f"{f:.3f}" for f in rep["mode_freq"])
            print(f"seed {seed} {algo:>4}: near-mode {rep['near_frac']:.3f}  mode freq {freq}")


if __name__ == "__main__":
    main()
