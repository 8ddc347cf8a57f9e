"""Learned versus true noise transition on a separable K=3 bundle, several seeds."""

import argparse

import numpy as np

from couda.experiments import noise_recovery


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--noise", type=float, default=0.2)
    ap.add_argument("--eps", type=float, default=0.8, help="noise-layer init")
    args = ap.parse_args()

    result = noise_recovery(args.seeds, noise=args.noise, steps=args.steps, eps_init=args.eps)
    np.set_printoptions(precision=3, suppress=True)
    for seed, err, q in zip(args.seeds, result.errors, result.matrices):
        print(f"seed {seed}: max-abs error {err:.3f}\n{q}")
    print(f"median max-abs error {result.median:.3f}")


if __name__ == "__main__":
    main()
