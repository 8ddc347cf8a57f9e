"""Target accuracy of full CoUDA against its component ablations, one bundle per seed."""

import argparse

from couda.training import COMPONENTS
from couda.experiments import adaptation_benefit


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=12000)
    ap.add_argument("--eps", type=float, default=0.2)
    ap.add_argument("--variants", nargs="+", default=list(COMPONENTS), choices=list(COMPONENTS))
    args = ap.parse_args()

    result = adaptation_benefit(args.seeds, steps=args.steps, eps_init=args.eps, variants=args.variants)
    print(f"{'variant':12s} {'mean':>6s}  per seed")
    for v in args.variants:
        accs = " ".join(f"{a:.3f}" for a in result.accuracy[v])
        print(f"{v:12s} {100 * result.mean(v):6.2f}  {accs}")


if __name__ == "__main__":
    main()
