"""Raw-pixel 1-NN accuracy on the synthetic task, a sanity check that it is neither trivial nor noise.

    python3 scripts/data_difficulty.py --seeds 0 1 2 3 4
"""
import argparse

import numpy as np

from rsicnet.experiments import Protocol, nearest_neighbour_accuracy, protocol_data


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--classes", type=int, default=6)
    args = ap.parse_args()
    accs = []
    for seed in args.seeds:
        accs.append(nearest_neighbour_accuracy(protocol_data(Protocol(seed=seed, classes=args.classes))))
        print(f"seed {seed}: 1-NN {accs[-1]:.4f}")
    print(f"mean {np.mean(accs):.4f}, chance {1 / args.classes:.4f}")


if __name__ == "__main__":
    main()
