"""Pretrain on a 10-class synthetic task and count fine-tuning epochs on the 6-class task.

    python3 scripts/transfer_experiment.py --seeds 0 1 2 3 4
"""
import argparse
import json
from pathlib import Path

from rsicnet.experiments import Protocol, transfer_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--upstream-classes", type=int, default=10)
    ap.add_argument("--attention", default="TRIAXIS")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        r = transfer_experiment(Protocol(seed=seed), args.upstream_classes, attention=args.attention,
                                log=lambda m: print(m, flush=True))
        rows.append({"seed": seed, "scratch_accuracy": r.scratch_accuracy, "scratch_epochs": r.scratch_epochs,
                     "upstream_accuracy": r.upstream_accuracy, "epochs_to_match": r.epochs_to_match,
                     "transfer_curve": r.transfer_curve, "passed": r.passed})
        print(f"seed {seed}: scratch {r.scratch_accuracy:.4f} after {r.scratch_epochs} epochs, "
              f"transfer reaches it after {r.epochs_to_match} epochs", flush=True)
    print(f"{sum(r['passed'] for r in rows)}/{len(rows)} seeds within half the epochs")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
