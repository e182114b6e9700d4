"""Train none / SE / CBAM / TRIAXIS under the desk protocol over several seeds.

    python3 scripts/compare_attention.py --seeds 0 1 2 3 4 --out results/compare.json
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from rsicnet.experiments import VARIANTS, Protocol, protocol_data, run_variant


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--phase1-lr", type=float, default=Protocol.phase1_lr)
    ap.add_argument("--phase1-epochs", type=int, default=Protocol.phase1_epochs)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    table = {v: [] for v in args.variants}
    params = {}
    for seed in args.seeds:
        p = Protocol(seed=seed, phase1_lr=args.phase1_lr, phase2_lr=args.phase1_lr / 100,
                     phase1_epochs=args.phase1_epochs)
        data = protocol_data(p)
        for v in args.variants:
            t0 = time.perf_counter()
            r = run_variant(p, v, data)
            table[v].append(r.accuracy)
            params[v] = r.parameters
            print(f"seed {seed} {v:8s} acc {r.accuracy:.4f} params {r.parameters} {time.perf_counter() - t0:.0f}s",
                  flush=True)

    print(f"\n{'attention':10s} {'params':>8s}  mean   accuracies")
    for v, accs in table.items():
        print(f"{v:10s} {params[v]:8d}  {np.mean(accs):.4f} " + " ".join(f"{a:.4f}" for a in accs))
    if "none" in table:
        base = np.array(table["none"])
        for v in args.variants:
            if v != "none":
                print(f"{v} strictly beats none in {int((np.array(table[v]) > base).sum())}/{len(base)} seeds")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"seeds": args.seeds, "accuracy": table, "parameters": params}, indent=1))


if __name__ == "__main__":
    main()
