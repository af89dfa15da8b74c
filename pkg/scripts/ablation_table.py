"""Train every cumulative ablation row (MT, +AMC, ..., EPL) and print mean test Dice.

    python3 scripts/ablation_table.py --seeds 0 1 2 --iterations 2000
"""

import argparse
import json
import time
from dataclasses import replace

import numpy as np

from epl import experiments as X
from epl.synth import make_dataset
from epl.trainer import ablation_configs, run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", nargs="+", type=int, default=list(X.PAIRED_SEEDS))
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)

    spec = X.paired_phantom()
    rows = ablation_configs(X.paired_base(args.iterations))
    table = {}
    for name, cfg in rows.items():
        dice = []
        for seed in args.seeds:
            data = make_dataset(replace(spec, seed=seed), X.PAIRED_COUNT, X.PAIRED_RATIO, seed=seed)
            t0 = time.process_time()
            res = run(replace(cfg, seed=seed), data)
            dice.append(res.metrics["mean"]["dice"])
            print(f"{name:6s} seed={seed} dice={dice[-1]:.4f} cpu={time.process_time() - t0:.0f}s", flush=True)
        table[name] = {"mean_dice": float(np.mean(dice)), "per_seed": dice}
    text = json.dumps(table, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
