"""Run the paired EPL / supervised / ablation comparison and print a summary.

    python3 scripts/paired_runs.py --variants epl supervised --seeds 0 1 2
"""

import argparse
import json
import sys

from epl import experiments as X


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--variants", nargs="+", default=["epl", "supervised", "amc", "no_urm"])
    ap.add_argument("--seeds", nargs="+", type=int, default=list(X.PAIRED_SEEDS))
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--cache", default="results/cache")
    ap.add_argument("--out", default=None, help="write the summary JSON here")
    args = ap.parse_args(argv)

    res = X.run_matrix(args.variants, args.seeds, base=X.paired_base(args.iterations), cache_dir=args.cache,
                       log=lambda s: print(s, file=sys.stderr, flush=True))
    summary = {name: {"mean_dice": X.mean_dice(res, name),
                      "per_seed": {str(s): r["dice"] for s, r in res[name].items()},
                      "cpu_seconds": sum(r["cpu_seconds"] for r in res[name].values())}
               for name in res}
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
