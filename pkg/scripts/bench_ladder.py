"""Hybrid vs. all-attention toy models over a doubling context ladder.

Writes ladder.csv (one row per model and context, raw samples included)
and ladder_summary.json with the fitted decode growth, prefill exponents
and memory slopes.

    python3 scripts/bench_ladder.py --T0 512 --out runs/ladder
"""

import argparse
import json
from pathlib import Path

import torch

from longllava.bench import compare_ladder, ladder_toy_config, write_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T0", type=int, default=512)
    ap.add_argument("--rungs", type=int, default=4)
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--warmups", type=int, default=2)
    ap.add_argument("--out", default="runs/ladder")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cmp = compare_ladder(ladder_toy_config(), args.T0, args.rungs, args.trials, args.warmups)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(cmp.rows, out / "ladder.csv")
    summary = {"contexts": cmp.contexts, "decode_growth": cmp.decode_growth,
               "prefill_exponent": cmp.prefill_exponent, "memory_slope": cmp.memory_slope,
               "analytic_kv_slope": cmp.analytic_kv_slope}
    (out / "ladder_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
