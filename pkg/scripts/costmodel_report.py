"""Print and save the analytic cost tables for both presets.

Covers video token counts, KV-cache bytes, FLOPs per image count and the
max-image budget on 40 and 80 GiB, plus a max-images vs. budget series.

    python3 scripts/costmodel_report.py --out runs/cost
"""

import argparse
from pathlib import Path

from longllava.bench import (
    CALIBRATED_OVERHEAD,
    GIB,
    LONGLLAVA_9B,
    LONGLLAVA_A13B,
    cost_table,
    flops_estimate,
    kv_cache_bytes,
    max_images,
    write_csv,
    write_series,
)


def rows() -> list[dict]:
    out = list(cost_table())
    for cfg in (LONGLLAVA_9B, LONGLLAVA_A13B):
        for n in (54, 128):
            out.append({"quantity": f"flops_pf({cfg.name}, {n} images)", "value": flops_estimate(cfg, n) / 1e15})
        out.append({"quantity": f"kv_cache_gib({cfg.name}, T=131072)", "value": kv_cache_bytes(cfg, 131_072) / GIB})
    for gib in (40, 80):
        out.append({"quantity": f"max_images({gib} GiB, 9B)",
                    "value": max_images(gib * GIB, LONGLLAVA_9B, CALIBRATED_OVERHEAD)})
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/cost")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = rows()
    write_csv(table, out / "cost_report.csv")
    budgets = list(range(20, 161, 10))
    write_series(out / "max_images_vs_gib.dat", budgets,
                 [max_images(g * GIB, LONGLLAVA_9B, CALIBRATED_OVERHEAD) for g in budgets], "gib", "max_images")
    for r in table:
        print(f"{r['quantity']}: {r['value']}")


if __name__ == "__main__":
    main()
