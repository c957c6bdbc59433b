"""Seed-sweep the CRT, VG3 and RN configs and compare their envelopes.

Each layout goes through ``rownav sweep``; the per-seed sweep.csv files land
under ``--out/<name>/``. The closing summary reports zero-intervention counts
and row-tracking deviation ratios against CRT.

    python scripts/run_envelopes.py --out runs/envelopes --seeds 20
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from rownav.cli import main as rownav

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def read_sweep(path: Path) -> dict:
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return {
        "runs": len(rows),
        "clean": int(sum(int(r["completed"]) == 1 and int(r["interventions"]) == 0 for r in rows)),
        "mean": col("rt_mean"),
        "max": np.abs(col("rt_max")),
        "turn_out": np.abs(col("turn_out_max")),
        "turn_in": np.abs(col("turn_in_max")),
    }


def run(out: Path, seeds: int, names) -> None:
    stats = {}
    for name in names:
        code = rownav(["sweep", "--config", str(CONFIGS / f"{name}.toml"), "--seeds", str(seeds),
                       "--out", str(out / name)])
        if code != 0:
            raise SystemExit(code)
        stats[name] = read_sweep(out / name / "sweep.csv")

    ref = stats.get("crt")
    print("\nlayout  clean   rt mean  rt max  turn-out  turn-in  ratio(mean/max vs crt)")
    for name, s in stats.items():
        ratio = "" if ref is None else f"{s['mean'].mean() / ref['mean'].mean():.2f}/{s['max'].mean() / ref['max'].mean():.2f}"
        print(f"{name:6s}  {s['clean']:2d}/{s['runs']:<2d}  {s['mean'].max():7.3f}  {s['max'].max():6.3f}  "
              f"{s['turn_out'].max():8.2f}  {s['turn_in'].max():7.2f}  {ratio}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/envelopes"))
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--layouts", nargs="+", default=["crt", "vg3", "rn"])
    args = ap.parse_args()
    run(args.out, args.seeds, args.layouts)
