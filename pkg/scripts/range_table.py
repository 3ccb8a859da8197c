"""Budgeted HU-range table over a phantom corpus (or any directory of labelled volumes).

    python3 scripts/range_table.py --n 25 --budget 12k 16k 24k
    python3 scripts/range_table.py --data /path/to/volumes --budget 64M 128M
"""

import argparse
import csv
import sys

from sparsevox.sparsify import TABLE1_COLUMNS, HuRange, corpus_reduction, histogram, parse_budget, table1_rows
from sparsevox.volume_io import find_volumes, generate_phantom, kidney_phantom_spec, load_volume

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", help="directory of volumes with _seg siblings; default: generated phantoms")
    ap.add_argument("--n", type=int, default=25)
    ap.add_argument("--dims", type=int, default=32)
    ap.add_argument("--budget", nargs="+", default=["12k", "16k", "24k"])
    ap.add_argument("--per-case", action="store_true")
    a = ap.parse_args()

    if a.data:
        vols = (load_volume(p) for p in find_volumes(a.data))
    else:
        vols = (generate_phantom(kidney_phantom_spec((a.dims,) * 3, seed=s)) for s in range(a.n))
    h = histogram(vols)
    rows = table1_rows(h, [parse_budget(b) for b in a.budget], per_case=a.per_case)
    w = csv.DictWriter(sys.stdout, TABLE1_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: f"{v:.2f}" if isinstance(v, float) else v for k, v in r.items()})
    red = corpus_reduction(h, HuRange(-30, 350))
    print(f"\n[-30, 350] reduction: pooled x{red['pooled']:.2f}, per-case median x{red['per_case_median']:.2f}")
