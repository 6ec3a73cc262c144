#!/usr/bin/env python3
"""Build data/adult.csv.gz from the public Adult census CSV.

The source file is the combined 48842-row Adult dataset (UCI Machine
Learning Repository, "Adult"; also mirrored in many public locations as
adult-all.csv with the 15 canonical columns and no header). This script
keeps 13 columns — it drops `education` (redundant with the numeric
education-num) and `native-country` — giving 7 categorical + 6 numerical
features with `income` as the prediction target and `sex` as the
sensitive feature. Missing values ("?") are kept as ordinary categories.

Usage:
    python scripts/prepare_adult.py path/to/adult-all.csv

Download the input from the UCI repository (concatenate adult.data and
adult.test after stripping the test file's header line and trailing
periods on the labels), or use any public mirror that ships the combined
file, e.g.:
    https://archive.ics.uci.edu/dataset/2/adult
    https://raw.githubusercontent.com/jbrownlee/Datasets/master/adult-all.csv
"""

import csv
import gzip
import pathlib
import sys

COLUMNS_15 = [
    "age", "workclass", "fnlwgt", "education", "education-num",
    "marital-status", "occupation", "relationship", "race", "sex",
    "capital-gain", "capital-loss", "hours-per-week", "native-country",
    "income",
]
KEEP = [
    "age", "workclass", "fnlwgt", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain",
    "capital-loss", "hours-per-week", "income",
]


def main() -> int:
    if len(sys.argv) != 2:
        print(__doc__)
        return 2
    src = pathlib.Path(sys.argv[1])
    out = pathlib.Path(__file__).resolve().parent.parent / "data" / "adult.csv.gz"
    with open(src, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0][0].strip() == "age":  # drop a header line if present
        rows = rows[1:]
    if len(rows[0]) != len(COLUMNS_15):
        print(f"expected {len(COLUMNS_15)} columns, got {len(rows[0])}")
        return 2
    idx = [COLUMNS_15.index(k) for k in KEEP]
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
            text = [",".join(KEEP)]
            for r in rows:
                text.append(",".join(r[i].strip() for i in idx))
            gz.write(("\n".join(text) + "\n").encode())
    print(f"wrote {out} ({len(rows)} rows, {len(KEEP)} columns)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
