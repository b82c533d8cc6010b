"""Generate the HRS-like survey panel, fit it and write every plot-data file.

Usage: python3 scripts/hrs_demo.py [--seed 0] [--out results/hrs]
"""
from __future__ import annotations

import argparse
from pathlib import Path

from panelmean import cli


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/hrs")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = out / "hrs_like.csv"
    cli.main(["gen", "--preset", "hrs", "--seed", str(args.seed), "-o", str(data)])
    code = cli.main(["fit", str(data), "--seed", str(args.seed), "--plots", "all",
                     "-o", str(out / "fit")])
    print(f"exit code {code}")


if __name__ == "__main__":
    main()
