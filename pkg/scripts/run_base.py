"""Solve the base preset on a chosen grid and write every artifact plus the reference comparison."""
import argparse
import sys

from greenprocure import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cells", type=int, default=10, help="grid cells per state axis")
    ap.add_argument("--preset", default="base")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/base")
    a = ap.parse_args()
    n = str(a.cells)
    return cli.main(["solve", "--preset", a.preset, "--seed", str(a.seed), "--out", a.out, "--with-references",
                     "--set", f"grid.n_a={n}", "--set", f"grid.n_r={n}", "--set", f"grid.n_chi={n}", "-v"])


if __name__ == "__main__":
    sys.exit(main())
