"""Robustness sweep over randomized model parameters (wraps the sweep command)."""
import argparse
import sys

from greenprocure import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=50)
    ap.add_argument("--cells", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/sweep")
    a = ap.parse_args()
    n = str(a.cells)
    return cli.main(["sweep", "--n-runs", str(a.runs), "--seed", str(a.seed), "--out", a.out,
                     "--set", f"grid.n_a={n}", "--set", f"grid.n_r={n}", "--set", f"grid.n_chi={n}",
                     "--set", "policy_steps=128", "-v"])


if __name__ == "__main__":
    sys.exit(main())
