"""Unoptimized PE spectra of both presets over the whole 4.0-6.2 GHz band
at 1 MHz spacing.  Resumable: rerun the same command after an interruption.
"""
import argparse
import sys

from pesc.cli import main as pesc


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workers", type=int, default=4)
    parser.add_argument("--step", type=float, default=0.001, help="grid spacing (GHz)")
    parser.add_argument("--out", default="full-spectra")
    args = parser.parse_args()
    code = 0
    for gate in ("sqrt_iswap", "cz"):
        code |= pesc(["spectrum", "--preset", gate, "--grid", f"4.0:6.2:{args.step}",
                      "--workers", str(args.workers), "--out", f"{args.out}/{gate}", "--resume"])
    sys.exit(code)


if __name__ == "__main__":
    main()
