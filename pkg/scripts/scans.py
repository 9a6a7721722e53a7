"""Theta and omega_phi scans over a spectator band, plus a simplex
optimization at every drive-induced peak of the reference spectrum.
"""
import argparse
import json
from pathlib import Path

from pesc.cli import main as pesc
from pesc.device import preset, static_resonances
from pesc.simplex import optimize_parameters
from pesc.spectrum import PESpectrum, calibrated_pulse, detect_peaks


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--gate", choices=["sqrt_iswap", "cz"], default="sqrt_iswap")
    parser.add_argument("--grid", default="4.30:4.70:0.002")
    parser.add_argument("--workers", type=int, default=4)
    parser.add_argument("--out", type=Path, default=Path("scans"))
    args = parser.parse_args()
    common = ["--preset", args.gate, "--grid", args.grid, "--workers", str(args.workers),
              "--out", str(args.out), "--resume"]
    for axis in ("theta", "omega_phi"):
        pesc(["scan", "--axis", axis, *common])

    params = preset(args.gate)
    ref = PESpectrum.from_csv(args.out / "scan-reference.csv")
    lo, hi = ref.omega3_ghz[0], ref.omega3_ghz[-1]
    ref.resonances = static_resonances(params, (lo, hi))
    results = []
    for peak in detect_peaks(ref):
        if not peak.drive_induced:
            continue
        rec = optimize_parameters(params, calibrated_pulse(args.gate), peak.omega3_ghz)
        rec.write(args.out / f"simplex-{peak.omega3_ghz:.6f}.json")
        results.append({"omega3_ghz": peak.omega3_ghz, "before": rec.initial_value,
                        "after": rec.final_value, "steps": rec.metadata["steps"],
                        "termination": rec.termination})
        print(json.dumps(results[-1]), flush=True)
    (args.out / "simplex-summary.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
