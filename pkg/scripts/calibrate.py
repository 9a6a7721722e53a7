"""Recompute the shipped gate calibrations (``pesc.spectrum.CALIBRATED``).

sqrt(iSWAP): scan T over 80..96 ns at the preset reference drive.
CZ: Nelder-Mead over (T, omega_phi, delta) from a coarse start, then a
second pass that also frees Theta.  Takes about an hour on one core.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from pesc.device import preset
from pesc.flux import FluxPulse, guess_pulse
from pesc.spectrum import calibrate_gate


def calibrate_sqrt_iswap():
    return calibrate_gate(preset("sqrt_iswap"), guess_pulse("sqrt_iswap", 88.0), "sqrt_iswap",
                          T_grid=np.arange(80.0, 97.0, 1.0), refine=("T",), target_eps=1e-4,
                          max_steps=60)


def calibrate_cz():
    start = FluxPulse.single(theta=0.15, delta=0.19, omega_phi_mhz=825.0, sigma_t=13.0, T=165.0)
    first = calibrate_gate(preset("cz"), start, "cz", T_grid=[165.0],
                           refine=("T", "omega_phi_mhz", "delta"), target_eps=1e-3, max_steps=120)
    print(f"cz first pass: eps_avg = {first.eps_avg:.3e}", flush=True)
    return calibrate_gate(preset("cz"), first.pulse, "cz", T_grid=[first.pulse.T],
                          refine=("T", "omega_phi_mhz", "delta", "theta"), target_eps=1e-3,
                          max_steps=200)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--gate", choices=["sqrt_iswap", "cz", "both"], default="both")
    parser.add_argument("--out", type=Path, default=Path("calibration-out"))
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    gates = ["sqrt_iswap", "cz"] if args.gate == "both" else [args.gate]
    for gate in gates:
        res = calibrate_sqrt_iswap() if gate == "sqrt_iswap" else calibrate_cz()
        (args.out / f"{gate}.json").write_text(json.dumps(res.to_dict(), indent=2))
        print(f"{gate}: eps_avg = {res.eps_avg:.3e}, pulse = {res.pulse.to_dict()}", flush=True)


if __name__ == "__main__":
    main()
