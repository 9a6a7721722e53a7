"""Perfect-entangler spectra of a transmon/coupler/transmon gate with a
spectator qubit, and pulse optimization against dynamic crosstalk."""

__version__ = "0.1.0"

from .device import DeviceParams, build_model, preset, static_resonances
from .flux import FluxPulse, SampledControl, sample, sample_magnus4
from .propagator import propagate, propagate_pulse
from .spectrum import PESpectrum, calibrate_gate, calibrated_pulse, sweep

__all__ = [
    "DeviceParams", "FluxPulse", "PESpectrum", "SampledControl", "build_model",
    "calibrate_gate", "calibrated_pulse", "preset", "propagate", "propagate_pulse",
    "sample", "sample_magnus4", "static_resonances", "sweep",
]
