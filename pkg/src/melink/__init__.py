"""melink: magnetoelectric backscatter telemetry toolkit.

Models a high-Q magnetoelectric transducer as an equivalent circuit, simulates
switched-capacitor energy extraction (SCEE) in the time domain, and closes a
full uplink: pulse-width modulated backscatter framing, a simulated receive
chain, and two demodulators (envelope drop detection and a 5-bit quantized
MLP), plus the digital recording path (CIC decimation + delta coding) that
feeds the link.
"""

__version__ = "0.1.0"

from .transducer import (
    ImpedanceSample,
    ResonanceBranch,
    TransducerModel,
    fit_impedance,
    impedance,
    reference_model,
    resonance_frequencies,
)

__all__ = [
    "ImpedanceSample",
    "ResonanceBranch",
    "TransducerModel",
    "fit_impedance",
    "impedance",
    "reference_model",
    "resonance_frequencies",
    "__version__",
]
