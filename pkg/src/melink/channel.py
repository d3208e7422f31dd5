"""Backscatter channel and receiver front end.

The converse effect emits from the vibrating film: received voltage is
proportional to the dominant-mode mechanical current (a velocity proxy), not
to the terminal voltage, which is why a shorted terminal still backscatters.
Coupling falls off as the cube of distance (near-field dipole); the receive
chain is an ideal gain plus additive white Gaussian noise and an ideal
sampling ADC.  Coil and analog front-end transfer functions are out of scope.

Captures are deterministic per seed; parallel captures must derive distinct
seeds (seed XOR trial index).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import WaveformTrace

__all__ = [
    "LinkConfig",
    "RxCapture",
    "backscatter_signal",
    "drop_amplitude",
    "load_capture",
    "measure_snr",
    "receive",
    "save_capture",
]

# Input-referred receiver noise (V RMS) that puts the worst-code drop SNR at
# 10.9 dB for the default link at 5 cm (numerical calibration).
DEFAULT_NOISE_RMS = 2.784e-4


@dataclass(frozen=True)
class LinkConfig:
    """Backscatter link and ADC settings.

    ``k0`` is the received volts per ampere of mode current at the reference
    distance ``d0``; amplitude scales as (d0/distance)^3.  ``adc_range`` is
    the full-scale peak-to-peak span, centred on zero.  ``noise_rms`` is
    input-referred (added before ``rx_gain``).
    """

    distance: float = 0.05
    k0: float = 200.0
    d0: float = 0.01
    noise_rms: float = 0.0
    rx_gain: float = 1.0
    adc_bits: int = 12
    adc_fs: float = 2e6
    adc_range: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("distance must be > 0")
        if self.adc_bits < 1:
            raise ValueError("adc_bits must be >= 1")
        if self.adc_fs <= 0 or self.adc_range <= 0:
            raise ValueError("adc_fs and adc_range must be > 0")
        if self.noise_rms < 0:
            raise ValueError("noise_rms must be >= 0")

    @property
    def lsb(self) -> float:
        return self.adc_range / 2**self.adc_bits

    @property
    def code_max(self) -> int:
        return 2 ** (self.adc_bits - 1) - 1


@dataclass
class RxCapture:
    """One ADC capture: integer codes at fs, with the ringdown trigger index."""

    fs: float
    samples: np.ndarray
    trigger_index: int
    meta: dict = field(default_factory=dict)


def backscatter_signal(trace: WaveformTrace, cfg: LinkConfig,
                       probe: str = "i_b0") -> np.ndarray:
    """Receiver input voltage for a simulated transducer trace.

    v_rx(t) = k0 * (d0/distance)^3 * i(t), aligned with trace.t.  The trace
    must carry the dominant-branch current probe and be sampled at least as
    fast as the ADC.
    """
    if trace.dt > 1.0 / cfg.adc_fs:
        raise ValueError("trace must be sampled at or above the ADC rate")
    scale = cfg.k0 * (cfg.d0 / cfg.distance) ** 3
    return scale * trace[probe]


def receive(t: np.ndarray, v_rx: np.ndarray, cfg: LinkConfig,
            trigger_time: float = 0.0) -> RxCapture:
    """Sample a receiver-input waveform into ADC codes.

    The waveform is resampled by nearest-sample hold at the ADC instants,
    input-referred white Gaussian noise (seeded from cfg.seed) is added per
    ADC sample, then gain and quantization with saturation at the code rails.
    Saturated sample count is reported in the capture metadata, not raised.
    """
    if len(t) < 2:
        raise ValueError("waveform too short")
    dt = float(t[1] - t[0])
    if dt > 1.0 / cfg.adc_fs:
        raise ValueError("waveform must be sampled at or above the ADC rate")
    duration = float(t[-1] - t[0])
    n_adc = int(math.floor(duration * cfg.adc_fs)) + 1
    idx = np.clip(np.round(np.arange(n_adc) / cfg.adc_fs / dt).astype(np.intp),
                  0, len(v_rx) - 1)
    v = v_rx[idx]
    if cfg.noise_rms > 0:
        rng = np.random.default_rng(cfg.seed)
        v = v + rng.normal(0.0, cfg.noise_rms, size=n_adc)
    v = v * cfg.rx_gain
    codes = np.round(v / cfg.lsb)
    saturated = int(np.sum(np.abs(codes) > cfg.code_max))
    codes = np.clip(codes, -cfg.code_max, cfg.code_max).astype(np.int32)
    trigger_index = int(round((trigger_time - float(t[0])) * cfg.adc_fs))
    return RxCapture(
        fs=cfg.adc_fs, samples=codes, trigger_index=trigger_index,
        meta={"saturated": saturated, "lsb": cfg.lsb, "seed": cfg.seed,
              "rx_gain": cfg.rx_gain, "noise_rms": cfg.noise_rms,
              "distance": cfg.distance})


def measure_snr(drop_amplitude_v: float, noise_rms: float) -> float:
    """Link SNR in dB: 20 log10(backscatter drop amplitude / noise RMS)."""
    if drop_amplitude_v <= 0 or noise_rms <= 0:
        raise ValueError("drop amplitude and noise RMS must be > 0")
    return 20.0 * math.log10(drop_amplitude_v / noise_rms)


def drop_amplitude(env: np.ndarray, cfg: LinkConfig) -> float:
    """Largest adjacent-cycle envelope drop, input-referred in volts."""
    if len(env) < 2:
        raise ValueError("need at least two envelope cycles")
    return float(np.max(env[:-1] - env[1:])) * cfg.lsb / cfg.rx_gain


def save_capture(capture: RxCapture, path: str | Path) -> None:
    """Write index,code CSV plus a JSON sidecar with fs and trigger."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "code"])
        for i, c in enumerate(capture.samples):
            w.writerow([i, int(c)])
    sidecar = {"fs_hz": capture.fs, "trigger_index": capture.trigger_index,
               "meta": {k: v for k, v in capture.meta.items()
                        if isinstance(v, (int, float, str))}}
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2) + "\n")


def load_capture(path: str | Path) -> RxCapture:
    path = Path(path)
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if [h.strip() for h in header] != ["index", "code"]:
            raise ValueError(f"unexpected capture CSV header: {header}")
        codes = np.array([int(row[1]) for row in rd if row], dtype=np.int32)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return RxCapture(fs=sidecar["fs_hz"], samples=codes,
                     trigger_index=sidecar["trigger_index"],
                     meta=sidecar.get("meta", {}))
