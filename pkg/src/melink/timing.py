"""Zero-crossing detection and the digital phase shifter arithmetic.

The peak detector locates voltage peaks indirectly: a zero-crossing detector
(ZCD) finds a rising crossing, and a delay line shifts it by a quarter and
three quarters of the carrier period, since the peaks of a sine sit 90 and
270 degrees past its rising zero.  The period itself is first measured as a
time-to-digital (TDC) code in single delay-line steps: a 5-bit binary cycle
count (8 steps per cycle) plus a 7-bit thermometer stage count.

The quarter/three-quarter delays are computed with shift-only arithmetic on
that code, no multiplier.  Dividing the cycle part by four is an exact shift;
the thermometer part contributes one conditional step.  The printed
three-quarter form is treated as the increment from the quarter-period pulse
(about half a period), which reproduces exact results on codes divisible by
four; taking it as an absolute delay instead is off by roughly T/4 and is
kept only as a comparison mode.

Calibration is performed on a ringdown (drive off) so the measured period is
the transducer's open-circuit resonance, not the transmitter frequency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import WaveformTrace

__all__ = [
    "DetectionError",
    "TdcCode",
    "ZcdConfig",
    "calibrate_period",
    "detect_zero_crossing",
    "en_scee_pulses",
    "quarter_delay",
    "tdc_decode",
    "tdc_encode",
    "three_quarter_delay",
]


class DetectionError(RuntimeError):
    """No usable zero crossing in the supplied trace segment."""


@dataclass(frozen=True)
class TdcCode:
    """Period measurement: total steps = 8 * d_cyc + d_stg.

    d_cyc is the 5-bit binary cycle count (0..31); d_stg is the number of
    ones in the 7-bit thermometer stage code (0..7).  Thermometer bit k is
    set iff d_stg >= k + 1.
    """

    d_cyc: int
    d_stg: int

    def __post_init__(self):
        if not 0 <= self.d_cyc <= 31:
            raise ValueError(f"d_cyc out of range: {self.d_cyc}")
        if not 0 <= self.d_stg <= 7:
            raise ValueError(f"d_stg out of range: {self.d_stg}")

    @property
    def total_steps(self) -> int:
        return 8 * self.d_cyc + self.d_stg

    @property
    def thermometer(self) -> tuple[int, ...]:
        return tuple(1 if self.d_stg >= k + 1 else 0 for k in range(7))


@dataclass(frozen=True)
class ZcdConfig:
    """Behavioral zero-crossing detector parameters.

    The detector reports the true interpolated crossing plus a delay
    max(0, base_delay - adaptive_coeff * cycle_index * t_delay_step): a fixed
    comparator lag partially cancelled by a compensation current ramped up on
    each ringdown cycle.  All-zero settings give the ideal crossing.
    """

    t_delay_step: float = 15e-9
    base_delay: float = 0.0
    adaptive_coeff: float = 0.0

    def __post_init__(self):
        if self.t_delay_step <= 0:
            raise ValueError("t_delay_step must be > 0")
        if self.base_delay < 0:
            raise ValueError("base_delay must be >= 0")


def detect_zero_crossing(trace: WaveformTrace, t_from: float,
                         cfg: ZcdConfig = ZcdConfig(),
                         cycle_index: int = 0) -> float:
    """First rising zero crossing of v_cp at or after t_from.

    Linear interpolation between samples, plus the modeled detector delay.
    """
    v = trace["v_cp"]
    t = trace.t
    start = int(np.searchsorted(t, t_from, side="left"))
    if start >= len(t) - 1:
        raise DetectionError("t_from is beyond the end of the trace")
    seg_v = v[start:]
    hits = np.nonzero((seg_v[:-1] <= 0) & (seg_v[1:] > 0))[0]
    if len(hits) == 0:
        raise DetectionError("no rising zero crossing after t_from")
    i = start + int(hits[0])
    frac = -v[i] / (v[i + 1] - v[i])
    t_cross = t[i] + frac * (t[i + 1] - t[i])
    delay = max(0.0, cfg.base_delay
                - cfg.adaptive_coeff * cycle_index * cfg.t_delay_step)
    return float(t_cross + delay)


def calibrate_period(trace: WaveformTrace, t_from: float,
                     cfg: ZcdConfig = ZcdConfig()
                     ) -> tuple[float, TdcCode, float]:
    """Measure one carrier period from two successive rising crossings.

    Both detections use cycle_index 0 (the calibration happens within the
    first ringdown cycle), so a fixed detector delay cancels in the
    difference.  Returns (first crossing time, TDC code, raw interval).
    """
    zc0 = detect_zero_crossing(trace, t_from, cfg, cycle_index=0)
    zc1 = detect_zero_crossing(trace, zc0 + trace.dt, cfg, cycle_index=0)
    interval = zc1 - zc0
    return zc0, tdc_encode(interval, cfg.t_delay_step), interval


def tdc_encode(interval: float, t_delay: float) -> TdcCode:
    """Quantize a time interval to delay-line steps (floor)."""
    if t_delay <= 0:
        raise ValueError("t_delay must be > 0")
    if not 0 <= interval < 256 * t_delay:
        raise ValueError(f"interval {interval:g} s outside the 0..256 step range")
    total = int(math.floor(interval / t_delay))
    total = min(total, 255)
    return TdcCode(d_cyc=total // 8, d_stg=total % 8)


def tdc_decode(code: TdcCode, t_delay: float) -> float:
    """Reconstruct the interval represented by a TDC code."""
    return t_delay * code.total_steps


def quarter_delay(code: TdcCode) -> int:
    """Quarter-period delay in steps, shift-only form.

    8 * (d_cyc >> 2) plus the 3-bit value {d_cyc[1], d_cyc[0], thermometer
    bit 3}.  The cycle part is the exact division; the thermometer part
    rounds to the nearest step, with a worst-case error of 3/4 step at
    d_stg = 3 or 7.
    """
    c = code.d_cyc
    therm = code.thermometer
    return 8 * (c >> 2) + 4 * ((c >> 1) & 1) + 2 * (c & 1) + therm[3]


def three_quarter_delay(code: TdcCode) -> int:
    """Printed three-quarter form: the increment from the quarter pulse.

    8 * (d_cyc >> 1) plus the 3-bit value {d_cyc[0], thermometer bit 5,
    thermometer bit 1}, roughly half a period.  Added on top of
    quarter_delay it lands near 3T/4; taken as an absolute delay it would
    sit near T/2, which is why the incremental reading is used.
    """
    c = code.d_cyc
    therm = code.thermometer
    return 8 * (c >> 1) + 4 * (c & 1) + 2 * therm[5] + therm[1]


def en_scee_pulses(zc_time: float, code: TdcCode, t_delay: float,
                   n_cycles: int = 4, mode: str = "increment") -> np.ndarray:
    """Peak-aligned extraction trigger times derived from one zero crossing.

    For each of ``n_cycles`` carrier cycles, emits a pulse a quarter period
    after the (reconstructed) cycle start and a second one three quarters in,
    2*n_cycles strictly increasing timestamps total.  ``mode`` selects how
    the three-quarter arithmetic is applied: "increment" (default) adds it to
    the quarter pulse; "absolute" applies it directly, for comparison only.
    """
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    if mode not in ("increment", "absolute"):
        raise ValueError("mode must be 'increment' or 'absolute'")
    period = tdc_decode(code, t_delay)
    t_q = t_delay * quarter_delay(code)
    t_3q = t_delay * three_quarter_delay(code)
    out = np.empty(2 * n_cycles)
    for i in range(n_cycles):
        base = zc_time + i * period
        out[2 * i] = base + t_q
        if mode == "increment":
            out[2 * i + 1] = base + t_q + t_3q
        else:
            out[2 * i + 1] = base + t_3q
    return out
