"""Switched-capacitor energy extraction (SCEE) schedules and metrics.

One voltage flip drains the terminal capacitor through a chain of flying
capacitors and rebuilds it with reversed sign, following the synchronized
switch harvesting on capacitors discipline: connect the bank in ascending
order at the incoming polarity (extraction), short the terminal, then
reconnect in descending order at the opposite polarity (rebuild).  The flying
capacitors keep their charge between flips; the steady-state flip efficiency
depends on it.

Flips are issued at the voltage peaks of the ringdown, eight of them over
four carrier cycles by default, with alternating polarity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import SwitchEvent, WaveformTrace, connect_fly, short_terminal

__all__ = [
    "SceeBank",
    "SceeSchedule",
    "amplitude_reduction",
    "build_scee_schedule",
    "flip_events",
    "load_schedule",
    "save_schedule",
]


@dataclass(frozen=True)
class SceeBank:
    """Flying-capacitor bank: total capacitance split equally over n_fly caps.

    n_fly = 0 is the degenerate bank where a flip reduces to a bare terminal
    short (no storage, flip efficiency zero).
    """

    n_fly: int = 4
    c_fly_total: float = 1.2e-9

    def __post_init__(self):
        if self.n_fly < 0:
            raise ValueError("n_fly must be >= 0")
        if self.c_fly_total <= 0:
            raise ValueError("c_fly_total must be > 0")

    @property
    def c_each(self) -> float:
        if self.n_fly == 0:
            return 0.0
        return self.c_fly_total / self.n_fly


@dataclass(frozen=True)
class SceeSchedule:
    """Time-ordered switch events realizing a sequence of voltage flips."""

    events: tuple[SwitchEvent, ...]
    flip_times: tuple[float, ...]
    polarities: tuple[int, ...]

    @property
    def n_flips(self) -> int:
        return len(self.flip_times)


def flip_events(bank: SceeBank, t: float, polarity_before: int
                ) -> list[SwitchEvent]:
    """Events for one voltage flip at time t.

    ``polarity_before`` is the sign of the terminal voltage going in.  All
    events share the timestamp and are applied in list order within a single
    step boundary: extraction (ascending index, incoming polarity), terminal
    short, rebuild (descending index, reversed polarity).
    """
    if polarity_before not in (+1, -1):
        raise ValueError("polarity_before must be +1 or -1")
    ev: list[SwitchEvent] = []
    for k in range(bank.n_fly):
        ev.append(connect_fly(t, k, polarity_before))
    ev.append(short_terminal(t))
    for k in reversed(range(bank.n_fly)):
        ev.append(connect_fly(t, k, -polarity_before))
    return ev


def build_scee_schedule(bank: SceeBank, peak_times: Sequence[float],
                        polarities: Sequence[int]) -> SceeSchedule:
    """Concatenate one flip per peak with alternating polarity.

    Peaks must be strictly increasing (they are roughly half a carrier period
    apart in normal use) and polarities must alternate, since successive
    peaks of a sinusoid do.
    """
    if len(peak_times) != len(polarities):
        raise ValueError("peak_times and polarities must have equal length")
    times = list(peak_times)
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("peak_times must be strictly increasing")
    pols = [int(p) for p in polarities]
    if any(p not in (+1, -1) for p in pols):
        raise ValueError("polarities must be +1 or -1")
    if any(b != -a for a, b in zip(pols, pols[1:])):
        raise ValueError("polarities must alternate")
    events: list[SwitchEvent] = []
    for t, p in zip(times, pols):
        events.extend(flip_events(bank, t, p))
    return SceeSchedule(events=tuple(events), flip_times=tuple(times),
                        polarities=tuple(pols))


def _estimate_period(trace: WaveformTrace, t_until: float,
                     probe: str = "v_cp") -> float:
    """Carrier period from rising zero crossings of a probe before t_until."""
    v = trace[probe]
    t = trace.t
    sel = t < t_until
    v, t = v[sel], t[sel]
    rising = np.nonzero((v[:-1] <= 0) & (v[1:] > 0))[0]
    if len(rising) < 2:
        raise ValueError("not enough carrier cycles before the flip to estimate the period")
    i0, i1 = rising[0], rising[-1]
    cross = []
    for i in (i0, i1):
        frac = -v[i] / (v[i + 1] - v[i])
        cross.append(t[i] + frac * (t[i + 1] - t[i]))
    return (cross[1] - cross[0]) / (len(rising) - 1)


def _cycle_peaks(trace: WaveformTrace, t0: float, period: float, n: int,
                 probe: str = "v_cp") -> np.ndarray:
    """Per-cycle max of a probe's magnitude for n cycles starting at t0."""
    v = np.abs(trace[probe])
    t = trace.t
    peaks = np.empty(n)
    for j in range(n):
        sel = (t >= t0 + j * period) & (t < t0 + (j + 1) * period)
        if not np.any(sel):
            raise ValueError("trace does not cover the requested cycle window")
        peaks[j] = v[sel].max()
    return peaks


def amplitude_reduction(trace: WaveformTrace, t_flip_start: float,
                        window_cycles: int, settle_cycles: int = 4,
                        period: float | None = None,
                        probe: str = "v_cp") -> float:
    """Fractional envelope drop across the extraction window.

    Compares the mean per-cycle peak of ``probe`` over ``window_cycles``
    cycles just before ``t_flip_start`` against the same measure starting
    ``settle_cycles`` cycles after it (the default 4 covers the standard
    8-flip sequence).  Returns 1 - after/before.

    Note that on an unclamped terminal the final rebuild leaves the flying
    banks' residual charge on c_p, so the post-extraction terminal voltage
    stays elevated; the mechanical-current envelope (probe "i_b0"), which is
    what the backscatter receiver observes, is the meaningful amplitude for
    link-level reduction figures.
    """
    if window_cycles < 1:
        raise ValueError("window_cycles must be >= 1")
    if period is None:
        period = _estimate_period(trace, t_flip_start, probe=probe)
    t_before = t_flip_start - window_cycles * period
    if t_before < trace.t[0] - 1e-15:
        raise ValueError("trace too short before the flip window")
    t_after = t_flip_start + settle_cycles * period
    if t_after + window_cycles * period > trace.t[-1] + trace.dt:
        raise ValueError("trace too short after the flip window")
    before = _cycle_peaks(trace, t_before, period, window_cycles, probe).mean()
    after = _cycle_peaks(trace, t_after, period, window_cycles, probe).mean()
    return 1.0 - after / before


def save_schedule(schedule: SceeSchedule, path: str | Path) -> None:
    doc = {"flips": [{"t_s": t, "polarity": "+" if p > 0 else "-"}
                     for t, p in zip(schedule.flip_times, schedule.polarities)]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_schedule(path: str | Path, bank: SceeBank) -> SceeSchedule:
    doc = json.loads(Path(path).read_text())
    times = [f["t_s"] for f in doc["flips"]]
    pols = [+1 if f["polarity"] == "+" else -1 for f in doc["flips"]]
    return build_scee_schedule(bank, times, pols)
