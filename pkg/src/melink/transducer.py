"""Equivalent-circuit models of magnetoelectric (ME) transducers.

An ME laminate is modeled Van Dyke style: a lumped terminal capacitance c_p in
parallel with one series-RLC branch per mechanical vibration mode.  Branch
elements map to the mechanical domain (r_m damping, l_m mass, c_m stiffness).
The magnetic drive enters as a voltage source in series with the dominant
branch, scaled by ``drive_gain``.

The module evaluates impedance, derives the short/open-circuit resonance
frequencies of each branch, and fits model parameters to a measured impedance
sweep.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import find_peaks

__all__ = [
    "FitError",
    "ImpedanceSample",
    "ResonanceBranch",
    "TransducerModel",
    "fit_impedance",
    "impedance",
    "load_model",
    "load_samples",
    "reference_model",
    "resonance_frequencies",
    "save_model",
    "save_samples",
]

# Samples with |Z| below this are treated as degenerate measurement points.
_MIN_ABS_Z = 1e-3

# Phase term weight in the fit objective, applied to radians.
_PHASE_WEIGHT = 1.0


class FitError(RuntimeError):
    """Raised when the impedance fit does not converge.

    Carries the best model found so far in ``model`` and its objective value
    in ``residual`` so callers can still inspect the partial result.
    """

    def __init__(self, message: str, model: "TransducerModel | None" = None,
                 residual: float = math.inf):
        super().__init__(message)
        self.model = model
        self.residual = residual


class ImpedanceSample(NamedTuple):
    """One point of a measured impedance sweep."""

    f: float  # Hz
    z: complex  # ohm


@dataclass(frozen=True)
class ResonanceBranch:
    """Series RLC branch for one mechanical mode.

    r_m: damping (ohm), l_m: effective mass (H), c_m: compliance (F).
    """

    r_m: float
    l_m: float
    c_m: float

    def __post_init__(self):
        for name in ("r_m", "l_m", "c_m"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")

    @property
    def f_sc(self) -> float:
        """Series (short-circuit) resonance frequency in Hz."""
        return 1.0 / (2.0 * math.pi * math.sqrt(self.l_m * self.c_m))

    @property
    def q(self) -> float:
        """Quality factor of the branch alone."""
        return math.sqrt(self.l_m / self.c_m) / self.r_m


@dataclass(frozen=True)
class TransducerModel:
    """Terminal capacitance plus ordered resonance branches.

    Branch 0 is the dominant length mode and must have the lowest series
    resonance; branches are kept sorted by ascending f_sc.  ``drive_gain``
    converts one unit of drive amplitude into volts of series source in
    branch 0.
    """

    c_p: float
    branches: tuple[ResonanceBranch, ...]
    drive_gain: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.c_p) and self.c_p > 0):
            raise ValueError(f"c_p must be finite and > 0, got {self.c_p}")
        if len(self.branches) < 1:
            raise ValueError("model needs at least one resonance branch")
        object.__setattr__(self, "branches", tuple(self.branches))
        freqs = [b.f_sc for b in self.branches]
        if any(f2 <= f1 for f1, f2 in zip(freqs, freqs[1:])):
            raise ValueError("branch series resonances must be strictly increasing")

    @property
    def order(self) -> int:
        return len(self.branches)


def impedance(model: TransducerModel, f):
    """Complex terminal impedance at frequency ``f`` (Hz, scalar or array).

    Parallel combination of the terminal capacitance with every branch's
    series r + jwl + 1/(jwc).
    """
    f_arr = np.asarray(f, dtype=float)
    if np.any(f_arr <= 0):
        raise ValueError("frequency must be > 0")
    w = 2.0 * np.pi * f_arr
    y = 1j * w * model.c_p
    for b in model.branches:
        y = y + 1.0 / (b.r_m + 1j * w * b.l_m + 1.0 / (1j * w * b.c_m))
    z = 1.0 / y
    if np.isscalar(f) or f_arr.ndim == 0:
        return complex(z)
    return z


def resonance_frequencies(model: TransducerModel) -> list[tuple[float, float]]:
    """Per-branch (f_sc, f_oc) in Hz.

    f_sc is the branch series resonance; f_oc is the antiresonance of the
    branch against the terminal capacitance, i.e. the same branch with c_m
    replaced by the series combination c_m*c_p/(c_m + c_p).  f_oc > f_sc.
    """
    out = []
    for b in model.branches:
        c_series = b.c_m * model.c_p / (b.c_m + model.c_p)
        f_oc = 1.0 / (2.0 * math.pi * math.sqrt(b.l_m * c_series))
        out.append((b.f_sc, f_oc))
    return out


# ---------------------------------------------------------------------------
# fitting


def _model_from_params(p: np.ndarray, order: int) -> TransducerModel:
    """Decode the log-space optimizer vector [c_p, (r, f_sc, c_m) x order]."""
    c_p = math.exp(p[0])
    branches = []
    for k in range(order):
        r, f_sc, c_m = np.exp(p[1 + 3 * k: 4 + 3 * k])
        l_m = 1.0 / ((2.0 * math.pi * f_sc) ** 2 * c_m)
        branches.append(ResonanceBranch(r_m=r, l_m=l_m, c_m=c_m))
    branches.sort(key=lambda b: b.f_sc)
    return TransducerModel(c_p=c_p, branches=tuple(branches))


def _residual_vector(p, order, f, log_mag, phase):
    m = _model_from_params(p, order)
    z = impedance(m, f)
    r_mag = np.log(np.abs(z)) - log_mag
    r_ph = np.unwrap(np.angle(z)) - phase
    return np.concatenate([r_mag, math.sqrt(_PHASE_WEIGHT) * r_ph])


def _initial_guess(f, zmag, c_p0, order):
    """Peak-picking initialization: one (r, f_sc, c_m) triple per |Z| dip."""
    log_mag = np.log(zmag)
    dips, props = find_peaks(-log_mag, prominence=0.002)
    if len(dips) >= order:
        keep = np.argsort(props["prominences"])[::-1][:order]
        dips = np.sort(dips[keep])
    else:
        # not enough visible dips: pad with log-spaced guesses above the last one
        extra = order - len(dips)
        f_hi = f[dips[-1]] if len(dips) else f[len(f) // 2]
        pads = []
        for i in range(extra):
            f_pad = f_hi * 2.0 ** (i + 1)
            pads.append(int(np.argmin(np.abs(f - min(f_pad, f[-1] * 0.9)))))
        dips = np.sort(np.concatenate([dips, pads]).astype(int))

    params = [math.log(c_p0)]
    for idx in dips:
        f_sc = f[idx]
        w = 2.0 * math.pi * f_sc
        # subtract the parallel-capacitor admittance to recover the branch r
        y_dip = 1.0 / zmag[idx]
        y_branch = math.sqrt(max(y_dip**2 - (w * c_p0) ** 2, 1e-12 * y_dip**2))
        r0 = 1.0 / y_branch
        # c_m from the antiresonance just above the dip, if resolvable
        seg = slice(idx, min(idx + max(3, len(f) // 20), len(f)))
        rel = np.argmax(zmag[seg])
        f_oc = f[seg][rel]
        ratio = (f_oc / f_sc) ** 2 - 1.0
        c_m0 = c_p0 * ratio if 1e-4 < ratio < 1.0 else 0.03 * c_p0
        params += [math.log(r0), math.log(f_sc), math.log(c_m0)]
    return np.array(params)


def fit_impedance(samples: Sequence[ImpedanceSample], order: int
                  ) -> tuple[TransducerModel, float]:
    """Fit an ``order``-branch model to an impedance sweep.

    Minimizes sum |log|Z_model| - log|Z_meas||^2 + w*|phase difference|^2
    over the samples (w = 1 per radian^2, phases unwrapped).  Initialization
    is by peak picking: c_p from the low-frequency asymptote, branch dips
    from local minima of |Z|.

    Returns (model, residual) where residual is the final objective value.
    Raises ValueError for insufficient input and FitError (carrying the best
    model so far) if the optimizer hits its iteration cap.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    pts = [s for s in samples if abs(s.z) >= _MIN_ABS_Z]
    if len(pts) < 8 * order:
        raise ValueError(f"need at least {8 * order} usable samples, got {len(pts)}")
    pts.sort(key=lambda s: s.f)
    f = np.array([s.f for s in pts])
    z = np.array([s.z for s in pts])
    if np.any(f <= 0):
        raise ValueError("frequencies must be > 0")
    zmag = np.abs(z)
    log_mag = np.log(zmag)
    phase = np.unwrap(np.angle(z))

    # low-frequency asymptote |Z| ~ 1/(2 pi f c_p)
    n_low = max(3, len(f) // 100)
    c_p0 = float(np.median(1.0 / (2.0 * math.pi * f[:n_low] * zmag[:n_low])))

    p0 = _initial_guess(f, zmag, c_p0, order)
    res = least_squares(
        _residual_vector, p0, args=(order, f, log_mag, phase),
        method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14,
        max_nfev=400 * len(p0),
    )
    model = _model_from_params(res.x, order)
    residual = float(np.sum(res.fun**2))
    if res.status == 0:
        raise FitError("fit did not converge within the iteration budget",
                       model=model, residual=residual)
    return model, residual


# ---------------------------------------------------------------------------
# reference device and file formats


def reference_model(order: int = 3, drive_gain: float | None = None
                    ) -> TransducerModel:
    """Default transducer used by simulations, demos, and the CLI.

    A stand-in for a 5x2 mm ME film resonant at 331 kHz: branch 0 with
    Q = 150 and r_m = 100 ohm against c_p = 1 nF, plus optional secondary
    width/thickness modes at 2.5x and 5.3x the fundamental with 10x larger
    damping and Q = 20, strong enough that a voltage flip visibly excites
    them for a few carrier cycles.  These values are plausible for the device
    class but are not a fit to any particular film.

    ``drive_gain`` defaults to a value calibrated so that a unit-amplitude
    24-cycle excitation leaves roughly a 2 V ringdown on the terminal.
    """
    if order not in (1, 2, 3):
        raise ValueError("reference model is defined for order 1, 2, or 3")
    f0 = 331e3
    plan = [(f0, 100.0, 150.0), (2.5 * f0, 1000.0, 20.0),
            (5.3 * f0, 1000.0, 20.0)][:order]
    branches = []
    for f_sc, r_m, q in plan:
        w = 2.0 * math.pi * f_sc
        l_m = q * r_m / w
        c_m = 1.0 / (w**2 * l_m)
        branches.append(ResonanceBranch(r_m=r_m, l_m=l_m, c_m=c_m))
    if drive_gain is None:
        drive_gain = DEFAULT_DRIVE_GAIN
    return TransducerModel(c_p=1e-9, branches=tuple(branches),
                           drive_gain=drive_gain)


# Unit drive amplitude times this gain yields ~2 V of terminal ringdown after
# a 24-cycle excitation of the reference model (numerical calibration).
DEFAULT_DRIVE_GAIN = 1.389


def save_model(model: TransducerModel, path: str | Path) -> None:
    doc = {
        "c_p_farad": model.c_p,
        "drive_gain": model.drive_gain,
        "branches": [
            {"r_ohm": b.r_m, "l_henry": b.l_m, "c_farad": b.c_m}
            for b in model.branches
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path: str | Path) -> TransducerModel:
    doc = json.loads(Path(path).read_text())
    branches = tuple(
        ResonanceBranch(r_m=b["r_ohm"], l_m=b["l_henry"], c_m=b["c_farad"])
        for b in doc["branches"]
    )
    return TransducerModel(c_p=doc["c_p_farad"], branches=branches,
                           drive_gain=doc.get("drive_gain", 1.0))


def save_samples(samples: Sequence[ImpedanceSample], path: str | Path) -> None:
    """Write an impedance sweep CSV: freq_hz,re_ohm,im_ohm (ascending f)."""
    rows = sorted(samples, key=lambda s: s.f)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz", "re_ohm", "im_ohm"])
        for s in rows:
            w.writerow([f"{s.f:.17g}", f"{s.z.real:.17g}", f"{s.z.imag:.17g}"])


def load_samples(path: str | Path) -> list[ImpedanceSample]:
    out: list[ImpedanceSample] = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if [h.strip() for h in header] != ["freq_hz", "re_ohm", "im_ohm"]:
            raise ValueError(f"unexpected impedance CSV header: {header}")
        for row in rd:
            if not row:
                continue
            f, re_z, im_z = (float(x) for x in row)
            out.append(ImpedanceSample(f=f, z=complex(re_z, im_z)))
    if any(b.f <= a.f for a, b in zip(out, out[1:])):
        raise ValueError("impedance CSV frequencies must be strictly increasing")
    return out
