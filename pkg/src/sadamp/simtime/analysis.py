"""Perturbation admittance scans and the time-domain instability detector."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..dqcore import FrequencyGrid
from ..plants import GflParams, GridParams, OperatingPoint, SadParams
from .sim import Simulation, WaveRecord, sad_steady_current

DRIFT_TOL = 0.02
LINEARITY_TOL = 0.01


class ScanError(RuntimeError):
    pass


@dataclass(frozen=True)
class _ScanRun:
    """Minimal stand-in for a scenario when a single device faces a stiff source."""

    duration: float
    h: float
    record_rate: float
    sad_freeze_pll: bool
    sad_freeze_vdc: bool
    noise: float = 0.0
    saturation: bool = False
    events: tuple = ()
    model: object = None


@dataclass
class ScanResult:
    f: np.ndarray
    Y: np.ndarray
    linearity: np.ndarray = field(default=None)

    def __len__(self):
        return self.f.size


def _phasors(t, sig, w):
    """Complex amplitudes at angular frequency w of the columns of ``sig``,
    after removing a quadratic trend (slow transients) by least squares."""
    tc = t - t.mean()
    A = np.column_stack((np.ones_like(t), tc, tc * tc, np.cos(w * t), np.sin(w * t)))
    coef, *_ = np.linalg.lstsq(A, sig, rcond=None)
    return coef[3] - 1j * coef[4]


def _one_direction(kind, dut, V, I0, f, a, direction, guard, n_cyc, h, freeze_outer):
    w = 2 * np.pi * f
    T = 1.0 / f
    win = n_cyc * T
    dur = guard + 2 * win
    src = {"V": V, "grid": None, "V_far": V, "branch": False,
           "pert": (a, f, 1.0 - direction, float(direction), 0.0)}
    if kind == "passive":
        src.update(grid=dut, branch=True, devices=[], ids=())
    else:
        src.update(devices=[(dut, I0)], ids=("dut",))
    run = _ScanRun(dur, h, 1.0 / (25 * h), freeze_outer, freeze_outer)
    sim = Simulation(run, _source=src)
    sim.advance(dur)
    rec = sim.record()
    if rec.divergent:
        raise ScanError("scan refused: device diverges at this operating point")
    t = rec.t
    if kind == "passive":
        cur = np.column_stack((rec["igd_A"], rec["igq_A"]))
    else:
        cur = -np.column_stack((rec["id_A_dut"], rec["iq_A_dut"]))
    volt = np.column_stack((rec["vd_V"], rec["vq_V"]))
    out = []
    for k in (0, 1):
        t0 = guard + k * win
        sel = (t >= t0 - 1e-12) & (t < t0 + win - 0.5 * h)
        out.append((_phasors(t[sel], cur[sel], w), _phasors(t[sel], volt[sel], w)))
    return out


def scan_admittance(dut, op: OperatingPoint, freqs: FrequencyGrid, amplitude: float | None = None,
                    *, h: float = 2e-6, guard: float = 0.1, min_window: float = 0.05,
                    check_linearity: bool = True, freeze_outer: bool = True) -> ScanResult:
    """Measure a device's dq admittance by sinusoidal voltage perturbation.

    The device (GflParams, SadParams, or a passive GridParams branch) sits on
    a stiff source of d-axis voltage ``op.V_d0``; a grid-following inverter
    runs at ``op.currents[0]``. At each frequency the source is perturbed
    along d and then along q, and the current and voltage phasors are fitted
    over integer numbers of cycles after ``guard`` seconds. The admittance is
    returned in load convention (current drawn from the terminal), i.e. the
    Norton admittance of the source models. With ``freeze_outer`` the damper
    runs with its PLL and dc-link loop held at their steady values.
    """
    if isinstance(dut, GflParams):
        kind, I0 = "gfl", tuple(op.currents[0])
        fs = dut.f_s
    elif isinstance(dut, SadParams):
        kind, I0 = "sad", (sad_steady_current(dut, op.V_d0), 0.0)
        fs = dut.f_s
    elif isinstance(dut, GridParams):
        kind, I0, fs = "passive", (0.0, 0.0), None
    else:
        raise TypeError("device under test must be GflParams, SadParams or GridParams")
    V = float(op.V_d0)
    a = 0.01 * V if amplitude is None else float(amplitude)
    if not 0 < a <= 0.1 * V:
        raise ValueError("perturbation amplitude must be positive and small")
    f_all = np.asarray(freqs.f if isinstance(freqs, FrequencyGrid) else freqs, dtype=float)
    if fs is not None:
        ratio = f_all / fs
        if np.any((ratio >= 0.5) & (np.abs(ratio - np.rint(ratio)) < 1e-9)):
            raise ValueError("scan frequencies must avoid exact multiples of f_s")

    def measure(f, amp):
        g, ncyc = guard, max(2, math.ceil(min_window * f))
        for attempt in range(2):
            cols = []
            drift = 0.0
            for direction in (0, 1):
                (i1, v1), (i2, v2) = _one_direction(kind, dut, V, I0, f, amp, direction,
                                                    max(g, 3 / f), ncyc, h, freeze_outer)
                scale = max(np.abs(i2).max(), 1e-12)
                drift = max(drift, np.abs(i2 - i1).max() / scale)
                cols.append((i2, v2))
            if drift <= DRIFT_TOL:
                Imat = np.column_stack([c[0] for c in cols])
                Vmat = np.column_stack([c[1] for c in cols])
                return Imat @ np.linalg.inv(Vmat)
            g, ncyc = 3 * g, 2 * ncyc
        raise ScanError(f"extraction at {f:g} Hz did not settle (window drift {drift:.3g})")

    Y = np.empty((f_all.size, 2, 2), dtype=complex)
    lin = np.zeros(f_all.size)
    for n, f in enumerate(f_all):
        Y[n] = measure(f, a)
        if check_linearity:
            Yh = measure(f, 0.5 * a)
            lin[n] = np.abs(Yh - Y[n]).max() / np.abs(Y[n]).max()
            if lin[n] > LINEARITY_TOL:
                raise ScanError(f"response at {f:g} Hz is not linear in the perturbation ({lin[n]:.3g})")
    return ScanResult(f_all, Y, lin if check_linearity else None)


@dataclass(frozen=True)
class InstabilityVerdict:
    verdict: str  # stable | unstable | inconclusive
    rate: float
    settled: bool
    divergent: bool
    saturated: bool


def detect_instability(w: WaveRecord, window: float = 0.05, *, n_windows: int = 4,
                       rate_threshold: float = 2.0, settle_tol: float = 1e-6,
                       channels=("igd_A", "igq_A")) -> InstabilityVerdict:
    """Growth rate of the ac part of the grid current over trailing windows.

    Each window's linear trend is removed and the RMS of the remainder taken;
    the rate is the least-squares slope of log RMS against window centre.
    Unstable when the rate exceeds ``rate_threshold`` (1/s), the record
    diverged, or the modulators saturate inside the trailing windows while
    the oscillation persists. Stable when the rate is below the negative
    threshold or the deviation has settled; otherwise inconclusive.
    """
    spw = int(round(window * w.sample_rate))
    if spw < 4:
        raise ValueError("window shorter than four samples")
    nwin = len(w) // spw
    if nwin < 3 and not w.divergent:
        raise ValueError("record must span at least three windows")
    use = min(n_windows, nwin)
    t = w.t
    sig = np.column_stack([w[c] for c in channels])
    level = 1.0 + np.abs(sig).mean() if len(w) else 1.0
    floor = 1e-12 * level
    centres, rms = [], []
    start = len(w) - use * spw
    for k in range(use):
        sl = slice(start + k * spw, start + (k + 1) * spw)
        tt = t[sl] - t[sl].mean()
        A = np.column_stack((np.ones_like(tt), tt))
        coef, *_ = np.linalg.lstsq(A, sig[sl], rcond=None)
        res = sig[sl] - A @ coef
        centres.append(t[sl].mean())
        rms.append(max(math.sqrt(np.mean(np.sum(res * res, axis=1))), floor))
    if use >= 2:
        rate = float(np.polyfit(centres, np.log(rms), 1)[0])
    else:
        rate = math.inf
    settled = bool(rms and rms[-1] <= settle_tol * level)
    sat_cols = [c for c in w.names if c.startswith("nsat_")]
    saturated = False
    if sat_cols and use and len(w):
        tail = w.data[start:]
        saturated = any(tail[-1, w.names.index(c)] > tail[0, w.names.index(c)] for c in sat_cols)
    if w.divergent or rate > rate_threshold:
        verdict = "unstable"
    elif saturated and not settled:
        verdict = "unstable"
    elif settled or rate < -rate_threshold:
        verdict = "stable"
    else:
        verdict = "inconclusive"
    return InstabilityVerdict(verdict, rate, settled, bool(w.divergent), saturated)
