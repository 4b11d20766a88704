"""On-line grid impedance estimation from a reactive-current step.

The damper steps its q-axis current reference; the dc shift of the PCC
voltage and grid current, both expressed in one dq frame frozen at the
instant of the step, gives R_g and L_g from the steady branch equation
dV = (R_g + j w0 L_g) dI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import lfilter, lfilter_zi

from .plants import OMEGA0
from .simtime import Event, Scenario, Simulation, WaveRecord

NOISE_FLOOR = 0.5  # A


class InsufficientExcitationError(ValueError):
    pass


class EstimationError(RuntimeError):
    pass


def solve_rg_lg(dV_d: float, dV_q: float, dI_gd: float, dI_gq: float,
                omega0: float = OMEGA0, noise_floor: float = NOISE_FLOOR):
    """(R_g, L_g, condition number) from dc deltas in a common dq frame.

    Solves [[dI_d, -w0 dI_q], [dI_q, w0 dI_d]] [R_g, L_g]^T = [dV_d, dV_q]^T.
    """
    if math.hypot(dI_gd, dI_gq) < noise_floor:
        raise InsufficientExcitationError(
            f"current step {math.hypot(dI_gd, dI_gq):.3g} A is below the {noise_floor:g} A floor")
    M = np.array([[dI_gd, -omega0 * dI_gq], [dI_gq, omega0 * dI_gd]])
    R, L = np.linalg.solve(M, [dV_d, dV_q])
    return float(R), float(L), float(np.linalg.cond(M))


def park(a, b, c, theta):
    """Amplitude-invariant abc -> dq with the d axis at angle ``theta``."""
    k = 2.0 / 3.0
    s = 2 * np.pi / 3
    d = k * (a * np.cos(theta) + b * np.cos(theta - s) + c * np.cos(theta + s))
    q = -k * (a * np.sin(theta) + b * np.sin(theta - s) + c * np.sin(theta + s))
    return d, q


def inverse_park(d, q, theta):
    s = 2 * np.pi / 3
    a = d * np.cos(theta) - q * np.sin(theta)
    b = d * np.cos(theta - s) - q * np.sin(theta - s)
    c = d * np.cos(theta + s) - q * np.sin(theta + s)
    return a, b, c


def aligned_dq(abc, theta1: float, omega_g: float, t, t1: float):
    """dq components in the frame locked at ``theta1`` when ``t = t1`` and
    advanced at the constant pre-step frequency ``omega_g`` thereafter.

    ``abc`` is a (3, ...) sequence of phase samples taken at times ``t``.
    """
    a, b, c = (np.asarray(x, dtype=float) for x in abc)
    theta = theta1 + omega_g * (np.asarray(t, dtype=float) - t1)
    return park(a, b, c, theta)


@dataclass(frozen=True)
class DcValue:
    value: float
    settled: bool
    slope: float


def extract_dc(signal, fs: float, cutoff: float = 5.0, tol: float = 1e-3,
               window: float = 0.1, scale: float | None = None) -> DcValue:
    """Final output of a first-order low-pass filter run over ``signal``.

    Settled when the least-squares slope of the filter output over the last
    ``window`` seconds, times ``window``, stays below ``tol`` times ``scale``
    (default: the magnitude of the final value).
    """
    x = np.asarray(signal, dtype=float)
    if cutoff <= 0 or fs <= 0:
        raise ValueError("cutoff and sample rate must be positive")
    if x.size < 5 * fs / (2 * np.pi * cutoff):
        raise ValueError("signal shorter than five filter time constants")
    alpha = 1.0 - math.exp(-2 * math.pi * cutoff / fs)
    b, a = [alpha], [1.0, alpha - 1.0]
    y, _ = lfilter(b, a, x, zi=lfilter_zi(b, a) * x[0])
    n = max(3, int(round(window * fs)))
    tail = y[-n:]
    slope = float(np.polyfit(np.arange(tail.size) / fs, tail, 1)[0])
    ref = abs(y[-1]) if scale is None else scale
    settled = abs(slope) * window <= tol * max(ref, 1e-12)
    return DcValue(float(y[-1]), bool(settled), slope)


@dataclass(frozen=True)
class EstimationConfig:
    dI_qref: float = 40.0
    t1: float = 0.4
    t2: float = 1.9
    cutoff: float = 5.0
    settle_tol: float = 1e-3
    device: str = "sad"
    live_frame: bool = False  # deliberately wrong variant: live PLL angle at t2

    def __post_init__(self):
        if not self.t2 > self.t1 > 0:
            raise ValueError("need 0 < t1 < t2")
        if self.dI_qref == 0:
            raise ValueError("dI_qref must be nonzero")
        if self.cutoff >= OMEGA0 / (2 * np.pi) / 5:
            raise ValueError("cutoff must be well below the fundamental")
        if self.t1 < 5 / (2 * np.pi * self.cutoff):
            raise ValueError("pre-step window shorter than five filter time constants")


@dataclass(frozen=True)
class EstimationResult:
    R_g: float
    L_g: float
    dV_d: float
    dV_q: float
    dI_gd: float
    dI_gq: float
    cond: float
    t2: float
    record: WaveRecord | None = None

    def errors(self, R_true: float, L_true: float) -> tuple[float, float]:
        """Relative errors in percent of (R_g, L_g)."""
        return 100 * abs(self.R_g - R_true) / R_true, 100 * abs(self.L_g - L_true) / L_true

    def csv_row(self, R_true: float, L_true: float) -> list[str]:
        er, el = self.errors(R_true, L_true)
        return [repr(float(v)) for v in (R_true, L_true, self.R_g, self.L_g, er, el, self.cond)]

    def to_text(self) -> str:
        keys = ("R_g", "L_g", "dV_d", "dV_q", "dI_gd", "dI_gq", "cond", "t2")
        return "".join(f"{k} = {getattr(self, k)!r}\n" for k in keys)


CSV_HEADER = ("rg_true", "lg_true", "rg_est", "lg_est", "err_rg_pct", "err_lg_pct", "cond")


def _frame_dq(rec: WaveRecord, theta_of_t, omega0: float):
    """Re-express grid-frame dq channels in a frame given by theta(t), going
    through synthesized three-phase samples."""
    t = rec.t
    th_grid = omega0 * t
    th = theta_of_t(t)
    out = {}
    for d, q in (("vd_V", "vq_V"), ("igd_A", "igq_A")):
        abc = inverse_park(rec[d], rec[q], th_grid)
        out[d], out[q] = park(*abc, th)
    return out


def run_estimation(sc: Scenario, cfg: EstimationConfig = EstimationConfig(), seed: int = 0,
                   keep_record: bool = False) -> EstimationResult:
    """Execute the reactive-step protocol on a freshly started simulation."""
    if cfg.device == "sad" and sc.model.sad is None:
        raise EstimationError("the protocol needs a damper to inject the reactive step")
    horizon = cfg.t1 + 2.5 * (cfg.t2 - cfg.t1)
    sim = Simulation(replace(sc, duration=max(sc.duration, horizon)), seed)
    return estimate_on(sim, cfg, keep_record)


def estimate_on(sim: Simulation, cfg: EstimationConfig = EstimationConfig(),
                keep_record: bool = False) -> EstimationResult:
    """Run the reactive-step protocol on a simulation that has not yet
    reached ``cfg.t1``.

    The measuring device's PLL angle and frequency at ``t1`` define the
    frozen frame. If any channel has not settled at ``t2``, the window is
    extended once by its own length. The q reference is restored at the end.
    """
    if cfg.device not in sim.ids:
        raise EstimationError(f"no device {cfg.device!r} to inject the reactive step")
    if sim.t > cfg.t1 + 1e-12:
        raise EstimationError("simulation is already past the step time")
    omega0 = sim.sc.model.grid.omega0
    k = sim.ids.index(cfg.device)
    iq0 = sim._init_refs[k][1]
    sim.add_event(Event(cfg.t1, "iq_ref", cfg.device, iq0 + cfg.dI_qref))
    sim.advance(cfg.t1)
    rec = sim.record()
    if rec.divergent:
        raise EstimationError("system diverged before the step")
    dev = cfg.device
    theta1 = omega0 * cfg.t1 + rec[f"dtheta_rad_{dev}"][-1]
    omega_g = omega0 + rec[f"domega_rad_s_{dev}"][-1]

    def frozen(t):
        return theta1 + omega_g * (t - cfg.t1)

    fs = rec.sample_rate
    names = ("vd_V", "vq_V", "igd_A", "igq_A")

    def dc_values(r: WaveRecord, theta_fn):
        ch = _frame_dq(r, theta_fn, omega0)
        vs = math.hypot(ch["vd_V"][-1], ch["vq_V"][-1])
        isc = max(math.hypot(ch["igd_A"][-1], ch["igq_A"][-1]), abs(cfg.dI_qref))
        return [extract_dc(ch[nm], fs, cfg.cutoff, cfg.settle_tol, scale=vs if nm[0] == "v" else isc)
                for nm in names]

    pre = dc_values(rec, frozen)
    t2 = cfg.t2
    for attempt in range(2):
        sim.advance(t2)
        rec = sim.record()
        if rec.divergent:
            raise EstimationError("system diverged during the estimation window")
        if cfg.live_frame:
            th_live = omega0 * rec.t + rec[f"dtheta_rad_{dev}"]

            def live(t, _th=th_live):
                return _th

            post = dc_values(rec, live)
        else:
            post = dc_values(rec, frozen)
        if all(p.settled for p in post):
            break
        if attempt == 0:
            t2 = t2 + (cfg.t2 - cfg.t1)
    else:
        raise EstimationError("dc components did not settle after one extension")
    sim.add_event(Event(t2, "iq_ref", cfg.device, iq0))
    dV_d, dV_q, dI_d, dI_q = (b.value - a.value for a, b in zip(pre, post))
    R, L, cond = solve_rg_lg(dV_d, dV_q, dI_d, dI_q, omega0)
    return EstimationResult(R, L, dV_d, dV_q, dI_d, dI_q, cond, t2, rec if keep_record else None)
