"""Margin-constrained damper design, surrogate datasets and the adaptive loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import ann
from .dqcore import FrequencyGrid
from .plants import (
    CASE_INVERTERS,
    GflParams,
    GridParams,
    OperatingPoint,
    SadParams,
    gfl_admittance_at,
    pcc_voltage,
    sad_admittance,
)
from .stability import SystemModel, _eigs, assemble_ypcc, assess, assess_eigs

log = logging.getLogger(__name__)

SIGMA_THD = 0.1
HV_MAX = 5.0
HV_TOL = 0.01
N_OMEGA = 25
OMEGA_SPAN = (0.5, 3.0)
SURROGATE_HYPER = ann.Hyper(lr=0.16)
# Margins jump as H_v leaves zero (small damping lifts grazing loops off the
# real axis), so predicted gains inside the fit error are raised to this.
H_FLOOR = 0.05

ADMITTANCE_INPUTS = ("log10_f_hz", "V_d", "V_q", "I_od", "I_oq")
ADMITTANCE_TARGETS = ("re_ydd", "im_ydd", "re_ydq", "im_ydq", "re_yqd", "im_yqd", "re_yqq", "im_yqq")
SAD_INPUTS = ("I_d1", "I_d2", "L_g")
SAD_TARGETS = ("omega_c", "H_v")


class InfeasibleDesignError(RuntimeError):
    def __init__(self, msg, best_margin, best_omega_c=None, best_H_v=None):
        super().__init__(msg)
        self.best_margin = best_margin
        self.best_omega_c = best_omega_c
        self.best_H_v = best_H_v


@dataclass(frozen=True)
class SadDesign:
    omega_c: float
    H_v: float
    margin: float
    f_cr: float | None
    feasible: bool = True
    idle: bool = False

    def apply(self, base: SadParams = SadParams()) -> SadParams:
        return base.tuned(self.omega_c, self.H_v)


class MarginProbe:
    """Margin of one system for many damper settings.

    The undamped eigenvalues on the base grid are computed once; adding a
    damper only shifts every eigenvalue by its scalar admittance.
    """

    def __init__(self, model: SystemModel, grid: FrequencyGrid | None = None):
        self.model = model.with_sad(None)
        self.grid = grid or FrequencyGrid.log()
        self._E0 = _eigs(assemble_ypcc(self.model, self.grid.f)[0])
        self.base = assess_eigs(self._base_fn, self.grid)

    def _base_eigs(self, f):
        if f is self.grid.f:
            return self._E0
        return _eigs(assemble_ypcc(self.model, f)[0])

    def _base_fn(self, f):
        return self._base_eigs(f)

    def report(self, sp: SadParams):
        def fn(f):
            return self._base_eigs(f) + sad_admittance(sp, f)[:, None]
        return assess_eigs(fn, self.grid)

    def margin(self, sp: SadParams) -> float:
        return self.report(sp).margin


def _as_model(op) -> SystemModel:
    if isinstance(op, SystemModel):
        return op
    if isinstance(op, OperatingPoint):
        if len(op.currents) != len(CASE_INVERTERS):
            raise ValueError("operating point must list one current pair per case inverter")
        inv = tuple(zip(CASE_INVERTERS, op.currents))
        return SystemModel(inv, GridParams(R_g=op.R_g, L_g=op.L_g))
    raise TypeError("expected a SystemModel or an OperatingPoint")


def design_sad(op, sigma: float = SIGMA_THD, base: SadParams = SadParams(), *,
               grid: FrequencyGrid | None = None, n_omega: int = N_OMEGA,
               hv_max: float = HV_MAX, tol: float = HV_TOL) -> SadDesign:
    """Smallest damping gain meeting the margin, searched over centre frequency.

    Centre frequencies form a geometric grid over [0.5, 3] times the undamped
    critical angular frequency; at each, H_v is bisected on [0, hv_max]. The
    returned design is re-assessed with the full model before it is trusted.
    """
    model = _as_model(op)
    probe = MarginProbe(model, grid)
    b = probe.base
    if b.margin >= sigma:
        return SadDesign(base.omega_c, 0.0, b.margin, b.f_cr, True, True)
    w_cr = 2 * np.pi * b.f_cr
    omegas = w_cr * np.geomspace(OMEGA_SPAN[0], OMEGA_SPAN[1], n_omega)
    best_fail = (-math.inf, None, None)
    cands = []
    for wc in omegas:
        m_hi = probe.margin(base.tuned(wc, hv_max))
        if m_hi < sigma:
            if m_hi > best_fail[0]:
                best_fail = (m_hi, wc, hv_max)
            continue
        lo, hi = 0.0, hv_max
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if probe.margin(base.tuned(wc, mid)) >= sigma:
                hi = mid
            else:
                lo = mid
        cands.append((hi, abs(wc - w_cr), wc))
    if not cands:
        raise InfeasibleDesignError(
            f"no damper setting reaches margin {sigma:g}; best {best_fail[0]:.4g}", *best_fail)
    hv, _, wc = min(cands)
    rep = assess(model.with_sad(base.tuned(wc, hv)), probe.grid)
    if rep.margin < sigma:
        raise InfeasibleDesignError(f"re-assessed margin {rep.margin:.4g} below {sigma:g}",
                                    rep.margin, wc, hv)
    return SadDesign(float(wc), float(hv), rep.margin, rep.f_cr, True, False)


@dataclass(frozen=True)
class OperatingGrid:
    I_d1: tuple[float, ...] = (0.0, 12.5, 25.0, 37.5, 50.0)
    I_d2: tuple[float, ...] = (0.0, 15.0, 30.0, 45.0, 60.0)
    Z_g: tuple[tuple[float, float], ...] = ((1.5e-3, 0.075), (2.5e-3, 0.125), (3.5e-3, 0.175),
                                            (4.5e-3, 0.2275), (5.5e-3, 0.275))

    def __post_init__(self):
        if not (self.I_d1 and self.I_d2 and self.Z_g):
            raise ValueError("operating grid lists must be nonempty")
        if any(L <= 0 or R <= 0 for L, R in self.Z_g):
            raise ValueError("grid impedance pairs must be positive")

    def points(self):
        for L, R in self.Z_g:
            for i1 in self.I_d1:
                for i2 in self.I_d2:
                    yield i1, i2, L, R


def case_model(I_d1: float, I_d2: float, L_g: float, R_g: float, sad: SadParams | None = None):
    inv = ((CASE_INVERTERS[0], (float(I_d1), 0.0)), (CASE_INVERTERS[1], (float(I_d2), 0.0)))
    return SystemModel(inv, GridParams(R_g=R_g, L_g=L_g), sad)


@dataclass
class SadDatasetResult:
    dataset: ann.Dataset
    designs: list
    infeasible: list


def generate_sad_dataset(grid: OperatingGrid = OperatingGrid(), sigma: float = SIGMA_THD,
                         seed: int = 0, max_infeasible: float = 0.10, **design_kw) -> SadDatasetResult:
    """Design the damper at every grid point; rows (I_d1, I_d2, L_g) -> (omega_c, H_v)."""
    X, Y, designs, bad = [], [], [], []
    pts = list(grid.points())
    for i1, i2, L, R in pts:
        try:
            d = design_sad(case_model(i1, i2, L, R), sigma, **design_kw)
        except InfeasibleDesignError as e:
            log.warning("infeasible grid point I_d1=%g I_d2=%g L_g=%g: best margin %.4g",
                        i1, i2, L, e.best_margin)
            bad.append((i1, i2, L, R, e.best_margin))
            continue
        X.append((i1, i2, L))
        Y.append((d.omega_c, d.H_v))
        designs.append(((i1, i2, L, R), d))
    if len(bad) > max_infeasible * len(pts):
        raise InfeasibleDesignError(f"{len(bad)} of {len(pts)} grid points infeasible", None)
    ds = ann.Dataset(np.array(X).reshape(-1, 3), np.array(Y).reshape(-1, 2), SAD_INPUTS, SAD_TARGETS)
    return SadDatasetResult(ds.assign_splits(seed), designs, bad)


def _targets(Y):
    return np.stack([Y[..., 0, 0].real, Y[..., 0, 0].imag, Y[..., 0, 1].real, Y[..., 0, 1].imag,
                     Y[..., 1, 0].real, Y[..., 1, 0].imag, Y[..., 1, 1].real, Y[..., 1, 1].imag],
                    axis=-1)


def generate_admittance_dataset(inverter: GflParams, ops: Sequence[tuple[float, float, float]],
                                freqs, mode: str = "analytic", seed: int = 0, **scan_kw) -> ann.Dataset:
    """Rows (log10 f, V_d, V_q, I_od, I_oq) -> Re/Im of the four dq entries.

    ``ops`` lists (V_d, I_od, I_oq). In ``measured`` mode the targets come
    from perturbation scans; operating points whose scan is refused are
    skipped with a log entry.
    """
    if mode not in ("analytic", "measured"):
        raise ValueError("mode must be 'analytic' or 'measured'")
    f = np.asarray(freqs.f if isinstance(freqs, FrequencyGrid) else freqs, dtype=float)
    X, T = [], []
    for V_d, I_d, I_q in ops:
        if not V_d > 0:
            raise ValueError("invalid operating point: V_d must be positive")
        if mode == "analytic":
            Y = gfl_admittance_at(inverter, V_d, I_d, I_q, f)
        else:
            from .simtime import ScanError, scan_admittance
            try:
                Y = scan_admittance(inverter, OperatingPoint(V_d, ((I_d, I_q),), 0.0, 0.0), f,
                                    **scan_kw).Y
            except ScanError as e:
                log.warning("scan refused at V_d=%g I_d=%g I_q=%g: %s", V_d, I_d, I_q, e)
                continue
        for k in range(f.size):
            X.append((np.log10(f[k]), V_d, 0.0, I_d, I_q))
        T.append(_targets(Y))
    T = np.concatenate(T) if T else np.zeros((0, 8))
    ds = ann.Dataset(np.array(X).reshape(-1, 5), T, ADMITTANCE_INPUTS, ADMITTANCE_TARGETS)
    return ds.assign_splits(seed)


def default_admittance_ops(inverter: GflParams = CASE_INVERTERS[0]):
    """Operating points spanning load levels and PCC voltages of the study case."""
    return [(V, I, 0.0) for I in np.linspace(0.0, inverter.I_dref, 5) for V in (300.0, 310.0, 320.0)]


def train_surrogate(ds: ann.Dataset, seed: int = 0, hyper: ann.Hyper = SURROGATE_HYPER):
    return ann.train(ds, hyper, seed)


def predict_design(model: ann.MlpModel, I_d1: float, I_d2: float, L_g: float,
                   h_floor: float = H_FLOOR):
    """(omega_c, H_v, extrapolated) from the damper-parameter surrogate."""
    p = ann.predict(model, [I_d1, I_d2, L_g])
    wc, hv = (float(v) for v in p.value)
    return wc, max(hv, h_floor), p.extrapolated


# adaptive loop ---------------------------------------------------------------

@dataclass
class AdaptStep:
    t: float
    I_d1: float
    I_d2: float
    omega_c: float
    H_v: float
    source: str  # surrogate | design | fallback
    margin: float
    confirmed: bool
    flags: list = field(default_factory=list)


@dataclass
class AdaptReport:
    R_g_est: float | None
    L_g_est: float | None
    estimation_error: str | None
    steps: list
    verdict: str
    growth_rate: float
    peak_current: float
    record: object = None

    def to_text(self) -> str:
        lines = [f"R_g_est = {self.R_g_est!r}", f"L_g_est = {self.L_g_est!r}"]
        if self.estimation_error:
            lines.append(f"estimation_error = {self.estimation_error}")
        for s in self.steps:
            lines.append(f"step t={s.t:.4f} I_d1={s.I_d1:.4g} I_d2={s.I_d2:.4g} omega_c={s.omega_c:.6g} "
                         f"H_v={s.H_v:.4g} source={s.source} margin={s.margin:.4g} "
                         f"confirmed={int(s.confirmed)} flags={','.join(s.flags) or '-'}")
        lines += [f"verdict = {self.verdict}", f"growth_rate = {self.growth_rate:.6g}",
                  f"peak_current = {self.peak_current:.6g}"]
        return "\n".join(lines) + "\n"

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_s", "I_d1", "I_d2", "R_g_est", "L_g_est", "omega_c", "H_v", "source",
                    "margin", "confirmed", "flags"])
        for s in self.steps:
            nums = (s.t, s.I_d1, s.I_d2, self.R_g_est, self.L_g_est, s.omega_c, s.H_v)
            w.writerow([repr(float(v)) for v in nums] + [s.source, repr(float(s.margin)),
                                                         int(s.confirmed), ";".join(s.flags)])
        return buf.getvalue()


def _measured_currents(rec, ids, window: int = 200):
    """Mean d-axis current of each inverter in its own PLL frame over the
    last ``window`` samples."""
    out = []
    for d in ids:
        if not d.startswith("inv"):
            continue
        th = rec[f"dtheta_rad_{d}"][-window:]
        i = rec[f"id_A_{d}"][-window:] + 1j * rec[f"iq_A_{d}"][-window:]
        out.append(float(np.mean((i * np.exp(-1j * th)).real)))
    return out


def adapt(sc, surrogate: ann.MlpModel | None = None, sigma: float = SIGMA_THD, *,
          est_cfg=None, check_every: float = 0.05, threshold: float = 2.0, seed: int = 0,
          grid: FrequencyGrid | None = None, window: float = 0.05) -> AdaptReport:
    """Self-adaptive damping on a running scenario.

    Estimates the grid impedance first, then samples the inverter currents
    every ``check_every`` seconds; whenever they move by more than
    ``threshold`` amps from the last applied point the damper parameters are
    re-predicted (or designed directly when no surrogate is given, the
    prediction extrapolates, or its assessed margin is negative) and applied.
    """
    from .simtime import Simulation, detect_instability
    from .zest import EstimationConfig, EstimationError, InsufficientExcitationError, estimate_on

    if sc.model.sad is None:
        raise ValueError("adaptive damping needs a damper in the scenario")
    est_cfg = est_cfg or EstimationConfig()
    sim = Simulation(sc, seed)
    base = sc.model.sad
    R_hat = L_hat = None
    est_err = None
    try:
        est = estimate_on(sim, est_cfg)
        R_hat, L_hat = est.R_g, est.L_g
    except (EstimationError, InsufficientExcitationError, np.linalg.LinAlgError) as e:
        est_err = str(e)
        log.warning("impedance estimation failed: %s", e)
    if R_hat is None or not (L_hat > 0 and R_hat > 0):
        # without an estimate the configured grid is the only information left
        R_hat, L_hat = sc.model.grid.R_g, sc.model.grid.L_g
        est_err = est_err or "non-physical estimate"
    steps: list[AdaptStep] = []
    last = None
    t = sim.t
    while t < sc.duration - 1e-12 and not sim.divergent:
        rec = sim.record()
        cur = _measured_currents(rec, sim.ids)
        if last is None or max(abs(a - b) for a, b in zip(cur, last)) > threshold:
            step = _retune(sim, base, cur, R_hat, L_hat, surrogate, sigma, grid, est_err)
            base = base.tuned(step.omega_c, step.H_v)
            steps.append(step)
            last = cur
        t = min(sc.duration, t + check_every)
        sim.advance(t)
    rec = sim.record()
    v = detect_instability(rec, window)
    ig = np.hypot(rec["igd_A"], rec["igq_A"])
    return AdaptReport(R_hat, L_hat, est_err, steps, v.verdict, v.rate, float(ig.max()), rec)


def _retune(sim, base: SadParams, cur, R_hat, L_hat, surrogate, sigma, grid, est_err) -> AdaptStep:
    I1, I2 = (cur + [0.0, 0.0])[:2]
    model = case_model(max(I1, 0.0), max(I2, 0.0), L_hat, R_hat)
    flags = []
    if est_err:
        flags.append("estimation")
    wc = hv = None
    source = "design"
    if surrogate is not None:
        wc, hv, extra = predict_design(surrogate, I1, I2, L_hat)
        source = "surrogate"
        if extra:
            flags.append("extrapolated")
            wc = None
        elif not wc > 0:
            flags.append("invalid-prediction")
            wc = None
    margin = math.nan
    if wc is not None:
        probe = MarginProbe(model, grid)
        margin = probe.margin(base.tuned(wc, hv)) if hv > 0 else probe.base.margin
        if margin < 0:
            flags.append("negative-margin")
            wc = None
    if wc is None or "estimation" in flags:
        try:
            d = design_sad(model, sigma, base, grid=grid)
            wc, hv, margin = d.omega_c, d.H_v, d.margin
            source = "fallback" if surrogate is not None else "design"
        except InfeasibleDesignError as e:
            flags.append("infeasible")
            if wc is None:
                wc, hv = e.best_omega_c or base.omega_c, e.best_H_v or HV_MAX
                margin = e.best_margin if e.best_margin is not None else math.nan
    sim.retune_sad(base.tuned(wc, hv))
    return AdaptStep(sim.t, I1, I2, float(wc), float(hv), source, float(margin),
                     bool(margin >= 0.8 * sigma), flags)
