"""Eigenvalue-trajectory stability assessment of the PCC nodal admittance."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dqcore import (
    EigenTrajectory,
    FrequencyGrid,
    GridTooCoarseError,
    arg_increments,
    eig2,
    inv2,
    track_branches,
    winding_number,
)
from .plants import (
    CASE_INVERTERS,
    GflParams,
    GridParams,
    OperatingPoint,
    SadParams,
    gfl_admittance_at,
    grid_impedance,
    pcc_voltage,
    sad_admittance,
)

log = logging.getLogger(__name__)

MARGINAL_BAND = 0.02
ARG_STEP = np.pi / 8
CROSSING_REL_WIDTH = 1e-7


class ConditionallyStableWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SystemModel:
    """Paralleled inverters, grid branch and an optional damper at one PCC.

    ``inverters`` holds (parameters, (I_d0, I_q0)) pairs. When ``V_d0`` is
    None the PCC voltage follows from the steady power flow.
    """

    inverters: tuple[tuple[GflParams, tuple[float, float]], ...]
    grid: GridParams
    sad: SadParams | None = None
    V_d0: float | None = None

    def __post_init__(self):
        if len(self.inverters) < 1:
            raise ValueError("system needs at least one inverter")
        inv = tuple((p, (float(c[0]), float(c[1]))) for p, c in self.inverters)
        object.__setattr__(self, "inverters", inv)

    @property
    def total_current(self) -> complex:
        return sum(complex(d, q) for _, (d, q) in self.inverters)

    @property
    def pcc_voltage(self) -> float:
        if self.V_d0 is not None:
            return float(self.V_d0)
        return pcc_voltage(self.grid, self.total_current)

    def operating_point(self) -> OperatingPoint:
        return OperatingPoint(self.pcc_voltage, tuple(c for _, c in self.inverters),
                              self.grid.R_g, self.grid.L_g)

    def with_sad(self, sad: SadParams | None) -> "SystemModel":
        return replace(self, sad=sad)

    def scaled_power(self, k: float) -> "SystemModel":
        inv = tuple((p, (k * d, k * q)) for p, (d, q) in self.inverters)
        return replace(self, inverters=inv, V_d0=None)

    def scaled_grid(self, k: float) -> "SystemModel":
        g = replace(self.grid, R_g=k * self.grid.R_g, L_g=k * self.grid.L_g)
        return replace(self, grid=g, V_d0=None)


def case_system(L_g: float = 4e-3, R_g: float = 0.2, power: float = 1.0,
                sad: SadParams | None = None, currents: Sequence[float] | None = None) -> SystemModel:
    """Two-inverter study case; ``currents`` overrides the rated d-axis currents."""
    if currents is None:
        currents = [power * p.I_dref for p in CASE_INVERTERS]
    inv = tuple((p, (float(i), 0.0)) for p, i in zip(CASE_INVERTERS, currents))
    return SystemModel(inv, GridParams(R_g=R_g, L_g=L_g), sad)


def assemble_ypcc(model: SystemModel, f, yeq_override: Callable | None = None,
                  include_sad: bool = True):
    """Nodal admittance at the PCC and the return-ratio diagnostic.

    Returns ``(Y_pcc, L_m)`` as (n, 2, 2) arrays. ``yeq_override(f)`` replaces
    the summed inverter admittance.
    """
    f = np.atleast_1d(np.asarray(f, dtype=float))
    zg = grid_impedance(model.grid, f)
    if yeq_override is not None:
        ysum = np.asarray(yeq_override(f), dtype=complex)
    else:
        v = model.pcc_voltage
        ysum = np.zeros(f.shape + (2, 2), dtype=complex)
        for p, (d, q) in model.inverters:
            ysum = ysum + gfl_admittance_at(p, v, d, q, f)
    y = ysum + inv2(zg)
    if include_sad and model.sad is not None:
        yad = sad_admittance(model.sad, f)
        y[..., 0, 0] += yad
        y[..., 1, 1] += yad
    return y, ysum @ zg


def _eigs(M):
    a, b = eig2(M)
    return np.stack((np.atleast_1d(a), np.atleast_1d(b)), axis=-1)


def find_crossings(traj: EigenTrajectory) -> list[tuple[float, float]]:
    """Frequencies where Im changes sign, linearly interpolated, with Re there."""
    f = np.asarray(traj.f)
    v = np.asarray(traj.values)
    im = v.imag
    sg = np.sign(im)
    out = []
    n = len(f)
    k = 0
    while k < n - 1:
        if sg[k] != 0 and sg[k + 1] != 0 and sg[k] != sg[k + 1]:
            t = im[k] / (im[k] - im[k + 1])
            out.append((f[k] + t * (f[k + 1] - f[k]), v[k].real + t * (v[k + 1].real - v[k].real)))
        elif sg[k + 1] == 0 and sg[k] != 0:
            j = k + 1
            while j < n and sg[j] == 0:
                j += 1
            if j < n and sg[j] == -sg[k]:
                mid = (k + 1 + j - 1) // 2
                out.append((f[mid], v[mid].real))
            k = j - 1
        k += 1
    return out


def refined_eigs(eig_fn: Callable, f0: np.ndarray, max_pass: int = 60, max_points: int = 60000):
    """Evaluate eigenvalue pairs on ``f0`` and bisect (geometrically) every
    segment that turns by pi/8 or more about the origin or brackets an
    Im-sign change, until none remain or the budget runs out."""
    f = np.asarray(f0, dtype=float)
    E = eig_fn(f)
    for _ in range(max_pass):
        t1, t2 = track_branches(f, E)
        need = np.zeros(f.size - 1, dtype=bool)
        wide = f[1:] / f[:-1] - 1 > CROSSING_REL_WIDTH
        for t in (t1, t2):
            inc = np.abs(arg_increments(t.values))
            need |= ~(inc < ARG_STEP) & wide
            s = np.sign(t.values.imag)
            need |= (s[:-1] * s[1:] < 0) & wide
        if not need.any() or f.size >= max_points:
            break
        fm = np.sqrt(f[:-1] * f[1:])[need]
        Em = eig_fn(fm)
        idx = np.searchsorted(f, fm)
        f = np.insert(f, idx, fm)
        E = np.insert(E, idx, Em, axis=0)
    return f, E, track_branches(f, E)


@dataclass
class StabilityReport:
    f: np.ndarray
    trajectories: tuple[EigenTrajectory, EigenTrajectory]
    crossings: tuple[list, list]
    windings: tuple[int, int]
    margin: float
    critical_branch: int | None
    f_cr: float | None
    verdict: str
    lm: np.ndarray = field(repr=False, default=None)
    lm_f: np.ndarray = field(repr=False, default=None)
    warnings: list = field(default_factory=list)
    sad_identity_error: float | None = None

    def summary(self) -> dict:
        return {
            "verdict": self.verdict,
            "margin": self.margin,
            "f_cr": self.f_cr,
            "branch": self.critical_branch,
            "winding_1": self.windings[0],
            "winding_2": self.windings[1],
        }

    def to_text(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in self.summary().items()]
        for b, cr in enumerate(self.crossings, start=1):
            for fc, re in cr:
                lines.append(f"crossing_{b} = {fc:.6g} Hz, {re:.6g}")
        lines += [f"warning = {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"

    def trajectories_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["f_hz", "re_l1", "im_l1", "re_l2", "im_l2"])
        a, b = self.trajectories
        for f, x, y in zip(self.f, a.values, b.values):
            w.writerow([repr(float(v)) for v in (f, x.real, x.imag, y.real, y.imag)])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def read_trajectories_csv(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse trajectory CSV back into (f, (n, 2) eigenvalues)."""
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0] != ["f_hz", "re_l1", "im_l1", "re_l2", "im_l2"]:
        raise ValueError("unexpected trajectory header")
    a = np.array([[float(x) for x in r] for r in rows[1:]])
    return a[:, 0], np.stack((a[:, 1] + 1j * a[:, 2], a[:, 3] + 1j * a[:, 4]), axis=1)


def assess_eigs(eig_fn: Callable, grid: FrequencyGrid | None = None,
                marginal_band: float = MARGINAL_BAND) -> StabilityReport:
    """Stability verdict from a function mapping frequencies to (n, 2)
    eigenvalue pairs of the PCC admittance."""
    grid = grid or FrequencyGrid.log()
    f, E, (t1, t2) = refined_eigs(eig_fn, grid.f)
    crossings = (find_crossings(t1), find_crossings(t2))
    try:
        windings = (winding_number(t1), winding_number(t2))
    except GridTooCoarseError:
        raise GridTooCoarseError("refinement budget exhausted before arguments resolved")
    best = None
    for b, cr in enumerate(crossings, start=1):
        for fc, re in cr:
            if best is None or re < best[2]:
                best = (b, fc, re)
    margin = best[2] if best else math.inf
    unstable = any(w != 0 for w in windings)
    if abs(margin) < marginal_band:
        verdict = "marginal"
    else:
        verdict = "unstable" if unstable else "stable"
    warns = []
    for b, (w, cr) in enumerate(zip(windings, crossings), start=1):
        neg = [c for c in cr if c[1] < 0]
        if (w == 0) == bool(neg):
            msg = (f"branch {b}: winding {w} with {len(neg)} negative-real crossing(s); "
                   "conditionally stable trajectory, crossing margin not decisive")
            warns.append(msg)
            log.warning(msg)
    return StabilityReport(
        f=f, trajectories=(t1, t2), crossings=crossings, windings=windings,
        margin=float(margin), critical_branch=best[0] if best else None,
        f_cr=float(best[1]) if best else None, verdict=verdict, warnings=warns,
    )


def assess(model: SystemModel, grid: FrequencyGrid | None = None,
           marginal_band: float = MARGINAL_BAND) -> StabilityReport:
    """Stability report of a system model, damper included when present."""
    grid = grid or FrequencyGrid.log()

    def eig_fn(f):
        return _eigs(assemble_ypcc(model, f)[0])

    rep = assess_eigs(eig_fn, grid, marginal_band)
    idx = np.unique(np.linspace(0, rep.f.size - 1, min(rep.f.size, 400)).astype(int))
    rep.lm_f = rep.f[idx]
    rep.lm = assemble_ypcc(model, rep.lm_f)[1]
    if model.sad is not None:
        rep.sad_identity_error = shift_identity_error(model, rep.f)
        if rep.sad_identity_error > 1e-9:
            raise RuntimeError(f"damper superposition identity violated: {rep.sad_identity_error:g}")
    return rep


def shift_identity_error(model: SystemModel, f) -> float:
    """Largest relative gap between eig(Y + Y_ad I) and eig(Y) + Y_ad."""
    y_with, _ = assemble_ypcc(model, f)
    y_base, _ = assemble_ypcc(model, f, include_sad=False)
    yad = sad_admittance(model.sad, f)
    lw = _eigs(y_with)
    ls = _eigs(y_base) + yad[:, None]
    keep = np.abs(lw[:, 0] - ls[:, 0]) + np.abs(lw[:, 1] - ls[:, 1])
    swap = np.abs(lw[:, 0] - ls[:, 1]) + np.abs(lw[:, 1] - ls[:, 0])
    err = np.minimum(keep, swap) / np.maximum(1.0, np.abs(lw).max(axis=1))
    return float(err.max())


@dataclass(frozen=True)
class SweepRow:
    value: float
    branch: int | None
    f_cr: float | None
    margin: float
    verdict: str


def margin_sweep(template: SystemModel, axis: str, values: Sequence[float],
                 grid: FrequencyGrid | None = None) -> list[SweepRow]:
    """Critical eigenvalue data while scaling output power or grid impedance.

    ``axis`` is ``"power"`` (inverter currents times value) or ``"impedance"``
    (R_g and L_g times value).
    """
    if axis not in ("power", "impedance"):
        raise ValueError("axis must be 'power' or 'impedance'")
    values = [float(v) for v in values]
    if any(b < a for a, b in zip(values, values[1:])):
        raise ValueError("sweep values must be nondecreasing")
    rows = []
    for v in values:
        m = template.scaled_power(v) if axis == "power" else template.scaled_grid(v)
        r = assess(m, grid)
        rows.append(SweepRow(v, r.critical_branch, r.f_cr, r.margin, r.verdict))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "branch", "f_cr_hz", "margin", "verdict"])
    for r in rows:
        w.writerow([repr(float(r.value)), r.branch if r.branch is not None else "",
                    repr(float(r.f_cr)) if r.f_cr is not None else "", repr(float(r.margin)), r.verdict])
    return buf.getvalue()
