"""Small-signal dq models of the grid branch, the reference grid-following
inverter and the active damper.

All frequency functions accept a scalar or an array of frequencies in Hz and
return values broadcast over it; matrix-valued results carry two trailing
(2, 2) axes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dqcore import RationalTF, dq_matrix, inv2, pade_delay

OMEGA0 = 2 * np.pi * 50.0
V_GRID = 380.0 * np.sqrt(2.0 / 3.0)  # phase peak of 380 V line-line


@dataclass(frozen=True)
class GridParams:
    R_g: float
    L_g: float
    omega0: float = OMEGA0
    V_g: float = V_GRID

    def __post_init__(self):
        if self.R_g < 0 or self.L_g < 0:
            raise ValueError("grid R_g and L_g must be non-negative")
        if self.R_g == 0 and self.L_g == 0:
            raise ValueError("grid impedance cannot be zero")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")


@dataclass(frozen=True)
class GflParams:
    V_dc: float = 800.0
    L: float = 3e-3
    R_L: float = 0.015
    k_pi: float = 18.0
    k_ii: float = 300.0
    k_pPLL: float = 5.0
    k_iPLL: float = 100.0
    f_s: float = 10e3
    I_dref: float = 50.0
    I_qref: float = 0.0
    omega0: float = OMEGA0

    def __post_init__(self):
        gains = (self.k_pi, self.k_ii, self.k_pPLL, self.k_iPLL)
        if min(gains) <= 0:
            raise ValueError("controller gains must be positive")
        if self.f_s < 1e3:
            raise ValueError("f_s below 1 kHz")
        if self.L <= 0:
            raise ValueError("filter inductance must be positive")


INV1 = GflParams()
INV2 = GflParams(L=2.5e-3, R_L=0.01, k_pi=15.0, I_dref=60.0)
CASE_INVERTERS = (INV1, INV2)


@dataclass(frozen=True)
class SadParams:
    V_dc: float = 750.0
    C_dc: float = 5000e-6
    L_f: float = 3e-3
    R_f: float = 0.01
    k_vp: float = 0.5
    k_vi: float = 5.0
    k_cp: float = 10.0
    k_ci: float = 20.0
    k_pPLL: float = 0.5
    k_iPLL: float = 50.0
    H_v: float = 2.0
    omega_c: float = 1005.31
    B: float = 200.0
    beta: float = 20.0
    f_s: float = 20e3
    omega0: float = OMEGA0

    def __post_init__(self):
        if self.H_v < 0:
            raise ValueError("H_v must be non-negative")
        if self.omega_c <= 0 or self.B <= 0:
            raise ValueError("SBPF centre and bandwidth must be positive")
        if self.beta <= 1:
            raise ValueError("lag ratio beta must exceed 1")

    @property
    def tau(self) -> float:
        return 2.5 / self.omega_c

    def tuned(self, omega_c: float, H_v: float) -> "SadParams":
        return replace(self, omega_c=float(omega_c), H_v=float(H_v))


@dataclass(frozen=True)
class OperatingPoint:
    """PCC d-axis voltage (q is zero in the PLL frame), per-inverter output
    currents and the grid branch."""

    V_d0: float
    currents: tuple[tuple[float, float], ...]
    R_g: float
    L_g: float

    def __post_init__(self):
        if not self.V_d0 > 0:
            raise ValueError("invalid operating point: V_d0 must be positive")
        cur = tuple((float(d), float(q)) for d, q in self.currents)
        if not np.all(np.isfinite(cur)):
            raise ValueError("operating currents must be finite")
        object.__setattr__(self, "currents", cur)


def pcc_voltage(grid: GridParams, I_total: complex) -> float:
    """Steady PCC voltage magnitude when ``I_total`` (d + jq, PCC frame) flows
    into the grid branch."""
    z = complex(grid.R_g, grid.omega0 * grid.L_g) * complex(I_total)
    under = grid.V_g**2 - z.imag**2
    if under <= 0:
        raise ValueError("no steady operating point: grid cannot carry this current")
    return z.real + np.sqrt(under)


def _s(f):
    return 2j * np.pi * np.asarray(f, dtype=float)


def grid_impedance(gp: GridParams, f) -> np.ndarray:
    s = _s(f)
    z = s * gp.L_g + gp.R_g
    x = gp.omega0 * gp.L_g
    return dq_matrix(z, -x, x, z)


def sbpf(omega_c: float, B: float) -> RationalTF:
    """Second-order band-pass with unity gain at ``omega_c`` and bandwidth B (Hz)."""
    if omega_c <= 0 or B <= 0:
        raise ValueError("omega_c and B must be positive")
    w = 2 * np.pi * B
    return RationalTF((0.0, w), (omega_c**2, w, 1.0))


def lac(beta: float, tau: float) -> RationalTF:
    """Lag compensator (tau s + 1) / (beta tau s + 1)."""
    if beta <= 1 or tau <= 0:
        raise ValueError("lag compensator needs beta > 1 and tau > 0")
    return RationalTF((1.0, tau), (1.0, beta * tau))


def lac_char(beta: float, tau: float) -> tuple[float, float, float, float]:
    """Corner frequencies, frequency of extreme phase (rad/s) and its size (deg)."""
    if beta <= 1 or tau <= 0:
        raise ValueError("lag compensator needs beta > 1 and tau > 0")
    w1 = 1.0 / (beta * tau)
    w2 = 1.0 / tau
    wm = 1.0 / (tau * np.sqrt(beta))
    phi = np.degrees(np.arctan((beta - 1) / (2 * np.sqrt(beta))))
    return w1, w2, wm, phi


def damping_filter(sp: SadParams, use_lac: bool = True) -> RationalTF:
    """Voltage-feedback filter of the damper: band-pass followed by the lag
    compensator scaled to unity high-frequency gain."""
    g = sbpf(sp.omega_c, sp.B)
    if use_lac:
        g = g * (sp.beta * lac(sp.beta, sp.tau))
    return g


def _pi(kp: float, ki: float, s):
    return kp + ki / s


def _sad_parts(sp: SadParams, f, use_lac: bool):
    f = np.asarray(f, dtype=float)
    zero = f == 0
    s = _s(np.where(zero, 1.0, f))
    gd = pade_delay(1.5 / sp.f_s)(s)
    den = s * sp.L_f + sp.R_f + _pi(sp.k_cp, sp.k_ci, s) * gd
    gf = damping_filter(sp, use_lac)(s)
    return zero, 1.0 / den, gf * gd / den


def sad_admittance(sp: SadParams, f, use_lac: bool = True):
    """Scalar output admittance of the damper's current loop.

    At f = 0 the integral action drives it to exactly zero.
    """
    zero, base, k = _sad_parts(sp, f, use_lac)
    y = np.where(zero, 0.0, base + sp.H_v * k)
    return y[()] if y.ndim == 0 else y


def sad_damping_gain(sp: SadParams, f, use_lac: bool = True):
    """K(f) with Y_ad = Y_ad|_{H_v=0} + H_v K(f)."""
    zero, _, k = _sad_parts(sp, f, use_lac)
    k = np.where(zero, 0.0, k)
    return k[()] if k.ndim == 0 else k


def sad_admittance_matrix(sp: SadParams, f, use_lac: bool = True) -> np.ndarray:
    y = sad_admittance(sp, f, use_lac)
    return dq_matrix(y, 0.0, 0.0, y)


def gfl_admittance_at(gp: GflParams, V_d0: float, I_d0: float, I_q0: float, f,
                      pll: bool = True, delay: bool = True) -> np.ndarray:
    """dq output admittance of the reference grid-following inverter.

    Norton form: output current perturbation = -Y_eq @ PCC voltage
    perturbation, expressed in the PLL-aligned frame.
    """
    if not V_d0 > 0:
        raise ValueError("invalid operating point: V_d0 must be positive")
    f = np.asarray(f, dtype=float)
    # f = 0 is taken as the one-sided limit (integrators make s = 0 singular)
    s = _s(np.where(f == 0, 1e-12, f))
    w0L = gp.omega0 * gp.L
    gd = pade_delay(1.5 / gp.f_s)(s) if delay else np.ones_like(s)
    gc = _pi(gp.k_pi, gp.k_ii, s)
    zl = s * gp.L + gp.R_L
    A = dq_matrix(zl + gd * gc, -w0L, w0L, zl + gd * gc)
    B = np.broadcast_to(dq_matrix(1.0, 0.0, 0.0, 1.0), A.shape).copy()
    if pll:
        vmd = V_d0 + gp.R_L * I_d0 - w0L * I_q0
        vmq = w0L * I_d0 + gp.R_L * I_q0
        gpf = _pi(gp.k_pPLL, gp.k_iPLL, s)
        t_pll = gpf / (s + V_d0 * gpf)
        B[..., 0, 1] += gd * t_pll * (gc * I_q0 + vmq)
        B[..., 1, 1] += gd * t_pll * (-gc * I_d0 - vmd)
    return inv2(A) @ B


def gfl_admittance(gp: GflParams, op: OperatingPoint, f, which: int = 0) -> np.ndarray:
    """Admittance of inverter ``which`` of the operating point."""
    I_d0, I_q0 = op.currents[which]
    return gfl_admittance_at(gp, op.V_d0, I_d0, I_q0, f)
