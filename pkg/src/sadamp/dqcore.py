"""Frequency-response algebra: rational transfer functions, 2x2 dq matrices,
eigenvalue branch tracking and winding numbers.

A dq matrix is represented as a complex ndarray whose two trailing axes are
(2, 2), ordered ``[[dd, dq], [qd, qq]]``. Leading axes index frequency.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as P


class PoleError(ZeroDivisionError):
    """Transfer function evaluated on one of its poles."""


class GridTooCoarseError(RuntimeError):
    """A curve segment turns by pi or more around the winding point."""


class OnBoundaryError(RuntimeError):
    """The curve passes through the point whose winding is requested."""


@dataclass(frozen=True)
class RationalTF:
    """Real-coefficient rational function of s, coefficients in ascending powers."""

    num: tuple[float, ...]
    den: tuple[float, ...]

    def __post_init__(self):
        num = tuple(float(c) for c in self.num)
        den = tuple(float(c) for c in self.den)
        if not num or not den:
            raise ValueError("coefficient lists must be nonempty")
        if not all(np.isfinite(num)) or not all(np.isfinite(den)):
            raise ValueError("coefficients must be finite")
        if not any(den):
            raise ValueError("denominator is the zero polynomial")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    @classmethod
    def gain(cls, k: float) -> "RationalTF":
        return cls((k,), (1.0,))

    def __mul__(self, other):
        if isinstance(other, RationalTF):
            return RationalTF(P.polymul(self.num, other.num), P.polymul(self.den, other.den))
        return RationalTF(np.multiply(self.num, float(other)), self.den)

    __rmul__ = __mul__

    def __add__(self, other):
        if not isinstance(other, RationalTF):
            other = RationalTF.gain(float(other))
        num = P.polyadd(P.polymul(self.num, other.den), P.polymul(other.num, self.den))
        return RationalTF(num, P.polymul(self.den, other.den))

    __radd__ = __add__

    def __call__(self, s):
        """Evaluate at complex s (scalar or array)."""
        s = np.asarray(s, dtype=complex)
        d = P.polyval(s, self.den)
        scale = np.abs(P.polyval(np.abs(s), np.abs(self.den)))
        if np.any(np.abs(d) <= np.finfo(float).eps * scale):
            raise PoleError("denominator vanishes at the evaluation point")
        out = P.polyval(s, self.num) / d
        return out[()] if out.ndim == 0 else out


def eval_rational(tf: RationalTF, f):
    """Value of ``tf`` at s = j*2*pi*f (f in Hz, scalar or array)."""
    return tf(2j * np.pi * np.asarray(f, dtype=float))


def pade_delay(T_d: float) -> RationalTF:
    """Second-order Pade approximant of exp(-s*T_d)."""
    if not T_d > 0:
        raise ValueError("delay must be positive")
    a = T_d * T_d / 12.0
    return RationalTF((1.0, -0.5 * T_d, a), (1.0, 0.5 * T_d, a))


def dq_matrix(dd, dq, qd, qq) -> np.ndarray:
    """Stack four entries (scalars or equal-shape arrays) into a (..., 2, 2) array."""
    dd, dq, qd, qq = np.broadcast_arrays(*(np.asarray(x, dtype=complex) for x in (dd, dq, qd, qq)))
    out = np.empty(dd.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = dd
    out[..., 0, 1] = dq
    out[..., 1, 0] = qd
    out[..., 1, 1] = qq
    return out


def inv2(M: np.ndarray) -> np.ndarray:
    """Closed-form inverse of (..., 2, 2) matrices."""
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    if np.any(det == 0):
        raise np.linalg.LinAlgError("singular dq matrix")
    return dq_matrix(M[..., 1, 1], -M[..., 0, 1], -M[..., 1, 0], M[..., 0, 0]) / det[..., None, None]


def _ldexp(z, e):
    return np.ldexp(z.real, e) + 1j * np.ldexp(z.imag, e)


def eig2(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Both eigenvalues of (..., 2, 2) matrices from the characteristic quadratic.

    The root of larger magnitude is formed first and the other one from the
    determinant, which keeps sum and product accurate when the roots differ
    widely in size.
    """
    M = np.asarray(M, dtype=complex)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix entries must be finite")
    # exact power-of-two scaling keeps the determinant clear of under/overflow
    _, e = np.frexp(np.abs(M).max(axis=(-2, -1)))
    M = _ldexp(M, -e[..., None, None])
    tr = M[..., 0, 0] + M[..., 1, 1]
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    half = 0.5 * tr
    disc = np.sqrt(half * half - det)
    sgn = np.where((half.real * disc.real + half.imag * disc.imag) >= 0, 1.0, -1.0)
    big = half + sgn * disc
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big != 0, det / np.where(big != 0, big, 1), half - sgn * disc)
    # keep the "+ root first" convention of the quadratic formula
    first = _ldexp(np.where(sgn > 0, big, small), e)
    second = _ldexp(np.where(sgn > 0, small, big), e)
    if first.ndim == 0:
        return complex(first), complex(second)
    return first, second


@dataclass(frozen=True)
class FrequencyGrid:
    f: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        if f.ndim != 1 or f.size < 1:
            raise ValueError("frequency grid must be a nonempty 1-D array")
        if np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be positive and strictly increasing")
        object.__setattr__(self, "f", f)

    @classmethod
    def log(cls, f_min: float = 0.1, f_max: float = 5000.0, n: int = 2000) -> "FrequencyGrid":
        if f_min < 0.01:
            raise ValueError("f_min below 0.01 Hz")
        return cls(np.logspace(np.log10(f_min), np.log10(f_max), n))

    def __len__(self):
        return self.f.size


@dataclass(frozen=True)
class EigenTrajectory:
    """One continuous eigenvalue branch sampled on a frequency grid."""

    f: np.ndarray
    values: np.ndarray
    branch: int

    def __post_init__(self):
        if np.shape(self.f) != np.shape(self.values):
            raise ValueError("grid and values differ in length")


def track_branches(f, eigs) -> tuple[EigenTrajectory, EigenTrajectory]:
    """Split per-frequency eigenvalue pairs into two continuous branches.

    ``eigs`` has shape (n, 2) in arbitrary per-row order. Between consecutive
    rows the pairing with the smaller summed distance is kept (ties keep the
    input order). Branch 1 starts at the eigenvalue of larger real part at the
    lowest frequency; exact ties fall back to larger imaginary part, then to
    input order.
    """
    f = np.asarray(f, dtype=float)
    e = np.asarray(eigs, dtype=complex)
    if e.ndim != 2 or e.shape[1] != 2 or e.shape[0] != f.size:
        raise ValueError("eigs must have shape (len(f), 2)")
    if f.size < 2:
        raise ValueError("branch tracking needs at least two frequency samples")
    a, b = e[:, 0], e[:, 1]
    keep = np.abs(a[1:] - a[:-1]) + np.abs(b[1:] - b[:-1])
    swap = np.abs(a[1:] - b[:-1]) + np.abs(b[1:] - a[:-1])
    flips = np.concatenate(([False], swap < keep))
    parity = np.cumsum(flips) % 2 == 1
    x0, y0 = a[0], b[0]
    if x0.real != y0.real:
        start_swap = y0.real > x0.real
    elif x0.imag != y0.imag:
        start_swap = y0.imag > x0.imag
    else:
        start_swap = False
    parity ^= start_swap
    b1 = np.where(parity, b, a)
    b2 = np.where(parity, a, b)
    return EigenTrajectory(f, b1, 1), EigenTrajectory(f, b2, 2)


def _arc(z_from: complex, z_to: complex, n_per_rad: float = 16 / np.pi) -> np.ndarray:
    """Points strictly between two mirror-image points on a circle about 0,
    travelling through the positive real axis."""
    r = 0.5 * (abs(z_from) + abs(z_to))
    a0 = np.angle(z_from)
    a1 = np.angle(z_to)
    n = max(int(np.ceil(abs(a1 - a0) * n_per_rad)), 1)
    ang = np.linspace(a0, a1, n + 1)[1:-1]
    return r * np.exp(1j * ang)


def mirror_close(values: np.ndarray) -> np.ndarray:
    """Close a positive-frequency branch into a full Nyquist contour.

    Appends the conjugate branch in reverse (negative frequencies). The gaps at
    both ends are bridged by arcs about the origin through the positive real
    axis: an admittance decays like 1/(sL) at high frequency and is the
    inverse of a passive grid impedance near dc, so neither end crosses the
    negative real axis.
    """
    v = np.asarray(values, dtype=complex)
    hi = _arc(v[-1], np.conj(v[-1]))
    lo = _arc(np.conj(v[0]), v[0])
    return np.concatenate((v, hi, np.conj(v[::-1]), lo))


def winding_number(curve, point: complex = 0.0, tol: float = 1e-9) -> int:
    """Signed number of turns of a closed curve about ``point``.

    ``curve`` is either an :class:`EigenTrajectory` (closed by conjugate
    mirroring) or a sequence of complex samples, implicitly closed from the
    last sample back to the first. Counter-clockwise turns count positive.
    """
    if isinstance(curve, EigenTrajectory):
        z = mirror_close(curve.values)
    else:
        z = np.asarray(curve, dtype=complex)
    z = np.concatenate((z, z[:1])) - point
    seg_a, seg_b = z[:-1], z[1:]
    d = seg_b - seg_a
    L2 = np.abs(d) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.clip(np.where(L2 > 0, -(seg_a.real * d.real + seg_a.imag * d.imag) / L2, 0.0), 0, 1)
    if np.min(np.abs(seg_a + t * d)) < tol:
        raise OnBoundaryError(f"curve passes within {tol:g} of {point}")
    inc = np.angle(seg_b / seg_a)
    if np.max(np.abs(inc)) >= np.pi * (1 - 1e-12):
        raise GridTooCoarseError("segment argument jump reaches pi; refine the grid")
    return int(np.rint(inc.sum() / (2 * np.pi)))


def arg_increments(values: np.ndarray) -> np.ndarray:
    """Argument change about the origin along each segment of a sampled curve."""
    v = np.asarray(values, dtype=complex)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.angle(v[1:] / v[:-1])
