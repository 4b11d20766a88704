"""Scenario description, waveform records and the resumable simulation driver."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import bilinear

from ..plants import GridParams, SadParams, damping_filter, lac, pcc_voltage
from ..stability import SystemModel
from . import kernel as K

ACTIONS = ("id_ref", "iq_ref", "damping", "grid_kick")
DEVICE_CHANNELS = ("id_A", "iq_A", "dtheta_rad", "domega_rad_s", "vdc_V", "nsat")
BASE_CHANNELS = ("t_s", "vd_V", "vq_V", "igd_A", "igq_A")
RATED_CURRENT = 100.0


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    """Time-stamped change of a reference or of the damping path.

    ``id_ref``/``iq_ref`` move a device reference to ``value`` (linearly over
    ``ramp`` seconds when positive), ``damping`` switches the damper's voltage
    feedback (value 0 or 1) and ``grid_kick`` adds (``value``, ``value_q``)
    volts to the grid source for ``ramp`` seconds.
    """

    t: float
    action: str
    device: str = ""
    value: float = 0.0
    ramp: float = 0.0
    value_q: float = 0.0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ScenarioError(f"unknown event action {self.action!r}")
        if self.t < 0 or self.ramp < 0:
            raise ScenarioError("event time and ramp must be non-negative")
        if self.action == "grid_kick" and self.ramp <= 0:
            raise ScenarioError("grid_kick needs a positive duration in ramp")


def device_ids(model: SystemModel) -> tuple[str, ...]:
    ids = tuple(f"inv{k + 1}" for k in range(len(model.inverters)))
    return ids + (("sad",) if model.sad is not None else ())


@dataclass(frozen=True)
class Scenario:
    model: SystemModel
    events: tuple[Event, ...] = ()
    duration: float = 1.0
    h: float = 2e-6
    record_rate: float = 10e3
    noise: float = 0.0
    saturation: bool = True
    sad_freeze_pll: bool = False
    sad_freeze_vdc: bool = False

    def __post_init__(self):
        ev = tuple(self.events)
        object.__setattr__(self, "events", ev)
        if any(b.t < a.t for a, b in zip(ev, ev[1:])):
            raise ScenarioError("events must be time-ordered")
        fs = [p.f_s for p, _ in self.model.inverters]
        if self.model.sad is not None:
            fs.append(self.model.sad.f_s)
        if self.h <= 0 or self.h > 1.0 / (10 * max(fs)) * (1 + 1e-12):
            raise ScenarioError("plant step h must satisfy h <= 1/(10 max f_s)")
        for f in fs:
            n = 1.0 / (f * self.h)
            if abs(n - round(n)) > 1e-6:
                raise ScenarioError("controller periods must be integer multiples of h")
        if ev and not self.duration > max(e.t for e in ev):
            raise ScenarioError("duration must exceed the last event time")
        if self.duration <= 0 or self.record_rate <= 0:
            raise ScenarioError("duration and record rate must be positive")
        ids = device_ids(self.model)
        for e in ev:
            if e.action == "grid_kick":
                continue
            if e.device not in ids:
                raise ScenarioError(f"event refers to unknown device {e.device!r}")
            if e.action == "damping" and e.device != "sad":
                raise ScenarioError("only the damper has a damping path")
            if e.action == "id_ref" and e.device == "sad":
                raise ScenarioError("the damper's d-axis current follows its dc-link loop")


@dataclass(frozen=True)
class WaveRecord:
    """Uniformly sampled channels; ``data`` columns follow ``names``."""

    names: tuple[str, ...]
    data: np.ndarray
    sample_rate: float
    divergent: bool = False

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim != 2 or d.shape[1] != len(self.names):
            raise ValueError("data columns must match channel names")
        if not np.all(np.isfinite(d)):
            raise ValueError("waveform contains non-finite samples")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def from_channels(cls, sample_rate: float, divergent: bool = False, **channels) -> "WaveRecord":
        names = tuple(channels)
        data = np.column_stack([np.asarray(channels[n], dtype=float) for n in names])
        return cls(names, data, sample_rate, divergent)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[:, self.names.index(name)]

    @property
    def t(self) -> np.ndarray:
        return self["t_s"]

    def __len__(self):
        return self.data.shape[0]

    def saturation_count(self) -> int:
        cols = [i for i, n in enumerate(self.names) if n.startswith("nsat_")]
        return int(sum(self.data[-1, i] for i in cols)) if len(self) else 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# sample_rate_hz={self.sample_rate!r} divergent={int(self.divergent)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.names)
        for row in self.data:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "WaveRecord":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("missing waveform preamble")
        meta = dict(kv.split("=") for kv in lines[0][1:].split())
        rows = list(csv.reader(lines[1:]))
        data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(rows[0]))
        return cls(tuple(rows[0]), data, float(meta["sample_rate_hz"]), meta.get("divergent") == "1")


def _tustin(tf, fs):
    b, a = bilinear(tf.num[::-1], tf.den[::-1], fs)
    b = np.concatenate((b, np.zeros(max(0, len(a) - len(b)))))
    return b / a[0], a / a[0]


def sad_steady_current(sp: SadParams, V: float, I_q: float = 0.0) -> float:
    """d-axis current that covers the damper's filter losses at PCC voltage V."""
    if sp.R_f == 0:
        return 0.0
    disc = V * V - 4 * sp.R_f**2 * I_q**2
    return (-V + math.sqrt(disc)) / (2 * sp.R_f)


class _Schedule:
    def __init__(self):
        self.t: list[float] = []
        self.v: list[float] = []
        self.slices: dict = {}

    def add(self, key, pts):
        lo = len(self.t)
        for t, v in pts:
            self.t.append(t)
            self.v.append(v)
        self.slices[key] = (lo, len(self.t))


def _piecewise(v0: float, changes) -> list[tuple[float, float]]:
    """Breakpoints of a channel starting at v0 and moving per (t, value, ramp)."""
    pts = [(0.0, v0)]
    cur = v0
    for t, v, r in changes:
        if t <= 0:
            pts = [(0.0, v)]
            cur = v
            continue
        t0 = max(t, pts[-1][0] + 1e-12)
        pts.append((t0, cur))
        pts.append((t0 + max(r, 1e-9), v))
        cur = v
    return pts


def _pulse_pts(kicks, q: bool) -> list[tuple[float, float]]:
    pts = [(0.0, 0.0)]
    for e in kicks:
        amp = e.value_q if q else e.value
        t0 = max(e.t, pts[-1][0] + 1e-12)
        pts += [(t0, 0.0), (t0 + 1e-9, amp), (t0 + e.ramp, amp), (t0 + e.ramp + 1e-9, 0.0)]
    return pts


class Simulation:
    """Stepping state of one scenario; advance in segments and read the record.

    The state starts at the exact steady operating point of the scenario's
    model. :meth:`retune_sad` changes the damper's filter and gain between
    segments while keeping all internal states.
    """

    def __init__(self, sc: Scenario, seed: int = 0, *, _source=None):
        self.sc = sc
        self.seed = int(seed)
        self._segment = 0
        self._k = 0
        self.divergent = False
        self._source = _source
        if _source is not None and _source.get("devices") is not None:
            self.ids = tuple(_source["ids"])
        else:
            self.ids = device_ids(sc.model)
        self._build()
        self._rows: list[np.ndarray] = []
        self.rec_every = max(1, int(round(1.0 / (sc.record_rate * sc.h))))

    # construction ---------------------------------------------------------
    def _build(self):
        sc, m = self.sc, self.sc.model
        n = len(self.ids)
        src = self._source
        if src is None:
            grid = m.grid
        else:
            grid = src["grid"] or GridParams(R_g=1.0, L_g=1e-3)
        w0 = grid.omega0
        if src is not None and src.get("devices") is not None:
            inverters, sad_p = src["devices"], None
        else:
            inverters, sad_p = list(m.inverters), m.sad
        I_g = sum(complex(*c) for _, c in inverters)
        i_sad = 0.0
        for _ in range(50):
            V = src["V"] if src is not None else pcc_voltage(grid, I_g + i_sad)
            if sad_p is None:
                break
            new = sad_steady_current(sad_p, V)
            if abs(new - i_sad) < 1e-13:
                break
            i_sad = new
        if src is None:
            z = complex(grid.R_g, w0 * grid.L_g)
            phi = -np.angle(V - z * (I_g + i_sad))
        else:
            phi = 0.0
        self.V_pcc = V
        self.phi = phi
        rot = np.exp(1j * phi)

        dp = np.zeros((n, K.NP))
        ds = np.zeros((n, K.NS))
        x = np.zeros(3 * n + 2)
        xlim = np.zeros_like(x)
        curr = [c for _, c in inverters]
        devs = [p for p, _ in inverters]
        if sad_p is not None:
            curr.append((i_sad, 0.0))
            devs.append(sad_p)
        rated = max([RATED_CURRENT] + [abs(complex(*c)) for c in curr])
        for k, (p, (i_d, i_q)) in enumerate(zip(devs, curr)):
            sad = isinstance(p, SadParams)
            fs = p.f_s
            L, R = (p.L_f, p.R_f) if sad else (p.L, p.R_L)
            dp[k, K.P_KIND] = 1.0 if sad else 0.0
            dp[k, K.P_L] = L
            dp[k, K.P_R] = R
            dp[k, K.P_KP] = p.k_cp if sad else p.k_pi
            dp[k, K.P_KI] = p.k_ci if sad else p.k_ii
            dp[k, K.P_KPLL] = p.k_pPLL
            dp[k, K.P_KIPLL] = p.k_iPLL
            dp[k, K.P_NSUB] = round(1.0 / (fs * sc.h))
            dp[k, K.P_VDC] = p.V_dc
            dp[k, K.P_TS] = 1.0 / fs
            dp[k, K.P_SAT] = 1.0 if sc.saturation else 0.0
            if src is not None and src.get("freeze_pll"):
                dp[k, K.P_FREEZE_PLL] = 1.0
            if sad:
                dp[k, K.P_CDC] = p.C_dc
                dp[k, K.P_KVP] = p.k_vp
                dp[k, K.P_KVI] = p.k_vi
                dp[k, K.P_FREEZE_PLL] = 1.0 if (sc.sad_freeze_pll or dp[k, K.P_FREEZE_PLL]) else 0.0
                dp[k, K.P_FREEZE_VDC] = 1.0 if sc.sad_freeze_vdc else 0.0
                dp[k, K.P_DEC] = w0 * L
                self._set_filter(dp[k], p)
            ic = complex(i_d, i_q)
            vm_c = self.V_pcc + complex(R, w0 * L) * ic
            vm_s = vm_c * rot
            i_s = ic * rot
            x[2 * k], x[2 * k + 1] = i_s.real, i_s.imag
            x[2 * n + k] = p.V_dc if sad else 0.0
            xlim[2 * k] = xlim[2 * k + 1] = 100 * rated
            xlim[2 * n + k] = 100 * p.V_dc
            dec = dp[k, K.P_DEC]
            ds[k, K.S_XD] = vm_c.real + dec * ic.imag
            ds[k, K.S_XQ] = vm_c.imag - dec * ic.real
            ds[k, K.S_DELTA] = phi
            ds[k, K.S_PD] = ds[k, K.S_AD] = vm_s.real
            ds[k, K.S_PQ] = ds[k, K.S_AQ] = vm_s.imag
            if sad:
                ds[k, K.S_XV] = -i_d
                ds[k, K.S_IDFZ] = i_d
                # band-pass steady state for the constant d-axis input
                b, a = dp[k, K.P_BB0:K.P_BB2 + 1], np.r_[1.0, dp[k, K.P_BA1:K.P_BA2 + 1]]
                u = self.V_pcc
                y = u * b.sum() / a.sum()
                ds[k, K.S_F2D] = b[2] * u - a[2] * y
                ds[k, K.S_F1D] = b[1] * u - a[1] * y + ds[k, K.S_F2D]
                lu = y
                lb0, lb1, la1 = dp[k, K.P_LB0], dp[k, K.P_LB1], dp[k, K.P_LA1]
                ly = lu * (lb0 + lb1) / (1 + la1)
                ds[k, K.S_LD] = lb1 * lu - la1 * ly
        if src is not None and src.get("branch"):
            ib = (V - complex(src["V_far"], 0.0)) / complex(grid.R_g, w0 * grid.L_g) if grid.L_g > 0 else 0
            x[3 * n], x[3 * n + 1] = complex(ib).real, complex(ib).imag
        xlim[3 * n] = xlim[3 * n + 1] = 100 * rated

        g = np.zeros(K.NG)
        g[K.G_RG], g[K.G_LG], g[K.G_W0] = grid.R_g, grid.L_g, w0
        if src is None:
            g[K.G_VGD] = grid.V_g
        else:
            g[K.G_MODE] = 1.0
            g[K.G_BRANCH] = 1.0 if src.get("branch") else 0.0
            g[K.G_VGD] = src.get("V_far", 0.0)
            g[K.G_VSD] = V
        pert = np.zeros(K.NPERT)
        if src is not None and src.get("pert") is not None:
            pert[:] = src["pert"]

        self.dp, self.ds, self.x, self.xlim, self.g, self.pert = dp, ds, x, xlim, g, pert
        self._init_refs = [(c[0], c[1]) for c in curr]
        self.events = list(sc.events)
        self._build_schedule()

    def _build_schedule(self):
        sched = _Schedule()
        for k, dev in enumerate(self.ids):
            ch = {a: [] for a in ("id_ref", "iq_ref", "damping")}
            for e in self.events:
                if e.device == dev and e.action in ch:
                    ch[e.action].append((e.t, e.value, e.ramp))
            i_d, i_q = self._init_refs[k]
            sched.add((k, K.CH_IDREF), _piecewise(i_d, ch["id_ref"]))
            sched.add((k, K.CH_IQREF), _piecewise(i_q, ch["iq_ref"]))
            sched.add((k, K.CH_DAMP), _piecewise(1.0, [(t, v, 0.0) for t, v, _ in ch["damping"]]))
        kicks = [e for e in self.events if e.action == "grid_kick"]
        sched.add(("g", 0), _pulse_pts(kicks, False))
        sched.add(("g", 1), _pulse_pts(kicks, True))
        self.st = np.array(sched.t)
        self.sv = np.array(sched.v)
        self.dsl = np.zeros((len(self.ids), K.NCH, 2), dtype=np.int64)
        for (k, c), (lo, hi) in sched.slices.items():
            if k != "g":
                self.dsl[k, c] = (lo, hi)
        self.gsl = np.array([sched.slices[("g", 0)], sched.slices[("g", 1)]], dtype=np.int64)

    def add_event(self, e: Event):
        """Insert an event (at or after the current time) in time order."""
        if e.t < self.t - 1e-12:
            raise ScenarioError("cannot schedule an event in the past")
        if e.action != "grid_kick" and e.device not in self.ids:
            raise ScenarioError(f"event refers to unknown device {e.device!r}")
        pos = sum(1 for x in self.events if x.t <= e.t)
        self.events.insert(pos, e)
        self._build_schedule()

    @staticmethod
    def _set_filter(row, sp: SadParams):
        bp = damping_filter(sp, use_lac=False)
        bb, ba = _tustin(bp, sp.f_s)
        lb, la = _tustin(sp.beta * lac(sp.beta, sp.tau), sp.f_s)
        row[K.P_BB0:K.P_BB2 + 1] = bb[:3]
        row[K.P_BA1], row[K.P_BA2] = ba[1], ba[2]
        row[K.P_LB0], row[K.P_LB1] = lb[0], lb[1]
        row[K.P_LA1] = la[1]
        row[K.P_HV] = sp.H_v

    # stepping -------------------------------------------------------------
    @property
    def t(self) -> float:
        return self._k * self.sc.h

    def retune_sad(self, sp: SadParams):
        if "sad" not in self.ids:
            raise ScenarioError("scenario has no damper")
        self._set_filter(self.dp[self.ids.index("sad")], sp)

    def advance(self, t_end: float) -> bool:
        """Step until ``t_end`` (or divergence). Returns False once divergent."""
        if self.divergent:
            return False
        n = int(round(t_end / self.sc.h)) - self._k
        if n <= 0:
            return True
        nrec = n // self.rec_every + 2
        rec = np.zeros((nrec, len(BASE_CHANNELS) + len(DEVICE_CHANNELS) * len(self.ids)))
        seed = self.seed * 1000 + self._segment if self.sc.noise > 0 else -1
        rows, div, steps = K.run(self._k, n, self.sc.h, self.x, self.dp, self.ds, self.g,
                                 self.pert, self.gsl, self.dsl, self.st, self.sv,
                                 self.rec_every, rec, self.sc.noise, seed, self.xlim)
        self._segment += 1
        self._k += steps
        self._rows.append(rec[:rows])
        if div:
            self.divergent = True
        return not self.divergent

    def run(self) -> "WaveRecord":
        self.advance(self.sc.duration)
        return self.record()

    def record(self) -> WaveRecord:
        names = list(BASE_CHANNELS)
        for d in self.ids:
            names += [f"{c}_{d}" for c in DEVICE_CHANNELS]
        data = np.concatenate(self._rows) if self._rows else np.zeros((0, len(names)))
        ok = np.all(np.isfinite(data), axis=1)
        if not ok.all():
            data = data[: np.argmin(ok)]
        return WaveRecord(tuple(names), data, 1.0 / (self.rec_every * self.sc.h), self.divergent)


def simulate(sc: Scenario, seed: int = 0) -> WaveRecord:
    """Run a scenario to its duration (or divergence) and return the record."""
    return Simulation(sc, seed).run()
