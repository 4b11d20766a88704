"""Configuration file, command-line entry point and artifact persistence.

The configuration is an INI file. Every section and key is optional except
``[grid]`` (when a file is given at all); unknown sections or keys are
rejected. Units are SI throughout (H, ohm, F, rad/s, Hz, s, A, V).

    [grid]          L_g, R_g, V_g
    [system]        power (scale on the rated d-axis currents)
    [inv1] [inv2]   any GflParams field
    [sad]           enabled, plus any SadParams field
    [analysis]      f_min, f_max, points, marginal_band, sigma_thd
    [simulation]    h, duration, record_rate, noise, seed
    [estimation]    dI_qref, t1, t2, cutoff, settle_tol
    [training]      hidden, lr, momentum, patience, max_epochs, plateau, min_lr, seed
    [paths]         out_dir
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import io
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ann, tuner
from .dqcore import FrequencyGrid
from .plants import CASE_INVERTERS, GflParams, GridParams, OperatingPoint, SadParams
from .stability import SystemModel, assess, margin_sweep, sweep_csv

log = logging.getLogger("sadamp")


class ConfigError(ValueError):
    pass


class DomainFailure(RuntimeError):
    """A command ran but its outcome is a negative domain result."""


_ANALYSIS = {"f_min": 0.1, "f_max": 5000.0, "points": 2000, "marginal_band": 0.02,
             "sigma_thd": tuner.SIGMA_THD}
_SIMULATION = {"h": 2e-6, "duration": 1.0, "record_rate": 10e3, "noise": 0.0, "seed": 0}
_ESTIMATION = {"dI_qref": 40.0, "t1": 0.4, "t2": 1.9, "cutoff": 5.0, "settle_tol": 1e-3}
_TRAINING = {**{f.name: f.default for f in fields(ann.Hyper)}, "lr": tuner.SURROGATE_HYPER.lr,
             "seed": 0}
_PATHS = {"out_dir": "out"}
_SYSTEM = {"power": 1.0}


@dataclass
class ProjectConfig:
    grid: GridParams = field(default_factory=lambda: GridParams(R_g=0.2, L_g=4e-3))
    inverters: tuple = CASE_INVERTERS
    sad: SadParams | None = None
    system: dict = field(default_factory=lambda: dict(_SYSTEM))
    analysis: dict = field(default_factory=lambda: dict(_ANALYSIS))
    simulation: dict = field(default_factory=lambda: dict(_SIMULATION))
    estimation: dict = field(default_factory=lambda: dict(_ESTIMATION))
    training: dict = field(default_factory=lambda: dict(_TRAINING))
    paths: dict = field(default_factory=lambda: dict(_PATHS))

    def model(self, power: float | None = None, sad: bool = True) -> SystemModel:
        k = self.system["power"] if power is None else power
        inv = tuple((p, (k * p.I_dref, k * p.I_qref)) for p in self.inverters)
        return SystemModel(inv, self.grid, self.sad if sad else None)

    def freq_grid(self) -> FrequencyGrid:
        a = self.analysis
        return FrequencyGrid.log(a["f_min"], a["f_max"], int(a["points"]))

    def hyper(self) -> ann.Hyper:
        t = self.training
        return ann.Hyper(**{f.name: t[f.name] for f in fields(ann.Hyper)})


def _num(section, key, raw, like):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError
            return low in ("true", "yes", "1", "on")
        if isinstance(like, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _dataclass_section(cp, name, cls, base, extra=()):
    if not cp.has_section(name):
        return base, {}
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    kw, rest = {}, {}
    for key, raw in cp.items(name):
        if key in extra:
            rest[key] = raw
        elif key in known:
            kw[key] = _num(name, key, raw, known[key])
        else:
            raise ConfigError(f"[{name}] {key}: unknown key")
    try:
        return replace(base, **kw), rest
    except ValueError as e:
        raise ConfigError(f"[{name}]: {e}") from None


def _dict_section(cp, name, defaults):
    out = dict(defaults)
    if cp.has_section(name):
        for key, raw in cp.items(name):
            if key not in defaults:
                raise ConfigError(f"[{name}] {key}: unknown key")
            out[key] = raw if isinstance(defaults[key], str) else _num(name, key, raw, defaults[key])
    return out


def parse_config(text: str) -> ProjectConfig:
    """Parse configuration text; raise ConfigError naming the offending field."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                   inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"syntax: {str(e).splitlines()[0]}") from None
    allowed = {"grid", "system", "inv1", "inv2", "sad", "analysis", "simulation", "estimation",
               "training", "paths"}
    for s in cp.sections():
        if s not in allowed:
            raise ConfigError(f"[{s}]: unknown section")
    if not cp.has_section("grid"):
        raise ConfigError("[grid]: section missing (L_g, R_g required)")
    g = cp["grid"]
    for key in ("L_g", "R_g"):
        if key not in g:
            raise ConfigError(f"[grid] {key}: missing")
    for key in g:
        if key not in ("L_g", "R_g", "V_g"):
            raise ConfigError(f"[grid] {key}: unknown key")
    try:
        grid = GridParams(R_g=_num("grid", "R_g", g["R_g"], 0.0), L_g=_num("grid", "L_g", g["L_g"], 0.0),
                          **({"V_g": _num("grid", "V_g", g["V_g"], 0.0)} if "V_g" in g else {}))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"[grid]: {e}") from None
    inv = tuple(_dataclass_section(cp, f"inv{k + 1}", GflParams, p)[0] for k, p in enumerate(CASE_INVERTERS))
    sad, rest = _dataclass_section(cp, "sad", SadParams, SadParams(), extra=("enabled",))
    enabled = _num("sad", "enabled", rest["enabled"], True) if "enabled" in rest else cp.has_section("sad")
    cfg = ProjectConfig(grid=grid, inverters=inv, sad=sad if enabled else None,
                        system=_dict_section(cp, "system", _SYSTEM),
                        analysis=_dict_section(cp, "analysis", _ANALYSIS),
                        simulation=_dict_section(cp, "simulation", _SIMULATION),
                        estimation=_dict_section(cp, "estimation", _ESTIMATION),
                        training=_dict_section(cp, "training", _TRAINING),
                        paths=_dict_section(cp, "paths", _PATHS))
    a = cfg.analysis
    if not 0 < a["f_min"] < a["f_max"] or a["points"] < 16:
        raise ConfigError("[analysis]: need 0 < f_min < f_max and points >= 16")
    return cfg


# persistence ----------------------------------------------------------------

def write_atomic(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def append_report(path: Path, title: str, body: str) -> Path:
    """Append a timestamped block; earlier blocks are kept verbatim."""
    path = Path(path)
    old = path.read_text() if path.exists() else ""
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return write_atomic(path, old + f"## {title} {stamp}\n{body}\n")


def save_model(path, m: ann.MlpModel):
    return write_atomic(path, ann.model_to_text(m))


def load_model(path) -> ann.MlpModel:
    return ann.model_from_text(Path(path).read_text())


_KNOWN_INPUTS = set(tuner.SAD_INPUTS) | set(tuner.ADMITTANCE_INPUTS)


def load_dataset(path, n_inputs: int | None = None) -> ann.Dataset:
    text = Path(path).read_text()
    if n_inputs is None:
        head = next(csv.reader(io.StringIO(text)))
        n_inputs = 0
        while n_inputs < len(head) and head[n_inputs] in _KNOWN_INPUTS:
            n_inputs += 1
        if n_inputs == 0:
            raise ConfigError("dataset: cannot infer the input columns; pass --n-inputs")
    return ann.Dataset.from_csv(text, n_inputs)


def admittance_csv(f, Y) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["f_hz"] + list(tuner.ADMITTANCE_TARGETS))
    for fk, row in zip(f, tuner._targets(np.asarray(Y))):
        w.writerow([repr(float(fk))] + [repr(float(v)) for v in row])
    return buf.getvalue()


# commands ---------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _event(text: str):
    from .simtime import Event
    parts = [p.strip() for p in text.split(",")]
    if len(parts) < 3:
        raise ConfigError(f"event {text!r}: expected t,action,device[,value[,ramp[,value_q]]]")
    nums = _floats(",".join(parts[3:])) if len(parts) > 3 else []
    return Event(float(parts[0]), parts[1], parts[2], *nums)


def _scenario(cfg: ProjectConfig, events=(), duration=None, sad=True, power=None):
    from .simtime import Scenario
    s = cfg.simulation
    return Scenario(cfg.model(power, sad), tuple(events), duration or s["duration"], s["h"],
                    s["record_rate"], s["noise"])


def cmd_analyze(cfg, args, out):
    rep = assess(cfg.model(args.power, not args.no_sad), cfg.freq_grid(), cfg.analysis["marginal_band"])
    append_report(out / "analysis_report.txt", "analyze", rep.to_text())
    write_atomic(out / "trajectories.csv", rep.trajectories_csv())
    print(rep.to_text(), end="")
    return 0


def cmd_sweep(cfg, args, out):
    rows = margin_sweep(cfg.model(sad=not args.no_sad), args.axis, _floats(args.values), cfg.freq_grid())
    text = sweep_csv(rows)
    write_atomic(out / f"sweep_{args.axis}.csv", text)
    print(text, end="")
    return 0


def cmd_estimate(cfg, args, out):
    from .zest import CSV_HEADER, EstimationConfig, EstimationError, InsufficientExcitationError, run_estimation
    if cfg.sad is None:
        raise ConfigError("[sad]: estimation needs the damper enabled")
    e = cfg.estimation
    ec = EstimationConfig(e["dI_qref"], e["t1"], e["t2"], e["cutoff"], e["settle_tol"])
    sc = _scenario(cfg, [_event(x) for x in args.event or []], duration=e["t2"] + 0.1)
    try:
        res = run_estimation(sc, ec, args.seed if args.seed is not None else cfg.simulation["seed"])
    except (EstimationError, InsufficientExcitationError) as exc:
        raise DomainFailure(f"estimation: {exc}") from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerow(res.csv_row(cfg.grid.R_g, cfg.grid.L_g))
    write_atomic(out / "estimate.csv", buf.getvalue())
    append_report(out / "estimate_report.txt", "estimate-z", res.to_text())
    print(res.to_text(), end="")
    return 0


def cmd_scan(cfg, args, out):
    from .simtime import ScanError, scan_admittance
    freqs = np.geomspace(args.scan_min, args.scan_max, args.scan_points)
    m = cfg.model(args.power)
    V = m.pcc_voltage
    if args.device in ("inv1", "inv2"):
        k = int(args.device[-1]) - 1
        dut = cfg.inverters[k]
        op = OperatingPoint(V, (m.inverters[k][1],), cfg.grid.R_g, cfg.grid.L_g)
    elif args.device == "sad":
        dut = cfg.sad or SadParams()
        op = OperatingPoint(V, ((0.0, 0.0),), cfg.grid.R_g, cfg.grid.L_g)
    else:
        dut = cfg.grid
        op = OperatingPoint(V, ((0.0, 0.0),), cfg.grid.R_g, cfg.grid.L_g)
    try:
        res = scan_admittance(dut, op, freqs)
    except ScanError as exc:
        raise DomainFailure(f"scan: {exc}") from None
    text = admittance_csv(res.f, res.Y)
    write_atomic(out / f"scan_{args.device}.csv", text)
    print(text, end="")
    return 0


def cmd_dataset(cfg, args, out):
    seed = args.seed if args.seed is not None else cfg.training["seed"]
    if args.kind == "sad":
        try:
            r = tuner.generate_sad_dataset(tuner.OperatingGrid(), cfg.analysis["sigma_thd"], seed,
                                           base=cfg.sad or SadParams())
        except tuner.InfeasibleDesignError as exc:
            raise DomainFailure(f"dataset: {exc}") from None
        ds = r.dataset
        print(f"rows={len(ds)} infeasible={len(r.infeasible)}")
    else:
        k = int(args.inverter[-1]) - 1
        freqs = np.geomspace(args.scan_min, args.scan_max, args.scan_points)
        ds = tuner.generate_admittance_dataset(cfg.inverters[k], tuner.default_admittance_ops(cfg.inverters[k]),
                                               freqs, args.mode, seed)
        print(f"rows={len(ds)}")
    write_atomic(out / f"dataset_{args.kind}.csv", ds.to_csv())
    return 0


def cmd_train(cfg, args, out):
    ds = load_dataset(args.dataset, args.n_inputs)
    seed = args.seed if args.seed is not None else cfg.training["seed"]
    try:
        model, metrics = ann.train(ds, cfg.hyper(), seed)
    except ann.TrainingError as exc:
        raise DomainFailure(f"train: {exc}") from None
    path = Path(args.model) if args.model else out / (Path(args.dataset).stem + ".model")
    save_model(path, model)
    lines = [f"{k} = {v!r}" if np.isscalar(v) else f"{k} = {' '.join(f'{x:.6g}' for x in v)}"
             for k, v in metrics.items()]
    append_report(out / "train_report.txt", f"train {path.name}", "\n".join(lines))
    print("\n".join(lines))
    return 0


def cmd_tune(cfg, args, out):
    try:
        d = tuner.design_sad(cfg.model(args.power, sad=False), cfg.analysis["sigma_thd"],
                             cfg.sad or SadParams(), grid=cfg.freq_grid())
    except tuner.InfeasibleDesignError as exc:
        raise DomainFailure(f"tune: {exc}") from None
    text = (f"omega_c = {d.omega_c!r}\nH_v = {d.H_v!r}\nmargin = {d.margin!r}\n"
            f"f_cr = {d.f_cr!r}\nidle = {int(d.idle)}\n")
    append_report(out / "tune_report.txt", "tune", text)
    print(text, end="")
    return 0


def cmd_simulate(cfg, args, out):
    from .simtime import simulate
    sc = _scenario(cfg, [_event(x) for x in args.event or []], args.duration, power=args.power)
    rec = simulate(sc, args.seed if args.seed is not None else cfg.simulation["seed"])
    write_atomic(out / "waveform.csv", rec.to_csv())
    print(f"samples={len(rec)} divergent={int(rec.divergent)} saturations={rec.saturation_count()}")
    return 1 if rec.divergent else 0


def cmd_adapt(cfg, args, out):
    from .simtime import Event
    from .zest import EstimationConfig
    if cfg.sad is None:
        raise ConfigError("[sad]: the adaptive loop needs the damper enabled")
    e = cfg.estimation
    ec = EstimationConfig(e["dI_qref"], e["t1"], e["t2"], e["cutoff"], e["settle_tol"])
    events = [_event(x) for x in args.event or []]
    if args.ramp:
        t0, k0, k1, dur = _floats(args.ramp)
        cfg.system["power"] = k0
        events += [Event(t0, "id_ref", f"inv{n + 1}", k1 * p.I_dref, dur) for n, p in enumerate(cfg.inverters)]
    sc = _scenario(cfg, sorted(events, key=lambda x: x.t), args.duration)
    surrogate = load_model(args.sad_model) if args.sad_model else None
    rep = tuner.adapt(sc, surrogate, cfg.analysis["sigma_thd"], est_cfg=ec,
                      seed=args.seed if args.seed is not None else cfg.simulation["seed"])
    append_report(out / "adapt_report.txt", "adapt", rep.to_text())
    write_atomic(out / "adapt_steps.csv", rep.steps_csv())
    print(rep.to_text(), end="")
    return 1 if rep.verdict == "unstable" else 0


COMMANDS = {"analyze": cmd_analyze, "sweep": cmd_sweep, "estimate-z": cmd_estimate, "scan": cmd_scan,
            "dataset": cmd_dataset, "train": cmd_train, "tune": cmd_tune, "simulate": cmd_simulate,
            "adapt": cmd_adapt}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sadamp", description="Stability analysis and adaptive active damping")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="seed for every stochastic step")
    p.add_argument("--out-dir", help="directory for reports and CSV files")
    p.add_argument("--sigma-thd", type=float, help="required stability margin")
    p.add_argument("--freq-min", type=float)
    p.add_argument("--freq-max", type=float)
    p.add_argument("--freq-points", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze")
    a.add_argument("--power", type=float)
    a.add_argument("--no-sad", action="store_true")
    a = sub.add_parser("sweep")
    a.add_argument("--axis", choices=("power", "impedance"), default="power")
    a.add_argument("--values", default="0.5,0.6,0.7,0.8,0.9,1.0")
    a.add_argument("--no-sad", action="store_true")
    a = sub.add_parser("estimate-z")
    a.add_argument("--event", action="append", help="t,action,device[,value[,ramp]]")
    for name in ("scan", "dataset"):
        a = sub.add_parser(name)
        a.add_argument("--scan-min", type=float, default=10.0)
        a.add_argument("--scan-max", type=float, default=1000.0)
        a.add_argument("--scan-points", type=int, default=20)
        if name == "scan":
            a.add_argument("--device", choices=("inv1", "inv2", "sad", "grid"), default="inv1")
            a.add_argument("--power", type=float)
        else:
            a.add_argument("--kind", choices=("sad", "admittance"), default="sad")
            a.add_argument("--mode", choices=("analytic", "measured"), default="analytic")
            a.add_argument("--inverter", choices=("inv1", "inv2"), default="inv1")
    a = sub.add_parser("train")
    a.add_argument("--dataset", required=True)
    a.add_argument("--n-inputs", type=int)
    a.add_argument("--model", help="output model path")
    a = sub.add_parser("tune")
    a.add_argument("--power", type=float)
    a = sub.add_parser("simulate")
    a.add_argument("--duration", type=float)
    a.add_argument("--power", type=float)
    a.add_argument("--event", action="append", help="t,action,device[,value[,ramp[,value_q]]]")
    a = sub.add_parser("adapt")
    a.add_argument("--sad-model", help="trained damper-parameter model")
    a.add_argument("--ramp", help="t0,from_pu,to_pu,duration")
    a.add_argument("--duration", type=float)
    a.add_argument("--event", action="append")
    return p


def cli(argv=None) -> int:
    """Run one command; returns 0 on success, 1 on a negative domain result,
    2 on usage or configuration errors. Diagnostics go to stderr as one line."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.config:
            try:
                text = Path(args.config).read_text()
            except OSError as e:
                raise ConfigError(f"cannot read {args.config}: {e.strerror}") from None
            cfg = parse_config(text)
        else:
            cfg = ProjectConfig()
        if args.sigma_thd is not None:
            cfg.analysis["sigma_thd"] = args.sigma_thd
        for flag, key in (("freq_min", "f_min"), ("freq_max", "f_max"), ("freq_points", "points")):
            if getattr(args, flag) is not None:
                cfg.analysis[key] = getattr(args, flag)
        if args.seed is not None:
            cfg.simulation["seed"] = cfg.training["seed"] = args.seed
        out = Path(args.out_dir or cfg.paths["out_dir"])
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except DomainFailure as e:
        print(f"error: domain: {e}", file=sys.stderr)
        return 1
    except (ValueError, ann.ModelFormatError) as e:
        print(f"error: input: {e}", file=sys.stderr)
        return 2


def main():  # pragma: no cover
    sys.exit(cli())
