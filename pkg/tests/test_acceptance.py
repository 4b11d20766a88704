"""End-to-end acceptance checks. Each prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from sadamp import ann
from sadamp.dqcore import FrequencyGrid, eval_rational, pade_delay
from sadamp.plants import (
    CASE_INVERTERS,
    SadParams,
    gfl_admittance,
    lac_char,
    sad_admittance_matrix,
    sbpf,
)
from sadamp.simtime import (
    Event,
    Scenario,
    Simulation,
    WaveRecord,
    detect_instability,
    scan_admittance,
    simulate,
)
from sadamp.stability import assess, case_system, margin_sweep, shift_identity_error
from sadamp.tuner import (
    MarginProbe,
    case_model,
    default_admittance_ops,
    design_sad,
    generate_admittance_dataset,
    generate_sad_dataset,
    predict_design,
    train_surrogate,
)
from sadamp.zest import EstimationConfig, run_estimation, solve_rg_lg

REFERENCE_SAD = SadParams().tuned(1005.31, 1.8)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok
    return emit


@pytest.fixture(scope="session")
def sad_dataset():
    t0 = time.time()
    res = generate_sad_dataset()
    return res, time.time() - t0


def test_impedance_solve_regression(report):
    R, L, _ = solve_rg_lg(-37.86, 5.20, -0.85, 40.90)
    ok = abs(L - 2.937e-3) <= 0.005 * 2.937e-3 and abs(R - 0.146) <= 0.005 * 0.146
    assert report("impedance solve", ok, f"L_g={L * 1e3:.4f} mH R_g={R:.4f} ohm")


@pytest.mark.parametrize("L_g, R_g, concurrent, tol", [
    (3e-3, 0.15, False, 3.0),
    (4e-3, 0.2, False, 3.0),
    (3e-3, 0.15, True, 4.0),
])
def test_end_to_end_estimation(report, L_g, R_g, concurrent, tol):
    events = ()
    if concurrent:
        # both inverters ramp from half to three-quarter power during the window
        events = (Event(0.6, "id_ref", "inv1", 37.5, 0.5), Event(0.6, "id_ref", "inv2", 45.0, 0.5))
    sc = Scenario(case_system(L_g, R_g, power=0.5, sad=REFERENCE_SAD), events, duration=2.0,
                  record_rate=5e3)
    t0 = time.time()
    res = run_estimation(sc, EstimationConfig(dI_qref=40.0))
    el = time.time() - t0
    er, elr = res.errors(R_g, L_g)
    ok = er <= tol and elr <= tol and el < 60
    assert report(f"estimation L_g={L_g * 1e3:g} mH concurrent={concurrent}", ok,
                  f"R_g err {er:.3f}% L_g err {elr:.3f}% (limit {tol}%) in {el:.1f} s")


def test_filter_constants(report):
    phi = lac_char(20.0, 2.5 / 1005.31)[3]
    unity = abs(sbpf(1005.31, 200.0)(1j * 1005.31) - 1)
    f = FrequencyGrid.log().f
    allpass = np.max(np.abs(np.abs(eval_rational(pade_delay(1.5 / CASE_INVERTERS[0].f_s), f)) - 1))
    ok = abs(phi - 64.79) <= 0.05 and unity <= 1e-12 and allpass <= 1e-9
    assert report("filter constants", ok,
                  f"phi_m={phi:.4f} deg, |SBPF(w_c)-1|={unity:.1e}, max||G_d|-1|={allpass:.1e}")


def test_damper_shifts_eigenvalues(report):
    err = shift_identity_error(case_system(sad=REFERENCE_SAD), FrequencyGrid.log().f)
    assert report("eigenvalue shift", err <= 1e-9, f"max deviation {err:.2e}")


def _time_domain(model, t_max=3.0):
    sc = Scenario(model, (Event(0.02, "grid_kick", value=1.0, ramp=1e-3),), duration=t_max,
                  record_rate=5e3)
    sim = Simulation(sc)
    t = 0.4
    while True:
        sim.advance(t)
        v = detect_instability(sim.record(), 0.05)
        if v.verdict != "inconclusive" or t >= t_max:
            return v
        t = min(t_max, 1.6 * t)


def test_frequency_and_time_domain_verdicts_agree(report):
    t0 = time.time()
    checked, mismatches, marginal = 0, [], 0
    for power in (0.5, 0.75, 1.0):
        for L_g, R_g in ((2e-3, 0.1), (3e-3, 0.15), (4e-3, 0.2)):
            base = case_system(L_g, R_g, power=power)
            tuned = design_sad(base).apply()
            for label, sad in (("off", None), ("tuned", tuned), ("weak", REFERENCE_SAD.tuned(1005.31, 0.6))):
                m = base.with_sad(sad)
                r = assess(m)
                if abs(r.margin) < 0.02:
                    marginal += 1
                    continue
                checked += 1
                v = _time_domain(m)
                if v.verdict != r.verdict:
                    mismatches.append((power, L_g, label, r.verdict, v.verdict))
    el = time.time() - t0
    ok = not mismatches and el < 15 * 60
    assert report("verdict agreement", ok,
                  f"{checked - len(mismatches)}/{checked} non-marginal scenarios agree, "
                  f"{marginal} marginal skipped, {el:.0f} s, mismatches {mismatches}")


def _scan_error(S, A):
    # each entry's gap against the largest analytic entry at that frequency
    return float(np.max(np.abs(S - A) / np.abs(A).max(axis=(-1, -2), keepdims=True)))


def test_scanned_admittances_match_models(report):
    t0 = time.time()
    f = np.logspace(1, 3, 20)
    model = case_system()
    op = model.operating_point()
    errs = {}
    for k, inv in enumerate(CASE_INVERTERS):
        sub = type(op)(op.V_d0, (op.currents[k],), op.R_g, op.L_g)
        errs[f"inv{k + 1}"] = _scan_error(scan_admittance(inv, sub, f).Y, gfl_admittance(inv, sub, f))
    errs["sad"] = _scan_error(scan_admittance(REFERENCE_SAD, op, f).Y, sad_admittance_matrix(REFERENCE_SAD, f))
    el = time.time() - t0
    ok = max(errs.values()) <= 0.05 and el < 10 * 60
    detail = ", ".join(f"{k} {100 * v:.2f}%" for k, v in errs.items())
    assert report("scan vs analytic", ok, f"{detail} in {el:.0f} s")


def test_tuner_guarantee(report, sad_dataset):
    res, el_data = sad_dataset
    t0 = time.time()
    n_total = len(res.designs) + len(res.infeasible)
    low = []
    for (pt, d) in res.designs:
        r = assess(case_model(*pt, sad=d.apply() if not d.idle else None))
        if r.margin < 0.1:
            low.append((pt, r.margin))
    rng = np.random.default_rng(11)
    active = [x for x in res.designs if not x[1].idle]
    picks = [active[i] for i in rng.choice(len(active), 5, replace=False)]
    td = [_time_domain(case_model(*pt, sad=d.apply())).verdict for pt, d in picks]
    el = el_data + time.time() - t0
    ok = (not low and len(res.infeasible) <= 0.1 * n_total and all(v == "stable" for v in td)
          and el < 30 * 60)
    assert report("tuner guarantee", ok,
                  f"{len(res.designs)} feasible, {len(res.infeasible)}/{n_total} infeasible, "
                  f"below 0.1: {low}, time-domain {td}, {el:.0f} s")


def test_surrogates(report, sad_dataset):
    f = np.logspace(1, 3, 20)
    inv = CASE_INVERTERS[0]
    ds = generate_admittance_dataset(inv, default_admittance_ops(inv), f)
    adm, met = train_surrogate(ds)
    r2 = met["r2_test"]

    res, _ = sad_dataset
    sad_model, _ = train_surrogate(res.dataset)
    rng = np.random.default_rng(20)
    margins = []
    for _ in range(20):
        i1, i2, L = rng.uniform(2.0, 48.0), rng.uniform(2.0, 58.0), rng.uniform(1.7e-3, 5.3e-3)
        wc, hv, extra = predict_design(sad_model, i1, i2, L)
        assert not extra
        margins.append(assess(case_model(i1, i2, L, 50 * L, SadParams().tuned(wc, hv))).margin)

    x = ds.X[0]
    y = ds.Y[0]
    gc = max(ann.gradient_check(adm, x, y), ann.gradient_check(sad_model, res.dataset.X[7], res.dataset.Y[7]))
    ok = np.all(r2 >= 0.99) and min(margins) >= 0.08 and gc < 1e-6
    assert report("surrogates", ok,
                  f"admittance test R2 min {np.min(r2):.5f}, interior margin min {min(margins):.4f}, "
                  f"gradient check {gc:.1e}")


def test_qualitative_behaviour(report):
    undamped = assess(case_system())
    damped = assess(case_system(sad=design_sad(case_system()).apply()))

    events = (Event(0.05, "id_ref", "inv1", 50.0, 0.2), Event(0.05, "id_ref", "inv2", 60.0, 0.2),
              Event(0.38, "damping", "sad", 0.0))
    w = simulate(Scenario(case_system(sad=REFERENCE_SAD, power=0.5), events, duration=0.9,
                          record_rate=5e3))
    before = detect_instability(WaveRecord(w.names, w.data[w.t < 0.38], w.sample_rate), 0.02)
    after = detect_instability(w)

    p = [r.margin for r in margin_sweep(case_system(), "power", np.linspace(0.5, 1.0, 6))]
    z = [r.margin for r in margin_sweep(case_system(L_g=1e-3, R_g=0.05), "impedance",
                                        [1.0, 2.0, 3.0, 4.0, 5.0])]
    mono = all(b < a for a, b in zip(p, p[1:])) and all(b < a for a, b in zip(z, z[1:]))
    ok = (undamped.verdict == "unstable" and damped.verdict == "stable" and before.verdict == "stable"
          and after.verdict == "unstable" and mono)
    assert report("qualitative", ok,
                  f"undamped {undamped.verdict} ({undamped.margin:.3f}), tuned {damped.verdict} "
                  f"({damped.margin:.3f}), toggle {before.verdict}->{after.verdict} "
                  f"(rate {after.rate:.1f}/s), power margins {np.round(p, 3).tolist()}, "
                  f"impedance margins {np.round(z, 3).tolist()}")


def test_probe_matches_assessment_on_case(report):
    # the fast probe used by the tuner must agree with the full assessment
    probe = MarginProbe(case_system())
    gap = abs(probe.margin(REFERENCE_SAD) - assess(case_system(sad=REFERENCE_SAD)).margin)
    assert report("probe consistency", gap < 1e-9, f"margin gap {gap:.1e}")
