import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sadamp.plants import OMEGA0, SadParams
from sadamp.simtime import Scenario, Simulation
from sadamp.stability import case_system
from sadamp.zest import (
    EstimationConfig,
    EstimationError,
    InsufficientExcitationError,
    aligned_dq,
    estimate_on,
    extract_dc,
    inverse_park,
    park,
    run_estimation,
    solve_rg_lg,
)

TUNED = SadParams().tuned(1005.31, 1.8)


def test_solve_known_deltas():
    R, L, cond = solve_rg_lg(-37.86, 5.20, -0.85, 40.90)
    assert L == pytest.approx(2.937e-3, rel=5e-3)
    assert R == pytest.approx(0.146, rel=5e-3)
    assert cond >= 1


@given(st.floats(0.01, 1.0), st.floats(0.2e-3, 10e-3), st.floats(-60, 60), st.floats(-60, 60))
def test_solve_round_trip(R, L, di_d, di_q):
    if np.hypot(di_d, di_q) < 1.0:
        return
    z = complex(R, OMEGA0 * L) * complex(di_d, di_q)
    r, l, _ = solve_rg_lg(z.real, z.imag, di_d, di_q)
    assert r == pytest.approx(R, rel=1e-9, abs=1e-12)
    assert l == pytest.approx(L, rel=1e-9)


def test_solve_refuses_tiny_current_step():
    with pytest.raises(InsufficientExcitationError):
        solve_rg_lg(1.0, 1.0, 0.1, 0.2)


def test_park_round_trip_and_alignment():
    th = np.linspace(0, 7, 50)
    d, q = park(*inverse_park(3.0, -2.0, th), th)
    assert np.allclose(d, 3.0) and np.allclose(q, -2.0)
    # a balanced cosine set at the frame frequency is pure d
    t = np.linspace(0.3, 0.5, 400)
    w = OMEGA0
    abc = [100 * np.cos(w * t - k * 2 * np.pi / 3) for k in range(3)]
    d, q = aligned_dq(abc, w * 0.3, w, t, 0.3)
    assert np.allclose(d, 100) and np.allclose(q, 0, atol=1e-9)
    # a frame locked a quarter turn ahead sees it on the negative q axis
    d, q = aligned_dq(abc, w * 0.3 + np.pi / 2, w, t, 0.3)
    assert np.allclose(d, 0, atol=1e-9) and np.allclose(q, -100)


def test_extract_dc_examples():
    fs = 5e3
    v = extract_dc(np.full(5000, 7.5), fs)
    assert v.value == pytest.approx(7.5) and v.settled
    t = np.arange(5000) / fs
    rng = np.random.default_rng(0)
    x = 2.0 + np.sin(2 * np.pi * 300 * t) + 0.01 * rng.standard_normal(t.size)
    v = extract_dc(x, fs)
    # first-order attenuation at 300 Hz is about 5/300
    assert v.value == pytest.approx(2.0, abs=0.02) and v.settled
    ramp = extract_dc(10 * t, fs)
    assert not ramp.settled
    with pytest.raises(ValueError):
        extract_dc(np.ones(10), fs)


def _scenario(L, R, events=()):
    return Scenario(case_system(L, R, power=0.5, sad=TUNED), events, duration=2.0, record_rate=5e3)


def test_estimation_is_sign_invariant():
    sc = _scenario(3e-3, 0.15)
    up = run_estimation(sc, EstimationConfig(dI_qref=40.0))
    down = run_estimation(sc, EstimationConfig(dI_qref=-40.0))
    for r in (up, down):
        er, el = r.errors(0.15, 3e-3)
        assert er < 3 and el < 3
    assert down.R_g == pytest.approx(up.R_g, rel=0.01)
    assert down.L_g == pytest.approx(up.L_g, rel=0.01)


def test_live_frame_is_worse_than_frozen_frame():
    sc = _scenario(3e-3, 0.15)
    a = run_estimation(sc, EstimationConfig())
    b = run_estimation(sc, EstimationConfig(live_frame=True))
    assert sum(b.errors(0.15, 3e-3)) > sum(a.errors(0.15, 3e-3))


def test_estimation_needs_a_damper_and_enough_excitation():
    m = case_system(3e-3, 0.15, power=0.5)
    with pytest.raises(EstimationError):
        run_estimation(Scenario(m, duration=2.0))
    with pytest.raises(InsufficientExcitationError):
        run_estimation(_scenario(3e-3, 0.15), EstimationConfig(dI_qref=0.2))


def test_config_validation():
    with pytest.raises(ValueError):
        EstimationConfig(t1=1.0, t2=0.5)
    with pytest.raises(ValueError):
        EstimationConfig(dI_qref=0.0)
    with pytest.raises(ValueError):
        EstimationConfig(cutoff=20.0)
    with pytest.raises(ValueError):
        EstimationConfig(t1=0.05)


def test_estimation_result_text():
    r = run_estimation(_scenario(4e-3, 0.2), EstimationConfig())
    assert "L_g = " in r.to_text()
    assert len(r.csv_row(0.2, 4e-3)) == 7
    assert run_estimation(_scenario(4e-3, 0.2)).L_g == r.L_g
    sim = Simulation(_scenario(4e-3, 0.2))
    sim.advance(0.5)
    with pytest.raises(EstimationError):
        estimate_on(sim, EstimationConfig())
    with pytest.raises(EstimationError):
        estimate_on(Simulation(_scenario(4e-3, 0.2)), EstimationConfig(device="inv9"))
