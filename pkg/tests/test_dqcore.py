import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sadamp.dqcore import (
    EigenTrajectory,
    FrequencyGrid,
    OnBoundaryError,
    PoleError,
    RationalTF,
    dq_matrix,
    eig2,
    eval_rational,
    inv2,
    pade_delay,
    track_branches,
    winding_number,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
cplx = st.builds(complex, finite, finite)


def test_first_order_lowpass_values():
    tf = RationalTF((1.0,), (1.0, 1.0))
    assert eval_rational(tf, 0.0) == 1 + 0j
    assert eval_rational(tf, 1 / (2 * np.pi)) == pytest.approx(0.5 - 0.5j, abs=1e-15)


def test_s_over_s_is_one():
    tf = RationalTF((0.0, 1.0), (0.0, 1.0))
    assert eval_rational(tf, 3.7) == pytest.approx(1.0)


def test_pole_on_axis_raises():
    with pytest.raises(PoleError):
        eval_rational(RationalTF((1.0,), (0.0, 1.0)), 0.0)


def test_zero_denominator_rejected():
    with pytest.raises(ValueError):
        RationalTF((1.0,), (0.0, 0.0))


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=4),
       st.lists(st.floats(0.1, 10), min_size=2, max_size=4),
       st.floats(0.01, 1e4))
def test_conjugate_symmetry(num, den, f):
    tf = RationalTF(num, den)
    try:
        a = eval_rational(tf, f)
        b = eval_rational(tf, -f)
    except PoleError:
        return
    assert b == pytest.approx(np.conj(a), rel=1e-12, abs=1e-300)


def test_pade_all_pass_and_dc():
    d = pade_delay(1.5 / 10e3)
    f = FrequencyGrid.log().f
    assert np.max(np.abs(np.abs(eval_rational(d, f)) - 1)) < 1e-9
    assert eval_rational(d, 0.0) == 1 + 0j


def test_pade_phase_matches_exact_delay_at_low_frequency():
    d = pade_delay(1e-3)
    ph = np.angle(d(1j * 100.0))
    assert abs(ph - (-0.1)) < 1e-6


def test_eig2_examples():
    a, b = eig2(np.eye(2, dtype=complex))
    assert (a, b) == (1, 1)
    a, b = eig2(dq_matrix(1, 2, 3, 4))
    assert sorted([a.real, b.real]) == pytest.approx([(5 - 33**0.5) / 2, (5 + 33**0.5) / 2])
    a, b = eig2(dq_matrix(2 + 1j, 0, 0, -3))
    assert {a, b} == {2 + 1j, -3}


@given(cplx, cplx, cplx, cplx)
def test_eig2_trace_and_determinant(a, b, c, d):
    M = dq_matrix(a, b, c, d)
    l1, l2 = eig2(M)
    scale = max(1.0, abs(a) + abs(b) + abs(c) + abs(d))
    assert abs((l1 + l2) - (a + d)) <= 1e-10 * scale
    assert abs(l1 * l2 - (a * d - b * c)) <= 1e-10 * scale**2


@given(cplx, cplx, cplx, cplx, cplx)
def test_shift_identity(a, b, c, d, y):
    M = dq_matrix(a, b, c, d)
    l1, l2 = eig2(M)
    m1, m2 = eig2(M + y * np.eye(2))
    scale = max(1.0, abs(a) + abs(b) + abs(c) + abs(d) + abs(y))
    err = min(abs(m1 - l1 - y) + abs(m2 - l2 - y), abs(m1 - l2 - y) + abs(m2 - l1 - y))
    # eigenvalues of a defective matrix are only sqrt-accurate
    assert err <= 1e-10 * scale or err <= 1e-6 * scale


@given(cplx, cplx, cplx, cplx)
def test_inverse(a, b, c, d):
    M = dq_matrix(a, b, c, d)
    det = a * d - b * c
    if abs(det) < 1e-3 * max(1.0, abs(a * d) + abs(b * c)):
        return
    assert np.allclose(inv2(M) @ M, np.eye(2), atol=1e-8)


def test_track_constant_and_crossing_lines():
    f = np.linspace(1, 10, 50)
    t1, t2 = track_branches(f, np.tile([2 + 0j, 1 + 0j], (50, 1)))
    assert np.all(t1.values == 2) and np.all(t2.values == 1)
    # two lines crossing near the middle; per-row order deliberately scrambled
    x = np.linspace(-1, 1, 201)
    la = x + 1j * x
    lb = -x + 1j * (x + 0.05)
    E = np.stack((la, lb), axis=1)
    rng = np.random.default_rng(3)
    swap = rng.random(201) < 0.5
    E[swap] = E[swap][:, ::-1]
    t1, t2 = track_branches(np.arange(201.0) + 1, E)
    got = {tuple(np.round(t1.values[[0, -1]], 9)), tuple(np.round(t2.values[[0, -1]], 9))}
    assert got == {tuple(np.round(la[[0, -1]], 9)), tuple(np.round(lb[[0, -1]], 9))}


def test_track_needs_two_samples():
    with pytest.raises(ValueError):
        track_branches([1.0], [[1, 2]])


def test_winding_numbers():
    th = np.linspace(0, 2 * np.pi, 360, endpoint=False)
    circle = np.exp(1j * th)
    assert winding_number(circle, 0) == 1
    assert winding_number(circle[::-1], 0) == -1
    assert winding_number(circle, 3 + 0j) == 0
    th = np.linspace(0, 4 * np.pi, 720, endpoint=False)
    double = (1 + 0.3 * np.cos(th / 2)) * np.exp(1j * th)
    assert winding_number(double, 0) == 2


@settings(max_examples=50)
@given(st.floats(0.2, 5), st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_winding_reverse_negates(r, x, y):
    th = np.linspace(0, 2 * np.pi, 400, endpoint=False)
    z = r * np.exp(1j * th) + 0.1j
    p = complex(x, y) * r
    if np.min(np.abs(z - p)) < 1e-3:
        return
    assert winding_number(z[::-1], p) == -winding_number(z, p)


def test_curve_through_point_refused():
    with pytest.raises(OnBoundaryError):
        winding_number(np.array([1, -1 + 1e-12j, 1j]), 0)


def test_trajectory_closure():
    f = np.linspace(1, 2, 400)
    # upper half circle: the closing arcs pass through the positive real axis
    v = np.exp(1j * np.linspace(0.01, np.pi - 0.01, 400))
    assert winding_number(EigenTrajectory(f, v, 1), 0) == 0
    # a full turn per positive-frequency branch counts twice once mirrored
    v = np.exp(1j * np.linspace(0.01, 2 * np.pi - 0.01, 800))
    assert winding_number(EigenTrajectory(np.linspace(1, 2, 800), v, 1), 0) == 2


def test_default_grid():
    g = FrequencyGrid.log()
    assert len(g) == 2000 and g.f[0] == pytest.approx(0.1) and g.f[-1] == pytest.approx(5000)
    with pytest.raises(ValueError):
        FrequencyGrid(np.array([1.0, 1.0]))
