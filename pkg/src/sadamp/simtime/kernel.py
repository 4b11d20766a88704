"""Compiled stepping loop of the averaged dq simulator.

Everything here works on flat float arrays so that numba can compile it; the
Python side in :mod:`sadamp.simtime.sim` builds and interprets them.
Continuous state layout for n devices: currents at [2k, 2k+1], dc-link
voltage at [2n + k], grid-branch current at [3n, 3n+1].
"""

import numpy as np
from numba import njit

# device parameter columns
P_KIND = 0
P_L = 1
P_R = 2
P_KP = 3
P_KI = 4
P_KPLL = 5
P_KIPLL = 6
P_NSUB = 7
P_VDC = 8
P_CDC = 9
P_KVP = 10
P_KVI = 11
P_HV = 12
P_FREEZE_PLL = 13
P_FREEZE_VDC = 14
P_SAT = 15
P_BB0 = 16
P_BB1 = 17
P_BB2 = 18
P_BA1 = 19
P_BA2 = 20
P_LB0 = 21
P_LB1 = 22
P_LA1 = 23
P_TS = 24
P_DEC = 25
NP = 26

# device state columns
S_XD = 0
S_XQ = 1
S_XPLL = 2
S_DELTA = 3
S_PD = 4
S_PQ = 5
S_AD = 6
S_AQ = 7
S_F1D = 8
S_F2D = 9
S_F1Q = 10
S_F2Q = 11
S_LD = 12
S_LQ = 13
S_XV = 14
S_IDFZ = 15
S_OMEGA = 16
S_SAT = 17
S_VQP = 18
NS = 19

# grid array
G_RG = 0
G_LG = 1
G_W0 = 2
G_VGD = 3
G_VGQ = 4
G_MODE = 5  # 0: PCC voltage from KCL with the grid branch, 1: PCC is a stiff source
G_BRANCH = 6  # source mode: grid branch present as a load on the source
G_VSD = 7
G_VSQ = 8
NG = 9

# perturbation array: amplitude, frequency, direction d, direction q, start
NPERT = 5

# schedule channels per device
CH_IDREF = 0
CH_IQREF = 1
CH_DAMP = 2
NCH = 3


@njit(cache=True)
def _sched(t, lo, hi, st, sv):
    """Piecewise-linear schedule value, held constant outside its breakpoints."""
    if t <= st[lo]:
        return sv[lo]
    if t >= st[hi - 1]:
        return sv[hi - 1]
    a = lo
    b = hi - 1
    while b - a > 1:
        m = (a + b) // 2
        if st[m] <= t:
            a = m
        else:
            b = m
    return sv[a] + (sv[b] - sv[a]) * (t - st[a]) / (st[b] - st[a])


@njit(cache=True)
def _pcc(x, t, n, dp, g, pert, gsl, st, sv, out):
    """PCC voltage (sim frame) into out[0:2]; grid-branch current into out[2:4]."""
    vgd = g[G_VGD] + _sched(t, gsl[0, 0], gsl[0, 1], st, sv)
    vgq = g[G_VGQ] + _sched(t, gsl[1, 0], gsl[1, 1], st, sv)
    pd = 0.0
    pq = 0.0
    if pert[0] != 0.0 and t >= pert[4]:
        sn = pert[0] * np.sin(2.0 * np.pi * pert[1] * (t - pert[4]))
        pd = sn * pert[2]
        pq = sn * pert[3]
    w0 = g[G_W0]
    if g[G_MODE] == 1.0:
        out[0] = g[G_VSD] + pd
        out[1] = g[G_VSQ] + pq
        out[2] = x[3 * n]
        out[3] = x[3 * n + 1]
        return
    vgd += pd
    vgq += pq
    igd = 0.0
    igq = 0.0
    for k in range(n):
        igd += x[2 * k]
        igq += x[2 * k + 1]
    out[2] = igd
    out[3] = igq
    Lg = g[G_LG]
    Rg = g[G_RG]
    if Lg == 0.0:
        out[0] = vgd + Rg * igd
        out[1] = vgq + Rg * igq
        return
    sa_d = 0.0
    sa_q = 0.0
    sinv = 1.0 / Lg
    for k in range(n):
        L = dp[k, P_L]
        R = dp[k, P_R]
        idk = x[2 * k]
        iqk = x[2 * k + 1]
        sa_d += (-R * idk + w0 * L * iqk) / L
        sa_q += (-R * iqk - w0 * L * idk) / L
        sinv += 1.0 / L
    # commanded voltages enter through the applied-command arrays (added by caller)
    out[0] = (sa_d + (vgd + Rg * igd - w0 * Lg * igq) / Lg)
    out[1] = (sa_q + (vgq + Rg * igq + w0 * Lg * igd) / Lg)
    out[0] /= sinv
    out[1] /= sinv


@njit(cache=True)
def _pcc_full(x, t, n, dp, ds, g, pert, gsl, st, sv, out):
    _pcc(x, t, n, dp, g, pert, gsl, st, sv, out)
    if g[G_MODE] == 0.0 and g[G_LG] != 0.0:
        sinv = 1.0 / g[G_LG]
        for k in range(n):
            sinv += 1.0 / dp[k, P_L]
        for k in range(n):
            out[0] += ds[k, S_AD] / dp[k, P_L] / sinv
            out[1] += ds[k, S_AQ] / dp[k, P_L] / sinv


@njit(cache=True)
def _deriv(x, t, n, dp, ds, g, pert, gsl, st, sv, dx, tmp):
    _pcc_full(x, t, n, dp, ds, g, pert, gsl, st, sv, tmp)
    vd = tmp[0]
    vq = tmp[1]
    w0 = g[G_W0]
    for k in range(n):
        L = dp[k, P_L]
        R = dp[k, P_R]
        idk = x[2 * k]
        iqk = x[2 * k + 1]
        vmd = ds[k, S_AD]
        vmq = ds[k, S_AQ]
        dx[2 * k] = (vmd - vd - R * idk + w0 * L * iqk) / L
        dx[2 * k + 1] = (vmq - vq - R * iqk - w0 * L * idk) / L
        if dp[k, P_KIND] == 1.0:
            vdc = x[2 * n + k]
            if vdc < 1.0:
                vdc = 1.0
            dx[2 * n + k] = -1.5 * (vmd * idk + vmq * iqk) / (dp[k, P_CDC] * vdc)
        else:
            dx[2 * n + k] = 0.0
    if g[G_MODE] == 1.0 and g[G_BRANCH] == 1.0:
        Lg = g[G_LG]
        Rg = g[G_RG]
        vfd = g[G_VGD] + _sched(t, gsl[0, 0], gsl[0, 1], st, sv)
        vfq = g[G_VGQ] + _sched(t, gsl[1, 0], gsl[1, 1], st, sv)
        igd = x[3 * n]
        igq = x[3 * n + 1]
        if Lg > 0.0:
            dx[3 * n] = (vd - vfd - Rg * igd + w0 * Lg * igq) / Lg
            dx[3 * n + 1] = (vq - vfq - Rg * igq - w0 * Lg * igd) / Lg
        else:
            dx[3 * n] = 0.0
            dx[3 * n + 1] = 0.0
    else:
        dx[3 * n] = 0.0
        dx[3 * n + 1] = 0.0


@njit(cache=True)
def _control(k, t, x, n, dp, ds, g, pert, gsl, dsl, st, sv, vmeas, noise):
    """One controller sample of device k at time t."""
    Ts = dp[k, P_TS]
    vd = vmeas[0]
    vq = vmeas[1]
    idm = x[2 * k]
    iqm = x[2 * k + 1]
    if noise > 0.0:
        vd += noise * np.random.standard_normal()
        vq += noise * np.random.standard_normal()
        idm += noise * 0.01 * np.random.standard_normal()
        iqm += noise * 0.01 * np.random.standard_normal()
    # PLL with trapezoidal integrators; the implicit angle is found by
    # fixed-point iteration (contraction factor Ts kp V / 2 << 1)
    delta = ds[k, S_DELTA]
    if dp[k, P_FREEZE_PLL] == 0.0:
        d0 = ds[k, S_DELTA]
        w_prev = ds[k, S_OMEGA]
        vq_prev = ds[k, S_VQP]
        kp = dp[k, P_KPLL]
        ki = dp[k, P_KIPLL]
        delta = d0 + Ts * w_prev
        vcq = 0.0
        xp = 0.0
        wdev = 0.0
        for _ in range(4):
            vcq = -np.sin(delta) * vd + np.cos(delta) * vq
            xp = ds[k, S_XPLL] + 0.5 * ki * Ts * (vcq + vq_prev)
            wdev = kp * vcq + xp
            delta = d0 + 0.5 * Ts * (wdev + w_prev)
        ds[k, S_XPLL] = xp
        ds[k, S_OMEGA] = wdev
        ds[k, S_VQP] = -np.sin(delta) * vd + np.cos(delta) * vq
        ds[k, S_DELTA] = delta
    cd = np.cos(delta)
    sd = np.sin(delta)
    vcd = cd * vd + sd * vq
    vcq = -sd * vd + cd * vq
    icd = cd * idm + sd * iqm
    icq = -sd * idm + cd * iqm
    # references
    iqref = _sched(t, dsl[k, CH_IQREF, 0], dsl[k, CH_IQREF, 1], st, sv)
    is_sad = dp[k, P_KIND] == 1.0
    vdc = dp[k, P_VDC]
    if is_sad:
        vdc = x[2 * n + k]
        if dp[k, P_FREEZE_VDC] == 0.0:
            ev = dp[k, P_VDC] - vdc
            idref = -(dp[k, P_KVP] * ev + ds[k, S_XV])
            ds[k, S_XV] += dp[k, P_KVI] * Ts * ev
        else:
            idref = ds[k, S_IDFZ]
    else:
        idref = _sched(t, dsl[k, CH_IDREF, 0], dsl[k, CH_IDREF, 1], st, sv)
    ed = idref - icd
    eq = iqref - icq
    ud = dp[k, P_KP] * ed + ds[k, S_XD] - dp[k, P_DEC] * icq
    uq = dp[k, P_KP] * eq + ds[k, S_XQ] + dp[k, P_DEC] * icd
    ds[k, S_XD] += dp[k, P_KI] * Ts * ed
    ds[k, S_XQ] += dp[k, P_KI] * Ts * eq
    if is_sad:
        b0 = dp[k, P_BB0]
        b1 = dp[k, P_BB1]
        b2 = dp[k, P_BB2]
        a1 = dp[k, P_BA1]
        a2 = dp[k, P_BA2]
        lb0 = dp[k, P_LB0]
        lb1 = dp[k, P_LB1]
        la1 = dp[k, P_LA1]
        # band-pass, transposed direct form II
        yd = b0 * vcd + ds[k, S_F1D]
        ds[k, S_F1D] = b1 * vcd - a1 * yd + ds[k, S_F2D]
        ds[k, S_F2D] = b2 * vcd - a2 * yd
        yq = b0 * vcq + ds[k, S_F1Q]
        ds[k, S_F1Q] = b1 * vcq - a1 * yq + ds[k, S_F2Q]
        ds[k, S_F2Q] = b2 * vcq - a2 * yq
        # lag compensator
        zd = lb0 * yd + ds[k, S_LD]
        ds[k, S_LD] = lb1 * yd - la1 * zd
        zq = lb0 * yq + ds[k, S_LQ]
        ds[k, S_LQ] = lb1 * yq - la1 * zq
        on = _sched(t, dsl[k, CH_DAMP, 0], dsl[k, CH_DAMP, 1], st, sv)
        if on > 0.5:
            ud -= dp[k, P_HV] * zd
            uq -= dp[k, P_HV] * zq
    if dp[k, P_SAT] != 0.0:
        lim = 0.5 * vdc
        mag = np.sqrt(ud * ud + uq * uq)
        if mag > lim and mag > 0.0:
            ud *= lim / mag
            uq *= lim / mag
            ds[k, S_SAT] += 1.0
    ds[k, S_AD] = ds[k, S_PD]
    ds[k, S_AQ] = ds[k, S_PQ]
    ds[k, S_PD] = cd * ud - sd * uq
    ds[k, S_PQ] = sd * ud + cd * uq


@njit(cache=True, nogil=True)
def run(k0, nsteps, h, x, dp, ds, g, pert, gsl, dsl, st, sv,
        rec_every, rec, noise, seed, xlim):
    """Advance ``nsteps`` plant steps from global step index ``k0``.

    Records a row every ``rec_every`` steps (at step indices divisible by it).
    ``xlim`` holds the divergence threshold of every continuous state.
    Returns (rows written, divergence flag, steps taken).
    """
    n = dp.shape[0]
    m = x.size
    if seed >= 0:
        np.random.seed(seed)
    k1 = np.zeros(m)
    k2 = np.zeros(m)
    k3 = np.zeros(m)
    k4 = np.zeros(m)
    xt = np.zeros(m)
    tmp = np.zeros(4)
    vmeas = np.zeros(4)
    nrow = 0
    maxrow = rec.shape[0]
    for step in range(nsteps):
        kg = k0 + step
        t = kg * h
        ctl = False
        for k in range(n):
            if kg % int(dp[k, P_NSUB]) == 0:
                ctl = True
        if ctl:
            _pcc_full(x, t, n, dp, ds, g, pert, gsl, st, sv, vmeas)
            for k in range(n):
                if kg % int(dp[k, P_NSUB]) == 0:
                    _control(k, t, x, n, dp, ds, g, pert, gsl, dsl, st, sv, vmeas, noise)
        if kg % rec_every == 0 and nrow < maxrow:
            _pcc_full(x, t, n, dp, ds, g, pert, gsl, st, sv, tmp)
            rec[nrow, 0] = t
            rec[nrow, 1] = tmp[0]
            rec[nrow, 2] = tmp[1]
            rec[nrow, 3] = tmp[2]
            rec[nrow, 4] = tmp[3]
            for k in range(n):
                c = 5 + 6 * k
                rec[nrow, c] = x[2 * k]
                rec[nrow, c + 1] = x[2 * k + 1]
                rec[nrow, c + 2] = ds[k, S_DELTA]
                rec[nrow, c + 3] = ds[k, S_OMEGA]
                rec[nrow, c + 4] = x[2 * n + k] if dp[k, P_KIND] == 1.0 else dp[k, P_VDC]
                rec[nrow, c + 5] = ds[k, S_SAT]
            nrow += 1
        _deriv(x, t, n, dp, ds, g, pert, gsl, st, sv, k1, tmp)
        for i in range(m):
            xt[i] = x[i] + 0.5 * h * k1[i]
        _deriv(xt, t + 0.5 * h, n, dp, ds, g, pert, gsl, st, sv, k2, tmp)
        for i in range(m):
            xt[i] = x[i] + 0.5 * h * k2[i]
        _deriv(xt, t + 0.5 * h, n, dp, ds, g, pert, gsl, st, sv, k3, tmp)
        for i in range(m):
            xt[i] = x[i] + h * k3[i]
        _deriv(xt, t + h, n, dp, ds, g, pert, gsl, st, sv, k4, tmp)
        bad = False
        for i in range(m):
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if not np.isfinite(x[i]) or abs(x[i]) > xlim[i]:
                bad = True
        if bad:
            return nrow, 1, step + 1
    return nrow, 0, nsteps
