"""Compiled simulator tick; mirrors ``sim._advance_numpy`` operation for operation."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _wrap(a):
    w = np.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@njit(cache=True)
def forward(root, root_pose, q, lengths, parent, terminal_links):
    """World headings, proximal/distal nodes and terminal poses."""
    n = lengths.shape[0]
    psi = np.empty(n)
    prox = np.empty((n, 2))
    distal = np.empty((n, 2))
    psi[0] = 0.0
    prox[0, 0] = 0.0
    prox[0, 1] = 0.0
    distal[0, 0] = lengths[0]
    distal[0, 1] = 0.0
    for e in range(1, n):
        p = parent[e]
        psi[e] = psi[p] + q[e - 1]
        prox[e, 0] = distal[p, 0]
        prox[e, 1] = distal[p, 1]
        distal[e, 0] = prox[e, 0] + lengths[e] * math.cos(psi[e])
        distal[e, 1] = prox[e, 1] + lengths[e] * math.sin(psi[e])
    nt = terminal_links.shape[0]
    tp = np.empty((nt, 3))
    tp[0, 0] = 0.0
    tp[0, 1] = 0.0
    tp[0, 2] = 0.0
    for t in range(1, nt):
        e = terminal_links[t]
        tp[t, 0] = distal[e, 0]
        tp[t, 1] = distal[e, 1]
        tp[t, 2] = psi[e]
    gth = root_pose[2] - tp[root, 2]
    c = math.cos(gth)
    s = math.sin(gth)
    gx = root_pose[0] - (c * tp[root, 0] - s * tp[root, 1])
    gy = root_pose[1] - (s * tp[root, 0] + c * tp[root, 1])
    for e in range(n):
        x, y = prox[e, 0], prox[e, 1]
        prox[e, 0] = c * x - s * y + gx
        prox[e, 1] = s * x + c * y + gy
        x, y = distal[e, 0], distal[e, 1]
        distal[e, 0] = c * x - s * y + gx
        distal[e, 1] = s * x + c * y + gy
        psi[e] += gth
    for t in range(nt):
        x, y = tp[t, 0], tp[t, 1]
        tp[t, 0] = c * x - s * y + gx
        tp[t, 1] = s * x + c * y + gy
        tp[t, 2] = _wrap(tp[t, 2] + gth)
    tp[root, 0] = root_pose[0]
    tp[root, 1] = root_pose[1]
    tp[root, 2] = root_pose[2]
    return psi, prox, distal, tp


@njit(cache=True)
def stick_slip(M, tau, friction):
    n = tau.shape[0]
    anyf = False
    for i in range(n):
        if friction[i] > 0.0:
            anyf = True
    if not anyf:
        return np.linalg.solve(M, tau)
    stuck = np.empty(n, dtype=np.bool_)
    sgn = np.empty(n)
    for i in range(n):
        stuck[i] = abs(tau[i]) <= friction[i]
        sgn[i] = 1.0 if tau[i] > 0 else (-1.0 if tau[i] < 0 else 0.0)
    qd = np.zeros(n)
    for _ in range(4 * n + 4):
        idx = np.where(~stuck)[0]
        qd = np.zeros(n)
        m = idx.shape[0]
        if m > 0:
            Mf = np.empty((m, m))
            rhs = np.empty(m)
            for a in range(m):
                rhs[a] = tau[idx[a]] - friction[idx[a]] * sgn[idx[a]]
                for b in range(m):
                    Mf[a, b] = M[idx[a], idx[b]]
            sol = np.linalg.solve(Mf, rhs)
            for a in range(m):
                qd[idx[a]] = sol[a]
        changed = False
        hold = tau - M @ qd
        for i in range(n):
            if not stuck[i] and qd[i] * sgn[i] < 0.0:
                stuck[i] = True
                changed = True
        for i in range(n):
            if stuck[i] and qd[i] == 0.0 and abs(hold[i]) > friction[i] * (1.0 + 1e-9):
                sgn[i] = 1.0 if hold[i] > 0 else -1.0
                stuck[i] = False
                changed = True
        if not changed:
            break
        for i in range(n):
            if stuck[i]:
                qd[i] = 0.0
    return qd


@njit(cache=True)
def advance(root, root_pose, q, u, dt, lengths, parent, terminal_links, S, stiffness, damping,
            rest, lo, hi, friction, drag, terminal_drag, pin_ids, pin_targets, k_lin, k_rot):
    """One linearly implicit quasi-static tick; returns (root_pose, q)."""
    rp = root_pose.copy()
    rp[0] += dt * u[0]
    rp[1] += dt * u[1]
    rp[2] = _wrap(rp[2] + dt * u[2])
    psi, prox, distal, tp = forward(root, rp, q, lengths, parent, terminal_links)
    n = lengths.shape[0]
    nj = n - 1
    A = np.zeros((nj, nj))
    H = np.zeros((nj, nj))
    tau = np.empty(nj)
    for j in range(nj):
        A[j, j] = damping[j]
        H[j, j] = stiffness[j]
        tau[j] = -stiffness[j] * (q[j] - rest[j])
    hx = tp[root, 0]
    hy = tp[root, 1]
    jx = np.empty(nj)
    jy = np.empty(nj)
    jw = np.empty(nj)
    if drag > 0.0:
        for e in range(n):
            cx = 0.5 * (prox[e, 0] + distal[e, 0])
            cy = 0.5 * (prox[e, 1] + distal[e, 1])
            wv = drag * lengths[e]
            ww = drag * lengths[e] ** 3 / 12.0
            nz = False
            for j in range(nj):
                sj = S[j, e]
                jw[j] = sj
                jx[j] = -sj * (cy - prox[j + 1, 1])
                jy[j] = sj * (cx - prox[j + 1, 0])
                if sj != 0.0:
                    nz = True
            if not nz:
                continue
            ux = u[0] - u[2] * (cy - hy)
            uy = u[1] + u[2] * (cx - hx)
            for a in range(nj):
                if jw[a] == 0.0:
                    continue
                tau[a] -= wv * (jx[a] * ux + jy[a] * uy) + ww * jw[a] * u[2]
                for b in range(nj):
                    A[a, b] += wv * (jx[a] * jx[b] + jy[a] * jy[b]) + ww * jw[a] * jw[b]
    nt = terminal_links.shape[0]
    npin = pin_ids.shape[0]
    for t in range(nt):
        e = terminal_links[t]
        pin = -1
        for k in range(npin):
            if pin_ids[k] == t:
                pin = k
        if terminal_drag <= 0.0 and pin < 0:
            continue
        nz = False
        for j in range(nj):
            sj = S[j, e]
            jw[j] = sj
            jx[j] = -sj * (tp[t, 1] - prox[j + 1, 1])
            jy[j] = sj * (tp[t, 0] - prox[j + 1, 0])
            if sj != 0.0:
                nz = True
        if not nz:
            continue
        if terminal_drag > 0.0:
            ux = u[0] - u[2] * (tp[t, 1] - hy)
            uy = u[1] + u[2] * (tp[t, 0] - hx)
            for a in range(nj):
                tau[a] -= terminal_drag * (jx[a] * ux + jy[a] * uy)
                for b in range(nj):
                    A[a, b] += terminal_drag * (jx[a] * jx[b] + jy[a] * jy[b])
        if pin >= 0:
            ex = tp[t, 0] - pin_targets[pin, 0]
            ey = tp[t, 1] - pin_targets[pin, 1]
            eth = math.sin(tp[t, 2] - pin_targets[pin, 2])
            for a in range(nj):
                tau[a] -= k_lin * (jx[a] * ex + jy[a] * ey) + k_rot * jw[a] * eth
                for b in range(nj):
                    H[a, b] += k_lin * (jx[a] * jx[b] + jy[a] * jy[b]) + k_rot * jw[a] * jw[b]
    M = A + dt * H
    qd = stick_slip(M, tau, friction)
    qn = np.empty(nj)
    for j in range(nj):
        v = q[j] + dt * qd[j]
        if v < lo[j]:
            v = lo[j]
        elif v > hi[j]:
            v = hi[j]
        qn[j] = v
    return rp, qn


@njit(cache=True)
def rollout(n_steps, root, root_pose, q, u, dt, lengths, parent, terminal_links, S, stiffness, damping,
            rest, lo, hi, friction, drag, terminal_drag, pin_ids, pin_targets, k_lin, k_rot):
    """Constant-input run; records (root pose, q, terminal poses) before every tick."""
    nt = terminal_links.shape[0]
    roots = np.empty((n_steps, 3))
    qs = np.empty((n_steps, q.shape[0]))
    ys = np.empty((n_steps, nt, 3))
    rp = root_pose.copy()
    qc = q.copy()
    for k in range(n_steps):
        _, _, _, tp = forward(root, rp, qc, lengths, parent, terminal_links)
        roots[k] = rp
        qs[k] = qc
        ys[k] = tp
        rp, qc = advance(root, rp, qc, u, dt, lengths, parent, terminal_links, S, stiffness, damping,
                         rest, lo, hi, friction, drag, terminal_drag, pin_ids, pin_targets, k_lin, k_rot)
    return roots, qs, ys, rp, qc
