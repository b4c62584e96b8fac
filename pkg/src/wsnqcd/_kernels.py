"""Compiled inner loops for the Monte Carlo engines.

These mirror the pure-Python reference implementations in ``network``,
``nadm`` and ``nodm`` slot for slot; tests cross-check the two.  Integer
queue state lives in ``st = [k, lam, batch, delta]`` plus the ``W`` and
``R`` vectors, all mutated in place so a run can resume after its input
buffers are refilled.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

K, LAM, BATCH, DELTA = 0, 1, 2, 3

# kernel status codes
DONE = 0
NEED_UNIFORMS = 1
NEED_OBS = 2
HORIZON = 3

PSI_FLOOR = 1e-300


@njit(cache=True, inline="always")
def logaddexp(x, y):
    if x == -np.inf:
        return y
    if y == -np.inf:
        return x
    if x > y:
        return x + math.log1p(math.exp(y - x))
    return y + math.log1p(math.exp(x - y))


@njit(cache=True, inline="always")
def psi_to_pi(psi, delta, p):
    if delta == 0:
        return psi
    return 1.0 - (1.0 - psi) * math.exp(delta * math.log1p(-p))


@njit(cache=True, inline="always")
def bayes_step(psi, llr):
    """Posterior of a binary state after one likelihood ratio."""
    if psi >= 1.0:
        return 1.0
    a = math.log(psi) + llr
    b = math.log1p(-psi)
    out = math.exp(a - logaddexp(a, b))
    return min(max(out, PSI_FLOOR), 1.0)


@njit(cache=True, inline="always")
def completion_step(psi, llr0, s_next, delta, period, p):
    """Posterior after the last sample of a batch plus next-batch extras.

    The prior hazard between the two sampling instants covers
    ``gap = min(period, delta + 1)`` slots; when the system drained before
    the next instant this is shorter than a full period.
    """
    if psi >= 1.0:
        return 1.0
    gap = min(period, delta + 1)
    log_stay = gap * math.log1p(-p)
    log_q = math.log(-math.expm1(log_stay))
    l1m = math.log1p(-psi)
    a = l1m + log_q + s_next
    b = math.log(psi) + llr0 + s_next
    c = l1m + log_stay
    num = logaddexp(a, b)
    out = math.exp(num - logaddexp(num, c))
    return min(max(out, PSI_FLOOR), 1.0)


@njit(cache=True, inline="always")
def shiryaev_step(pi, llr_sum, log1m_pr, pr):
    """Prior predict over one batch, then Bayes with the batch LLR."""
    if pi >= 1.0:
        return 1.0
    pplus = pi + (1.0 - pi) * pr
    a = math.log(pplus) + llr_sum
    b = math.log1p(-pi) + log1m_pr
    return math.exp(a - logaddexp(a, b))


@njit(cache=True)
def pick_winner(W, R, n, delta, period, u1):
    """0-based index of the ``int(u1 * cnt)``-th nonempty sensor queue.

    Only called while a batch is outstanding.  With ``delta = 0`` that
    means a fresh batch, so every queue holds one packet.
    """
    if delta == 0:
        return int(u1 * n)
    base = delta // period + 1
    cnt = 0
    for i in range(n):
        if base - R[i] - W[i] > 0:
            cnt += 1
    pick = int(u1 * cnt)
    seen = 0
    for i in range(n):
        if base - R[i] - W[i] > 0:
            if seen == pick:
                return i
            seen += 1
    return -1


@njit(cache=True)
def queue_run(st, W, R, period, n, sigma, u, j0, stop_batch,
              comp_batch, comp_slot, ncomp0, backlog_out):
    """Run the network alone.

    Stops once batch ``stop_batch`` completes (pass a huge value to run the
    whole chunk).  Completion slots are appended to ``comp_*`` from
    position ``ncomp0`` while room remains; ``backlog_out[j]`` receives the
    total backlog at the start of the ``j``-th slot of the chunk.
    Returns ``(status, next_j, ncomp)``.
    """
    # scalars stay in registers; st is written back on exit
    k, lam, batch, delta = st[K], st[LAM], st[BATCH], st[DELTA]
    rsum = 0
    for i in range(n):
        rsum += R[i]
    ncomp = ncomp0
    ncap = comp_batch.shape[0]
    nb = backlog_out.shape[0]
    nu = u.shape[0]
    j = j0
    status = NEED_UNIFORMS
    while j < nu:
        if batch > stop_batch:
            status = DONE
            break
        outstanding = delta > 0 or (lam == period and k > 0)
        if j < nb:
            if delta > 0:
                backlog_out[j] = n * (delta // period + 1) - rsum
            else:
                backlog_out[j] = n if outstanding else 0
        m = -1
        if outstanding and u[j, 0] < sigma:
            m = pick_winner(W, R, n, delta, period, u[j, 1])
        if m < 0 or R[m] == 1:
            if m >= 0:
                W[m] += 1
            delta = delta + 1 if outstanding else 0
        elif rsum < n - 1:
            R[m] = 1
            rsum += 1
            delta += 1
        else:
            if ncomp < ncap:
                comp_batch[ncomp] = batch
                comp_slot[ncomp] = k + 1
                ncomp += 1
            rsum = 0
            for i in range(n):
                if W[i] > 0:
                    R[i] = 1
                    W[i] -= 1
                    rsum += 1
                else:
                    R[i] = 0
            batch += 1
            delta = max(delta + 1 - period, 0)
        lam = lam - 1 if lam > 1 else period
        k += 1
        j += 1
    if batch > stop_batch:
        status = DONE
    st[K], st[LAM], st[BATCH], st[DELTA] = k, lam, batch, delta
    return status, j, ncomp


@njit(cache=True)
def nadm_run(st, W, R, fstate, period, n, sigma, p, llr, u, j0,
             change_time, gamma, calibrate, horizon, pi_out, ev_out):
    """Joint network + posterior recursion.

    ``fstate = [psi, running_max]``.  In stop mode the run ends at the
    first slot with ``Pi_k >= gamma`` (``st[K]`` is then tau).  In
    calibrate mode it ends at slot ``change_time`` having tracked the
    maximum of ``Pi_k`` over ``k < change_time``.
    Returns ``(status, next_j)``.
    """
    k, lam, batch, delta = st[K], st[LAM], st[BATCH], st[DELTA]
    psi, run_max = fstate[0], fstate[1]
    rsum = 0
    for i in range(n):
        rsum += R[i]
    log_stay1 = math.log1p(-p)
    nobs = llr.shape[0]
    npi = pi_out.shape[0]
    nev = ev_out.shape[0]
    nu = u.shape[0]
    j = j0
    while True:
        pi = psi if delta == 0 else 1.0 - (1.0 - psi) * math.exp(delta * log_stay1)
        if k < npi:
            pi_out[k] = pi
        if calibrate:
            if k >= change_time:
                status = DONE
                break
            if pi > run_max:
                run_max = pi
        elif pi >= gamma:
            status = DONE
            break
        if k >= horizon:
            status = HORIZON
            break
        if j >= nu:
            status = NEED_UNIFORMS
            break
        outstanding = delta > 0 or (lam == period and k > 0)
        m = -1
        if outstanding and u[j, 0] < sigma:
            m = pick_winner(W, R, n, delta, period, u[j, 1])
        if m < 0 or R[m] == 1:
            ev = 1
            if not outstanding:
                psi = psi + (1.0 - psi) * p
        elif rsum < n - 1:
            ev = 2
            if batch > nobs:
                status = NEED_OBS
                break
            psi = bayes_step(psi, llr[batch - 1, m])
        else:
            ev = 3
            if batch + 1 > nobs:
                status = NEED_OBS
                break
            s_next = 0.0
            for i in range(n):
                if W[i] > 0:
                    s_next += llr[batch, i]
            psi = completion_step(psi, llr[batch - 1, m], s_next, delta, period, p)
        if k < nev:
            ev_out[k] = ev
        if ev == 1:
            if m >= 0:
                W[m] += 1
            delta = delta + 1 if outstanding else 0
        elif ev == 2:
            R[m] = 1
            rsum += 1
            delta += 1
        else:
            rsum = 0
            for i in range(n):
                if W[i] > 0:
                    R[i] = 1
                    W[i] -= 1
                    rsum += 1
                else:
                    R[i] = 0
            batch += 1
            delta = max(delta + 1 - period, 0)
        lam = lam - 1 if lam > 1 else period
        k += 1
        j += 1
    st[K], st[LAM], st[BATCH], st[DELTA] = k, lam, batch, delta
    fstate[0] = psi
    fstate[1] = run_max
    return status, j


@njit(cache=True)
def shiryaev_run(llr, b0, pi, pr, gamma):
    """Continue the batch recursion from row ``b0`` (0-based).

    Returns ``(stop_batch, pi)`` with ``stop_batch = -1`` if the rows ran
    out first; ``stop_batch`` is 1-based.
    """
    log1m_pr = math.log1p(-pr)
    for b in range(b0, llr.shape[0]):
        s = 0.0
        for i in range(llr.shape[1]):
            s += llr[b, i]
        pi = shiryaev_step(pi, s, log1m_pr, pr)
        if pi >= gamma:
            return b + 1, pi
    return -1, pi


@njit(cache=True)
def shiryaev_path(llr, nb, pi0, pr, out):
    """``out[b] = pi_b`` for ``b = 0..nb`` (``out[0] = pi0``)."""
    log1m_pr = math.log1p(-pr)
    pi = pi0
    out[0] = pi
    for b in range(nb):
        s = 0.0
        for i in range(llr.shape[1]):
            s += llr[b, i]
        pi = shiryaev_step(pi, s, log1m_pr, pr)
        out[b + 1] = pi
