"""Compiled inner loops for long random-sampling runs.

The pure-Python updates in ``tabular`` are the reference; these kernels apply
the same arithmetic in the same order and are cross-checked against them.
"""
import numba
import numpy as np

QTABLE, RG, RG_TIE_SPLIT = 0, 1, 2


@numba.njit(cache=True)
def _sq_dist(q, qstar):
    d = 0.0
    for k in range(q.shape[0]):
        e = q[k] - qstar[k]
        d += e * e
    return d


@numba.njit(cache=True)
def apply_update(q, k, r, nterm, nlo, nhi, gamma, alpha, rule, ties):
    """One tabular update on pair k. Returns the number of tied successor pairs written to ``ties``."""
    nt = 0
    m = 0.0
    if not nterm[k]:
        lo, hi = nlo[k], nhi[k]
        m = q[lo]
        for c in range(lo + 1, hi):
            if q[c] > m:
                m = q[c]
        for c in range(lo, hi):
            if q[c] == m:
                ties[nt] = c
                nt += 1
    delta = r[k] + gamma * m - q[k]
    if rule == QTABLE or nt == 0:
        q[k] += alpha * delta
        return nt
    if rule == RG:
        q[k] += alpha * delta
        q[ties[0]] -= gamma * alpha * delta
        return nt
    q[k] += alpha * delta
    share = gamma * alpha * delta / nt
    for i in range(nt):
        q[ties[i]] -= share
    return nt


@numba.njit(cache=True)
def run_updates(q, qstar, samples, r, nterm, nlo, nhi, gamma, alpha, rule, thr, max_actions):
    """Apply the updates for ``samples`` in order.

    Tracks D = sum (q - qstar)^2 incrementally and returns the 0-based index of
    the first update after which D <= thr (confirmed by an exact recount), or
    -1 if that does not happen. Stops at the first hit when thr >= 0.
    """
    ties = np.empty(max_actions, np.int64)
    d = _sq_dist(q, qstar)
    track = thr >= 0.0
    for n in range(samples.shape[0]):
        k = samples[n]
        if track:
            old_k = q[k]
        nt = 0
        if track and not nterm[k]:
            # save entries of the successor row that may change
            lo, hi = nlo[k], nhi[k]
            dold = 0.0
            for c in range(lo, hi):
                if c != k:
                    e = q[c] - qstar[c]
                    dold += e * e
        nt = apply_update(q, k, r, nterm, nlo, nhi, gamma, alpha, rule, ties)
        if not track:
            continue
        e0 = old_k - qstar[k]
        e1 = q[k] - qstar[k]
        d += e1 * e1 - e0 * e0
        if rule != QTABLE and not nterm[k]:
            dnew = 0.0
            for c in range(nlo[k], nhi[k]):
                if c != k:
                    e = q[c] - qstar[c]
                    dnew += e * e
            d += dnew - dold
        if (n & 0xFFFF) == 0xFFFF:
            d = _sq_dist(q, qstar)
        if d <= thr * (1.0 + 1e-9):
            d = _sq_dist(q, qstar)
            if d <= thr:
                return n
    return -1
