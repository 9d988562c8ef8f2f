"""Hot inner loops, each with a numba version and a pure-numpy version.

The public names dispatch on :data:`mixexperts._accel.USE_NUMBA`. Both
implementations are importable directly (``numba_impl`` / ``numpy_impl``)
so tests and the benchmark can compare them.

Kernels never draw random numbers themselves: callers pass uniforms drawn
from their own ``numpy.random.Generator``, so results do not depend on which
path is active.

Ranking arrays are ``n x M`` int arrays of 0-based candidate indices padded
with ``-1``. Stage ``s`` of ballot ``i`` is *active* when a candidate is
chosen there from a choice set of more than one candidate, i.e.
``s < m_i`` and ``s < M - 1``.
"""

from types import SimpleNamespace

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------- numpy path


def _sample_categorical_np(logp, u):
    logp = np.asarray(logp, dtype=float)
    m = logp.max(axis=1, keepdims=True)
    c = np.cumsum(np.exp(logp - m), axis=1)
    z = (c < (u * c[:, -1])[:, None]).sum(axis=1)
    return np.minimum(z, logp.shape[1] - 1).astype(np.int64)


def _ballot_stage_masks(ballots):
    """Return (active n x S, chosen n x S, avail n x S x M)."""
    n, M = ballots.shape
    ranked = ballots >= 0
    chosen = np.where(ranked, ballots, 0)
    onehot = (chosen[:, :, None] == np.arange(M)) & ranked[:, :, None]
    before = np.cumsum(onehot, axis=1) - onehot
    avail = (1 - before).astype(float)
    active = ranked.copy()
    active[:, M - 1] = False
    return active, chosen, avail


def _pl_loglik_np(ballots, p):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    active, chosen, avail = _ballot_stage_masks(ballots)
    tail = np.einsum("nsm,gm->nsg", avail, p)
    num = p.T[chosen]
    with np.errstate(divide="ignore"):
        terms = np.log(num) - np.log(tail)
    return np.where(active[:, :, None], terms, 0.0).sum(axis=1)


def _pl_stage_tails_np(ballots, p):
    active, _, avail = _ballot_stage_masks(ballots)
    return np.where(active, avail @ np.asarray(p, dtype=float), 0.0)


def _pl_avail_weighted_sum_np(ballots, v):
    active, _, avail = _ballot_stage_masks(ballots)
    return np.einsum("ns,nsm->m", np.where(active, v, 0.0), avail)


def _pl_win_counts_np(ballots, w):
    active, chosen, _ = _ballot_stage_masks(ballots)
    M = ballots.shape[1]
    out = np.zeros(M)
    np.add.at(out, chosen[active], np.broadcast_to(np.asarray(w, float)[:, None], chosen.shape)[active])
    return out


def _transition_counts_np(series, hist, J, K):
    n, T = hist.shape
    counts = np.zeros((n, J, K))
    rows = np.repeat(np.arange(n), T)
    np.add.at(counts, (rows, hist.ravel(), series[:, 1:].ravel()), 1.0)
    return counts


numpy_impl = SimpleNamespace(
    sample_categorical=_sample_categorical_np,
    pl_loglik=_pl_loglik_np,
    pl_stage_tails=_pl_stage_tails_np,
    pl_avail_weighted_sum=_pl_avail_weighted_sum_np,
    pl_win_counts=_pl_win_counts_np,
    transition_counts=_transition_counts_np,
)

# ---------------------------------------------------------------- numba path


@njit
def _sample_categorical_nb(logp, u):
    n, G = logp.shape
    z = np.empty(n, dtype=np.int64)
    c = np.empty(G)
    for i in range(n):
        m = logp[i, 0]
        for g in range(1, G):
            if logp[i, g] > m:
                m = logp[i, g]
        acc = 0.0
        for g in range(G):
            acc += np.exp(logp[i, g] - m)
            c[g] = acc
        thresh = u[i] * c[G - 1]
        k = 0
        for g in range(G):
            if c[g] < thresh:
                k += 1
        z[i] = min(k, G - 1)
    return z


@njit
def _ballot_length(row):
    m = 0
    for s in range(row.shape[0]):
        if row[s] >= 0:
            m += 1
    return m


@njit
def _stage_tails_row(row, m, p, tails):
    # tails[s] = sum of p over candidates not chosen before stage s
    M = row.shape[0]
    ranked = np.zeros(M, dtype=np.bool_)
    for s in range(m):
        ranked[row[s]] = True
    unranked = 0.0
    for k in range(M):
        if not ranked[k]:
            unranked += p[k]
    acc = unranked
    for s in range(m - 1, -1, -1):
        acc += p[row[s]]
        tails[s] = acc


@njit
def _pl_loglik_nb(ballots, p):
    n, M = ballots.shape
    G = p.shape[0]
    out = np.zeros((n, G))
    tails = np.empty(M)
    for i in range(n):
        row = ballots[i]
        m = _ballot_length(row)
        for g in range(G):
            _stage_tails_row(row, m, p[g], tails)
            acc = 0.0
            for s in range(min(m, M - 1)):
                acc += np.log(p[g, row[s]]) - np.log(tails[s])
            out[i, g] = acc
    return out


@njit
def _pl_stage_tails_nb(ballots, p):
    n, M = ballots.shape
    out = np.zeros((n, M))
    tails = np.empty(M)
    for i in range(n):
        row = ballots[i]
        m = _ballot_length(row)
        _stage_tails_row(row, m, p, tails)
        for s in range(min(m, M - 1)):
            out[i, s] = tails[s]
    return out


@njit
def _pl_avail_weighted_sum_nb(ballots, v):
    n, M = ballots.shape
    out = np.zeros(M)
    for i in range(n):
        row = ballots[i]
        m = _ballot_length(row)
        # candidates available at stage s: all minus those chosen before s
        acc = 0.0
        for s in range(min(m, M - 1)):
            acc += v[i, s]
        for k in range(M):
            out[k] += acc
        # remove contributions from stages after each candidate was chosen
        for s in range(m):
            k = row[s]
            later = 0.0
            for t in range(s + 1, min(m, M - 1)):
                later += v[i, t]
            out[k] -= later
    return out


@njit
def _pl_win_counts_nb(ballots, w):
    n, M = ballots.shape
    out = np.zeros(M)
    for i in range(n):
        row = ballots[i]
        m = _ballot_length(row)
        for s in range(min(m, M - 1)):
            out[row[s]] += w[i]
    return out


@njit
def _transition_counts_nb(series, hist, J, K):
    n, T = hist.shape
    counts = np.zeros((n, J, K))
    for i in range(n):
        for t in range(T):
            counts[i, hist[i, t], series[i, t + 1]] += 1.0
    return counts


def _as_int(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _as_float(a):
    return np.ascontiguousarray(a, dtype=np.float64)


numba_impl = SimpleNamespace(
    sample_categorical=lambda logp, u: _sample_categorical_nb(_as_float(logp), _as_float(u)),
    pl_loglik=lambda ballots, p: _pl_loglik_nb(_as_int(ballots), _as_float(np.atleast_2d(p))),
    pl_stage_tails=lambda ballots, p: _pl_stage_tails_nb(_as_int(ballots), _as_float(p)),
    pl_avail_weighted_sum=lambda ballots, v: _pl_avail_weighted_sum_nb(_as_int(ballots), _as_float(v)),
    pl_win_counts=lambda ballots, w: _pl_win_counts_nb(_as_int(ballots), _as_float(w)),
    transition_counts=lambda series, hist, J, K: _transition_counts_nb(
        _as_int(series), _as_int(hist), int(J), int(K)
    ),
)

_active = numba_impl if USE_NUMBA else numpy_impl

sample_categorical = _active.sample_categorical
pl_loglik = _active.pl_loglik
pl_stage_tails = _active.pl_stage_tails
pl_avail_weighted_sum = _active.pl_avail_weighted_sum
pl_win_counts = _active.pl_win_counts
transition_counts = _active.transition_counts

ballot_stage_masks = _ballot_stage_masks

BACKEND = "numba" if USE_NUMBA else "numpy"
