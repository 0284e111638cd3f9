"""Pure numpy implementations of the brute-force kernels.

Used when the compiled ``_kernels`` extension is unavailable or disabled with
``DENSE_ALIGN_PURE=1``. Signatures and results match the compiled versions.
"""
import itertools

import numpy as np

_BLOCK = 1024


def enumerate_paths(transition, starts, n_actions, horizon):
    """All (state, action) paths of length ``horizon`` from each start state.

    Paths are ordered by start (as given) then by action sequence in
    lexicographic order with the first action most significant.
    """
    transition = np.asarray(transition, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    seqs = np.array(list(itertools.product(range(n_actions), repeat=horizon)), dtype=np.int64)
    seqs = seqs.reshape(-1, horizon)
    n_seq = seqs.shape[0]
    states = np.empty((starts.size * n_seq, horizon), dtype=np.int64)
    actions = np.tile(seqs, (starts.size, 1))
    for k, s0 in enumerate(starts):
        block = states[k * n_seq:(k + 1) * n_seq]
        s = np.full(n_seq, s0, dtype=np.int64)
        for i in range(horizon):
            block[:, i] = s
            s = transition[s, seqs[:, i]]
    return states, actions


def discounted_path_sums(table, states, actions, gamma):
    """sum_i gamma**i * table[states[:, i], actions[:, i]] for every path."""
    table = np.asarray(table, dtype=np.float64)
    out = np.zeros(states.shape[0])
    w = 1.0
    for i in range(states.shape[1]):
        out += w * table[states[:, i], actions[:, i]]
        w *= gamma
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def min_pairwise_gap(score, log_z, ratio_sum, C):
    """Smallest (exact - bound) Bradley-Terry gap over eligible ordered pairs.

    A pair (i, j) is eligible when ``score[i] > score[j]`` and
    ``log_z[i] >= log_z[j]``. The exact probability is
    ``sigmoid(score[i] - score[j])``; the bound drops the partition terms,
    ``sigmoid(C * (ratio_sum[i] - ratio_sum[j]))``.

    Returns ``(min_gap, n_pairs)``; ``min_gap`` is ``inf`` when no pair is eligible.
    """
    score = np.asarray(score, dtype=np.float64)
    log_z = np.asarray(log_z, dtype=np.float64)
    ratio_sum = np.asarray(ratio_sum, dtype=np.float64)
    m = score.size
    best = np.inf
    count = 0
    for lo in range(0, m, _BLOCK):
        hi = min(lo + _BLOCK, m)
        ds = score[lo:hi, None] - score[None, :]
        ok = (ds > 0) & (log_z[lo:hi, None] >= log_z[None, :])
        if not ok.any():
            continue
        dr = C * (ratio_sum[lo:hi, None] - ratio_sum[None, :])
        gap = _sigmoid(ds[ok]) - _sigmoid(dr[ok])
        count += int(ok.sum())
        best = min(best, float(gap.min()))
    return best, count
