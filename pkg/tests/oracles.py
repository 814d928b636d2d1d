"""Independent reference implementations used by the tests."""

import itertools

import numpy as np

TIE_RTOL = 1e-12


def brute_force_window(w, dt):
    """Maximiser of sum(w dt) / sqrt(sum(dt)) over every non-empty subset.

    Near-equal values (relative 1e-12) are ties, resolved towards fewer
    segments and then the lexicographically smallest index tuple.  Returns
    ``((), 0.0)`` when no subset has a positive value.
    """
    w = np.asarray(w, float)
    dt = np.asarray(dt, float)
    n = len(w)
    scored = []
    for k in range(1, n + 1):
        for T in itertools.combinations(range(n), k):
            idx = list(T)
            scored.append((float(np.sum(w[idx] * dt[idx]) / np.sqrt(np.sum(dt[idx]))), T))
    best = max(v for v, _ in scored)
    if best <= 0:
        return (), 0.0
    ties = [T for v, T in scored if v >= best * (1 - TIE_RTOL)]
    return min(ties, key=lambda T: (len(T), T)), best


def enumerate_window(w, dt):
    """Vectorised version of :func:`brute_force_window` for up to ~22 segments.

    Scores every non-empty subset through a bit matrix of all masks, then
    applies the same tie rule to the near-optimal masks.
    """
    w = np.asarray(w, float)
    dt = np.asarray(dt, float)
    n = len(w)
    masks = np.arange(1, 2**n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(float)
    values = (bits @ (w * dt)) / np.sqrt(bits @ dt)
    best = values.max()
    if best <= 0:
        return (), 0.0
    tied = bits[values >= best * (1 - TIE_RTOL)].astype(bool)
    ties = [tuple(int(i) for i in np.flatnonzero(row)) for row in tied]
    return min(ties, key=lambda T: (len(T), T)), float(best)
