"""Hot numeric kernels: log-space forward-backward and Viterbi over arc lists.

Both kernels exist twice: a numba ``@njit`` version and a pure-numpy
fallback.  The active implementation is chosen at import time; set
``BTDNN_NUMBA=0`` (or ``false``/``off``/``numpy``) in the environment to
force the numpy path.  ``benchmarks/bench_kernels.py`` times both.

Graph encoding: ``n_states`` states, arcs as parallel arrays
``(arc_src, arc_dst, arc_label, arc_logw)``.  Every arc consumes exactly one
frame and emits one label.  ``start_logw``/``final_logw`` hold per-state
start/final log-weights, ``-inf`` for non-members.  ``scores`` is the
``T x D`` matrix of raw model outputs, scaled by the acoustic factor ``k``.

Arc order matters twice: log-sum accumulation order (bit determinism within
one backend) and Viterbi tie-breaking (first maximum wins, so callers sort
arcs by label before src/dst to prefer the lowest label id on ties).
"""

import os

import numpy as np

NEG_INF = -np.inf


def _numba_requested():
    flag = os.environ.get("BTDNN_NUMBA", "1").strip().lower()
    return flag not in {"0", "false", "off", "numpy"}


# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------

def fb_pass_numpy(n_states, arc_src, arc_dst, arc_label, arc_logw,
                  start_logw, final_logw, scores, k):
    """Forward-backward over the arc list.

    Returns ``(log_total, occ)`` where ``occ[t, j]`` is the posterior
    probability of emitting label ``j`` at frame ``t``.  ``log_total`` is
    ``-inf`` when the graph accepts no path of length ``T``.
    """
    T = scores.shape[0]
    alpha = np.full((T + 1, n_states), NEG_INF)
    beta = np.full((T + 1, n_states), NEG_INF)
    alpha[0] = start_logw
    beta[T] = final_logw

    for t in range(T):
        emit = arc_logw + k * scores[t, arc_label]
        np.logaddexp.at(alpha[t + 1], arc_dst, alpha[t, arc_src] + emit)
    for t in range(T - 1, -1, -1):
        emit = arc_logw + k * scores[t, arc_label]
        np.logaddexp.at(beta[t], arc_src, emit + beta[t + 1, arc_dst])

    with np.errstate(invalid="ignore"):
        total = np.logaddexp.reduce(alpha[T] + final_logw)
    occ = np.zeros_like(scores)
    if total == NEG_INF:
        return NEG_INF, occ

    for t in range(T):
        emit = arc_logw + k * scores[t, arc_label]
        post = alpha[t, arc_src] + emit + beta[t + 1, arc_dst] - total
        np.add.at(occ[t], arc_label, np.exp(post))
    return float(total), occ


def viterbi_pass_numpy(n_states, arc_src, arc_dst, arc_label, arc_logw,
                       start_logw, final_logw, scores, k):
    """Best path over the arc list.

    Returns ``(log_best, labels)`` with one label per frame.  Ties take the
    first maximising arc in storage order.  ``log_best`` is ``-inf`` (and
    ``labels`` meaningless) when no path accepts.
    """
    T = scores.shape[0]
    n_arcs = arc_src.shape[0]
    delta = np.array(start_logw, dtype=np.float64, copy=True)
    back = np.zeros((T, n_states), dtype=np.int64)
    arc_idx = np.arange(n_arcs)

    for t in range(T):
        cand = delta[arc_src] + arc_logw + k * scores[t, arc_label]
        new = np.full(n_states, NEG_INF)
        np.maximum.at(new, arc_dst, cand)
        win = (cand > NEG_INF) & (cand == new[arc_dst])
        first = np.full(n_states, n_arcs, dtype=np.int64)
        np.minimum.at(first, arc_dst[win], arc_idx[win])
        back[t] = np.where(first < n_arcs, first, -1)
        delta = new

    scored = delta + final_logw
    best_state = int(np.argmax(scored))
    log_best = float(scored[best_state])
    labels = np.zeros(T, dtype=np.int64)
    if log_best == NEG_INF:
        return NEG_INF, labels

    state = best_state
    for t in range(T - 1, -1, -1):
        e = back[t, state]
        labels[t] = arc_label[e]
        state = arc_src[e]
    return log_best, labels


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

HAVE_NUMBA = False
if _numba_requested():
    try:
        from numba import njit
        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - environment without numba
        HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _lae(a, b):
        # logaddexp that tolerates -inf on either side
        if a < b:
            a, b = b, a
        if b == NEG_INF:
            return a
        return a + np.log1p(np.exp(b - a))

    @njit(cache=True)
    def fb_pass_numba(n_states, arc_src, arc_dst, arc_label, arc_logw,
                      start_logw, final_logw, scores, k):
        T = scores.shape[0]
        n_arcs = arc_src.shape[0]
        alpha = np.full((T + 1, n_states), NEG_INF)
        beta = np.full((T + 1, n_states), NEG_INF)
        alpha[0] = start_logw
        beta[T] = final_logw

        for t in range(T):
            for e in range(n_arcs):
                a = alpha[t, arc_src[e]]
                if a == NEG_INF:
                    continue
                v = a + arc_logw[e] + k * scores[t, arc_label[e]]
                alpha[t + 1, arc_dst[e]] = _lae(alpha[t + 1, arc_dst[e]], v)
        for t in range(T - 1, -1, -1):
            for e in range(n_arcs):
                b = beta[t + 1, arc_dst[e]]
                if b == NEG_INF:
                    continue
                v = arc_logw[e] + k * scores[t, arc_label[e]] + b
                beta[t, arc_src[e]] = _lae(beta[t, arc_src[e]], v)

        total = NEG_INF
        for s in range(n_states):
            total = _lae(total, alpha[T, s] + final_logw[s])
        occ = np.zeros_like(scores)
        if total == NEG_INF:
            return NEG_INF, occ

        for t in range(T):
            for e in range(n_arcs):
                a = alpha[t, arc_src[e]]
                b = beta[t + 1, arc_dst[e]]
                if a == NEG_INF or b == NEG_INF:
                    continue
                v = a + arc_logw[e] + k * scores[t, arc_label[e]] + b
                occ[t, arc_label[e]] += np.exp(v - total)
        return total, occ

    @njit(cache=True)
    def viterbi_pass_numba(n_states, arc_src, arc_dst, arc_label, arc_logw,
                           start_logw, final_logw, scores, k):
        T = scores.shape[0]
        n_arcs = arc_src.shape[0]
        delta = start_logw.copy()
        back = np.full((T, n_states), -1, dtype=np.int64)

        for t in range(T):
            new = np.full(n_states, NEG_INF)
            for e in range(n_arcs):
                d = delta[arc_src[e]]
                if d == NEG_INF:
                    continue
                v = d + arc_logw[e] + k * scores[t, arc_label[e]]
                if v > new[arc_dst[e]]:
                    new[arc_dst[e]] = v
                    back[t, arc_dst[e]] = e
            delta = new

        best_state = 0
        log_best = NEG_INF
        for s in range(n_states):
            v = delta[s] + final_logw[s]
            if v > log_best:
                log_best = v
                best_state = s
        labels = np.zeros(T, dtype=np.int64)
        if log_best == NEG_INF:
            return NEG_INF, labels

        state = best_state
        for t in range(T - 1, -1, -1):
            e = back[t, state]
            labels[t] = arc_label[e]
            state = arc_src[e]
        return log_best, labels

    fb_pass = fb_pass_numba
    viterbi_pass = viterbi_pass_numba
else:
    fb_pass = fb_pass_numpy
    viterbi_pass = viterbi_pass_numpy


def backend():
    """Name of the active kernel implementation: 'numba' or 'numpy'."""
    return "numba" if HAVE_NUMBA else "numpy"
