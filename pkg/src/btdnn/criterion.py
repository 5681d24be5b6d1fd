"""Sequence-discriminative criterion: label graphs, log-space
forward-backward, occupancy-difference gradients, and the loss breakdown.

The denominator is a label-level bigram graph (state 0 is the sentence
start, one state per label, every state final); the numerator is the linear
chain of the reference alignment.  All dynamic programming runs in the log
domain with no pruning.

Sign conventions, fixed here once: the trainer *ascends* the total
``total = mmi - sum(kl) + f_smooth_lambda * ce - l2_weight * l2`` where
``ce`` stores the *negated* frame cross-entropy (a log-likelihood), ``kl``
the batch-scaled per-layer divergences, and ``l2`` the plain sum of squared
weights.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, GraphError, ShapeError
from .kernels import NEG_INF, fb_pass


@dataclass(frozen=True)
class CriterionConfig:
    acoustic_scale: float = 1.0
    f_smooth_lambda: float = 0.1
    l2_weight: float = 0.0

    def __post_init__(self):
        if self.acoustic_scale <= 0:
            raise DataError("acoustic scale must be positive")
        if not 0.0 <= self.f_smooth_lambda <= 1.0:
            raise DataError("f_smooth_lambda must lie in [0, 1]")
        if self.l2_weight < 0:
            raise DataError("l2_weight must be non-negative")


@dataclass
class SequenceGraph:
    """Label graph over emitting arcs.

    Arcs are stored canonically sorted by (label, src, dst) so that log-sum
    accumulation order is reproducible and Viterbi ties resolve toward the
    lowest label id.
    """

    n_states: int
    arc_src: np.ndarray
    arc_dst: np.ndarray
    arc_label: np.ndarray
    arc_logw: np.ndarray
    start_logw: np.ndarray
    final_logw: np.ndarray

    @staticmethod
    def create(n_states, arcs, start_states, final_weights):
        """``arcs``: iterable of (src, dst, label, log_weight);
        ``final_weights``: mapping state -> final log-weight."""
        arcs = [(s, d, l, w) for (s, d, l, w) in arcs if w > NEG_INF]
        if not arcs:
            raise GraphError("graph has no arcs")
        arcs.sort(key=lambda a: (a[2], a[0], a[1]))
        src = np.array([a[0] for a in arcs], dtype=np.int64)
        dst = np.array([a[1] for a in arcs], dtype=np.int64)
        lab = np.array([a[2] for a in arcs], dtype=np.int64)
        logw = np.array([a[3] for a in arcs], dtype=np.float64)
        if lab.min() < 0:
            raise GraphError("arc labels must be non-negative")
        start_logw = np.full(n_states, NEG_INF)
        for s in start_states:
            start_logw[s] = 0.0
        final_logw = np.full(n_states, NEG_INF)
        for s, w in final_weights.items():
            final_logw[s] = w

        graph = SequenceGraph(n_states, src, dst, lab, logw,
                              start_logw, final_logw)
        graph._validate()
        return graph

    def _validate(self):
        reach = self.start_logw > NEG_INF
        if not reach.any():
            raise GraphError("graph has no start state")
        changed = True
        while changed:
            new = reach[self.arc_src]
            changed = bool(np.any(new & ~reach[self.arc_dst]))
            np.logical_or.at(reach, self.arc_dst, new)
        co = self.final_logw > NEG_INF
        if not co.any():
            raise GraphError("graph has no final state")
        changed = True
        while changed:
            new = co[self.arc_dst]
            changed = bool(np.any(new & ~co[self.arc_src]))
            np.logical_or.at(co, self.arc_src, new)
        dead = np.flatnonzero(~(reach & co))
        if dead.size:
            raise GraphError(f"states neither reachable nor co-reachable: "
                             f"{dead.tolist()}")

    @property
    def n_arcs(self):
        return self.arc_src.shape[0]

    def max_label(self):
        return int(self.arc_label.max())


def build_numerator_graph(alignment, bigram=None):
    """Linear chain accepting exactly ``alignment`` (one arc per frame).

    Arc weights default to 0; with ``bigram`` given they carry the same
    frame-level transition log-probabilities the denominator graph uses, so
    the two graphs share weights on the reference path.
    """
    alignment = np.asarray(alignment, dtype=np.int64)
    if alignment.size == 0:
        raise DataError("empty alignment")
    if alignment.min() < 1:
        raise DataError("alignment labels must be >= 1 (0 is reserved)")
    arcs = []
    prev = 0
    for t, lab in enumerate(alignment):
        w = 0.0 if bigram is None else float(bigram[prev, lab])
        arcs.append((t, t + 1, int(lab), w))
        prev = int(lab)
    n = alignment.size + 1
    return SequenceGraph.create(n, arcs, {0}, {n - 1: 0.0})


def build_denominator_graph(bigram):
    """Bigram graph over all label sequences.

    ``bigram[i, j]`` is ``log P(next = j | prev = i)`` with row 0 the
    sentence start; rows must normalize over columns >= 1 within 1e-9.
    State 0 is the start, state ``j`` means "last label was j", every state
    is final with weight 0.
    """
    bigram = np.asarray(bigram, dtype=np.float64)
    n = bigram.shape[0]
    if bigram.shape != (n, n) or n < 2:
        raise DataError(f"bigram table must be square with >= 2 rows, "
                        f"got {bigram.shape}")
    sums = _logsumexp(bigram[:, 1:], axis=1)
    if np.any(np.abs(sums) > 1e-9):
        raise DataError(f"bigram rows are not normalized: "
                        f"max |logsumexp| = {np.abs(sums).max():.3e}")
    arcs = [(i, j, j, float(bigram[i, j]))
            for i in range(n) for j in range(1, n)
            if bigram[i, j] > NEG_INF]
    return SequenceGraph.create(n, arcs, {0}, {s: 0.0 for s in range(n)})


def _logsumexp(x, axis=None):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def forward_backward(graph, log_scores, k):
    """Log path-sum and per-frame label occupancies.

    ``occ[t, j]`` is the posterior probability of emitting label ``j`` at
    frame ``t``; each row sums to 1.
    """
    log_scores = np.ascontiguousarray(log_scores, dtype=np.float64)
    if log_scores.ndim != 2 or log_scores.shape[0] < 1:
        raise ShapeError("scores must be a T x D matrix with T >= 1",
                         log_scores.shape)
    if graph.max_label() >= log_scores.shape[1]:
        raise ShapeError("graph labels exceed the score dimension",
                         (graph.max_label(),), log_scores.shape)
    total, occ = fb_pass(graph.n_states, graph.arc_src, graph.arc_dst,
                         graph.arc_label, graph.arc_logw, graph.start_logw,
                         graph.final_logw, log_scores, float(k))
    if total == NEG_INF:
        raise GraphError(
            f"graph accepts no path of length {log_scores.shape[0]}")
    return total, occ


def mmi_loss_and_grad(num, den, log_scores, cfg):
    """Sequence criterion value and its exact gradient.

    ``F = log_total(num) - log_total(den)``;
    ``dF/d score[t, j] = k * (occ_num[t, j] - occ_den[t, j])``.
    """
    k = cfg.acoustic_scale
    total_num, occ_num = forward_backward(num, log_scores, k)
    total_den, occ_den = forward_backward(den, log_scores, k)
    return total_num - total_den, k * (occ_num - occ_den)


def ce_loss_and_grad(log_scores, alignment):
    """Frame cross-entropy after a log-softmax over the output dimension.

    Returns the *sum* over frames and its gradient (softmax minus one-hot).
    """
    log_scores = np.asarray(log_scores, dtype=np.float64)
    alignment = np.asarray(alignment, dtype=np.int64)
    T = log_scores.shape[0]
    if alignment.shape != (T,):
        raise ShapeError("alignment length disagrees with scores",
                         alignment.shape, log_scores.shape)
    logz = _logsumexp(log_scores, axis=1)
    rows = np.arange(T)
    value = float(np.sum(logz - log_scores[rows, alignment]))
    grad = np.exp(log_scores - logz[:, None])
    grad[rows, alignment] -= 1.0
    return value, grad


@dataclass
class ElboBreakdown:
    """Per-step loss decomposition; see the module docstring for signs."""

    mmi_term: float
    kl_terms: dict = field(default_factory=dict)
    ce_term: float = 0.0
    l2_term: float = 0.0
    total: float = 0.0

    @property
    def kl_total(self):
        return float(sum(self.kl_terms.values()))


def combine(mmi_term, kl_terms, ce_term, l2_term, cfg):
    """Assemble the maximized objective from its parts."""
    total = (mmi_term - sum(kl_terms.values())
             + cfg.f_smooth_lambda * ce_term
             - cfg.l2_weight * l2_term)
    return ElboBreakdown(mmi_term=mmi_term, kl_terms=dict(kl_terms),
                         ce_term=ce_term, l2_term=l2_term, total=total)
