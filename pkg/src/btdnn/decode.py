"""Viterbi decoding over the bigram graph and label-error-rate scoring."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GraphError, ShapeError
from .kernels import NEG_INF, viterbi_pass
from .corpus import run_length_collapse
from .tdnn import forward_det, posterior_mean_collapse


@dataclass(frozen=True)
class Hypothesis:
    utt_id: str
    labels: tuple          # run-length collapsed
    log_score: float


def viterbi_decode(graph, log_scores, k, utt_id=""):
    """Best-path labels under the graph, run-length collapsed.

    Ties resolve deterministically toward the lowest label id (the graph
    stores arcs in that order and the kernel keeps the first maximum).
    """
    log_scores = np.ascontiguousarray(log_scores, dtype=np.float64)
    if log_scores.ndim != 2 or log_scores.shape[0] < 1:
        raise ShapeError("scores must be a T x D matrix with T >= 1",
                         log_scores.shape)
    if graph.max_label() >= log_scores.shape[1]:
        raise ShapeError("graph labels exceed the score dimension",
                         (graph.max_label(),), log_scores.shape)
    log_best, frame_labels = viterbi_pass(
        graph.n_states, graph.arc_src, graph.arc_dst, graph.arc_label,
        graph.arc_logw, graph.start_logw, graph.final_logw, log_scores,
        float(k))
    if log_best == NEG_INF:
        raise GraphError(
            f"graph accepts no path of length {log_scores.shape[0]}")
    return Hypothesis(utt_id=utt_id,
                      labels=run_length_collapse(frame_labels),
                      log_score=float(log_best))


def label_error_rate(ref, hyp):
    """Levenshtein distance over |ref| plus its (sub, ins, del) counts.

    Among equal-cost alignments the one with the fewest insertions plus
    deletions wins (substitutions preferred), which also makes the counts
    unique: del - ins is pinned by the length difference.
    """
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise DataError("empty reference")

    # cells hold (cost, ins + del), minimized lexicographically
    prev = [(j, j) for j in range(len(hyp) + 1)]
    for i in range(1, len(ref) + 1):
        cur = [(i, i)]
        for j in range(1, len(hyp) + 1):
            sub_cost = prev[j - 1][0] + (ref[i - 1] != hyp[j - 1])
            cand = min((sub_cost, prev[j - 1][1]),
                       (prev[j][0] + 1, prev[j][1] + 1),
                       (cur[j - 1][0] + 1, cur[j - 1][1] + 1))
            cur.append(cand)
        prev = cur

    cost, insdel = prev[-1]
    diff = len(ref) - len(hyp)
    dels = (insdel + diff) // 2
    ins = insdel - dels
    subs = cost - insdel
    return cost / len(ref), (subs, ins, dels)


def decode_corpus(stack, utterances, graph, k):
    """Posterior-mean decode of every utterance (zero random draws)."""
    collapsed = posterior_mean_collapse(stack)
    return [viterbi_decode(graph, forward_det(collapsed, utt.features), k,
                           utt_id=utt.utt_id)
            for utt in utterances]


def evaluate_corpus(stack, utterances, graph, k):
    """Corpus-level label error rate plus per-utterance report rows."""
    rows = []
    total_err = 0
    total_ref = 0
    for utt, hyp in zip(utterances, decode_corpus(stack, utterances, graph, k)):
        rate, (subs, ins, dels) = label_error_rate(utt.transcript, hyp.labels)
        errors = subs + ins + dels
        rows.append((utt.utt_id, len(utt.transcript), errors, rate))
        total_err += errors
        total_ref += len(utt.transcript)
    overall = total_err / total_ref if total_ref else 0.0
    return overall, rows


def score_report(rows):
    """CSV text: one row per utterance plus an ALL summary row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["utt_id", "ref_len", "errors", "rate"])
    total_err = 0
    total_ref = 0
    for utt_id, ref_len, errors, rate in rows:
        writer.writerow([utt_id, ref_len, errors, f"{rate:.6f}"])
        total_err += errors
        total_ref += ref_len
    overall = total_err / total_ref if total_ref else 0.0
    writer.writerow(["ALL", total_ref, total_err, f"{overall:.6f}"])
    return buf.getvalue()
