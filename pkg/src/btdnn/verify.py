"""Self-contained oracle suites: independent re-computations of the math
that the package must get right, runnable via ``btdnn verify``.

Oracles here deliberately avoid the production code paths they check:
path sums come from exhaustive DFS enumeration, KL values from
Gauss-Hermite quadrature, gradients from central finite differences.
"""

from collections import defaultdict

import numpy as np

from .bayes import (BayesDropoutConfig, GaussianVariational, NoiseStream,
                    kl_bayes_dropout, kl_gaussian)
from .corpus import run_length_collapse
from .criterion import (CriterionConfig, SequenceGraph,
                        build_denominator_graph, build_numerator_graph,
                        forward_backward, mmi_loss_and_grad)
from .grad import Param, Tape
from .kernels import NEG_INF
from .tdnn import TdnnStack, forward_tape, sample_layer_noise
from .trainer import TrainConfig, batch_objective, evaluate_batch


# ---------------------------------------------------------------------------
# oracle primitives
# ---------------------------------------------------------------------------

def enumerate_paths(graph, n_frames):
    """All accepting paths of length ``n_frames`` as (labels, log_weight),
    by depth-first search; includes start and final weights."""
    by_src = defaultdict(list)
    for e in range(graph.n_arcs):
        by_src[int(graph.arc_src[e])].append(e)
    out = []

    def walk(state, t, labels, weight):
        if t == n_frames:
            f = graph.final_logw[state]
            if f > NEG_INF:
                out.append((tuple(labels), weight + f))
            return
        for e in by_src[state]:
            walk(int(graph.arc_dst[e]), t + 1,
                 labels + [int(graph.arc_label[e])],
                 weight + graph.arc_logw[e])

    for s in np.flatnonzero(graph.start_logw > NEG_INF):
        walk(int(s), 0, [], float(graph.start_logw[s]))
    return out


def enum_log_total_and_occ(graph, scores, k):
    """Path-enumeration counterpart of :func:`forward_backward`."""
    paths = enumerate_paths(graph, scores.shape[0])
    if not paths:
        return NEG_INF, np.zeros_like(scores)
    logs = np.array([w + k * sum(scores[t, lab]
                                 for t, lab in enumerate(labels))
                     for labels, w in paths])
    m = logs.max()
    total = m + np.log(np.exp(logs - m).sum())
    occ = np.zeros_like(scores)
    for (labels, _), lw in zip(paths, logs):
        p = np.exp(lw - total)
        for t, lab in enumerate(labels):
            occ[t, lab] += p
    return float(total), occ


def gauss_hermite_kl(mu, sigma, prior_mu, prior_sigma, n_nodes=48):
    """KL(N(mu, sigma^2) || N(prior_mu, prior_sigma^2)) by quadrature."""
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    x = mu + np.sqrt(2.0) * sigma * nodes
    log_q = -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) \
        - 0.5 * np.log(2 * np.pi)
    log_p = -0.5 * ((x - prior_mu) / prior_sigma) ** 2 \
        - np.log(prior_sigma) - 0.5 * np.log(2 * np.pi)
    return float(np.sum(weights * (log_q - log_p)) / np.sqrt(np.pi))


def central_difference(fn, array, index, eps=1e-6):
    old = array[index]
    array[index] = old + eps
    up = fn()
    array[index] = old - eps
    down = fn()
    array[index] = old
    return (up - down) / (2.0 * eps)


def grad_rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(1.0, abs(analytic))


# ---------------------------------------------------------------------------
# shared toy fixtures
# ---------------------------------------------------------------------------

def toy_batch(seed=0, n_utts=2, n_frames=6, feat_dim=3, n_labels=2):
    """A tiny batch plus uniform bigram for objective-level checks."""
    rng = np.random.default_rng([seed, 17])
    utts = []
    for i in range(n_utts):
        feats = rng.standard_normal((n_frames, feat_dim))
        align = rng.integers(1, n_labels + 1, size=n_frames)
        utts.append((feats, align))
    bigram = np.full((n_labels + 1, n_labels + 1), -np.inf)
    bigram[:, 1:] = np.log(1.0 / n_labels)
    return utts, bigram


def toy_config(mode, seed=0):
    return TrainConfig(
        mode=mode, bayes_layers=frozenset({1}), seed=seed,
        hidden=5, bottleneck=3, offsets=((-1, 0), (0, 1)), latent_dim=2,
        prior_sigma=0.5, mc_samples=1,
        criterion=CriterionConfig(acoustic_scale=1.0, f_smooth_lambda=0.1,
                                  l2_weight=0.01))


class _BatchObjective:
    """Frozen-noise objective over a toy batch for finite differencing."""

    def __init__(self, mode, seed=0):
        from .corpus import Utterance
        self.cfg = toy_config(mode, seed)
        raw, bigram = toy_batch(seed)
        self.stack = TdnnStack.build(
            3, bigram.shape[0], hidden=self.cfg.hidden,
            bottleneck=self.cfg.bottleneck, offsets=self.cfg.offsets,
            mode=mode, bayes_layers=self.cfg.bayes_layers,
            latent_dim=self.cfg.latent_dim, prior_sigma=self.cfg.prior_sigma,
            seed=seed)
        # make the posteriors sit away from their priors so KL terms bite
        drift = np.random.default_rng([seed, 23])
        for p in self.stack.trainable_params():
            p.value = p.value + 0.05 * drift.standard_normal(p.value.shape)
        self.den = build_denominator_graph(bigram)
        self.batch = [
            (i, Utterance(f"toy{i}", feats, align,
                          run_length_collapse(align)),
             build_numerator_graph(align, bigram))
            for i, (feats, align) in enumerate(raw)]
        self.noise = NoiseStream(seed)
        self.kl_scale = 0.5

    def value(self):
        return batch_objective(self.stack, self.batch, self.den, self.cfg,
                               self.noise, step=1, kl_scale=self.kl_scale)

    def gradients(self):
        _, grads = evaluate_batch(self.stack, self.batch, self.den, self.cfg,
                                  self.noise, step=1, kl_scale=self.kl_scale,
                                  want_grads=True)
        return grads


def check_mode_gradients(mode, *, n_params=6, seed=0, tol=1e-4, rng=None):
    """Finite-difference a random selection of trainable entries of a toy
    2-layer net in ``mode``; returns the worst relative error seen."""
    prob = _BatchObjective(mode, seed)
    grads = prob.gradients()
    rng = rng or np.random.default_rng([seed, 5])
    params = [p for p in prob.stack.trainable_params()]
    worst = 0.0
    checked = 0
    while checked < n_params:
        p = params[int(rng.integers(len(params)))]
        flat_index = int(rng.integers(p.value.size))
        index = np.unravel_index(flat_index, p.value.shape)
        numeric = central_difference(prob.value, p.value, index)
        analytic = float(np.asarray(grads[p.name])[index])
        worst = max(worst, grad_rel_error(analytic, numeric))
        checked += 1
    return worst


def random_graph(rng, n_states, n_labels, n_frames):
    """A random connected graph that accepts at least one length-T path."""
    while True:
        arcs = []
        for src in range(n_states):
            for dst in range(n_states):
                if rng.random() < 0.55:
                    lab = int(rng.integers(1, n_labels + 1))
                    arcs.append((src, dst, lab,
                                 float(rng.normal(scale=0.7))))
        if not arcs:
            continue
        starts = {int(rng.integers(n_states))}
        finals = {int(s): float(rng.normal(scale=0.3))
                  for s in rng.choice(n_states,
                                      size=int(rng.integers(1, n_states + 1)),
                                      replace=False)}
        try:
            graph = SequenceGraph.create(n_states, arcs, starts, finals)
        except Exception:
            continue
        if enumerate_paths(graph, n_frames):
            return graph


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def suite_grad_check(quick=True):
    results = []
    modes = ("tdnn", "b-tdnn", "bd-tdnn", "gp0", "gp1", "gp2", "gp3",
             "v-tdnn")
    n = 4 if quick else 8
    for mode in modes:
        worst = check_mode_gradients(mode, n_params=n)
        results.append((f"grad-check[{mode}]", worst <= 1e-4,
                        f"worst rel err {worst:.2e}"))
    return results


def suite_kl_check(n_cases=60):
    results = []
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(n_cases):
        mu = float(rng.normal(scale=2.0))
        sigma = float(np.exp(rng.normal(scale=0.7)))
        pmu = float(rng.normal(scale=2.0))
        psig = float(np.exp(rng.normal(scale=0.7)))
        q = GaussianVariational(
            Param("q.mu", np.array([[mu]])), Param("q.rho",
                                                   np.log([[sigma]])),
            Param("q.prior_mu", np.array([[pmu]]), trainable=False),
            Param("q.prior_sigma", np.array([[psig]]), trainable=False))
        closed = kl_gaussian(q)
        quad = gauss_hermite_kl(mu, sigma, pmu, psig)
        worst = max(worst, abs(closed - quad))
    results.append(("kl-check[quadrature]", worst <= 1e-8,
                    f"worst |closed - quad| {worst:.2e}"))

    q = GaussianVariational(
        Param("q.mu", np.array([[0.3, -1.2]])),
        Param("q.rho", np.log([[0.8]])),
        Param("q.prior_mu", np.array([[0.3, -1.2]]), trainable=False),
        Param("q.prior_sigma", np.array([[0.8]]), trainable=False))
    self_kl = abs(kl_gaussian(q))
    results.append(("kl-check[self]", self_kl <= 1e-12,
                    f"KL(q||q) = {self_kl:.2e}"))

    cfg = BayesDropoutConfig(keep_weight=1.0, sigma1=np.exp(-3.0))
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        mu = rng.normal(size=(3, 4))
        q = GaussianVariational(
            Param("q.mu", mu), Param("q.rho", rng.normal(size=(3, 1)) - 1.0),
            Param("q.prior_mu", rng.normal(size=(3, 4)), trainable=False),
            Param("q.prior_sigma", np.exp(rng.normal(size=(3, 1)) * 0.3),
                  trainable=False))
        worst = max(worst, abs(kl_bayes_dropout(q, cfg) - kl_gaussian(q)))
    results.append(("kl-check[mixture-a1]", worst <= 1e-10,
                    f"worst |mixture - gaussian| {worst:.2e}"))
    return results


def suite_fb_check(n_cases=60, seed=3):
    rng = np.random.default_rng(seed)
    worst_total = 0.0
    worst_occ = 0.0
    worst_grad = 0.0
    cfg = CriterionConfig(acoustic_scale=1.0, f_smooth_lambda=0.0)
    for _ in range(n_cases):
        n_labels = int(rng.integers(2, 4))
        n_frames = int(rng.integers(1, 7))
        graph = random_graph(rng, int(rng.integers(2, 5)), n_labels, n_frames)
        scores = rng.normal(size=(n_frames, n_labels + 1))
        total, occ = forward_backward(graph, scores, 1.0)
        e_total, e_occ = enum_log_total_and_occ(graph, scores, 1.0)
        worst_total = max(worst_total, abs(total - e_total))
        worst_occ = max(worst_occ, float(np.abs(occ - e_occ).max()))

    utts, bigram = toy_batch(seed, n_utts=1, n_frames=4, n_labels=2)
    feats, align = utts[0]
    scores = np.random.default_rng(1).normal(size=(4, 3))
    num = build_numerator_graph(align, bigram)
    den = build_denominator_graph(bigram)
    _, grad = mmi_loss_and_grad(num, den, scores, cfg)
    for t in range(scores.shape[0]):
        for j in range(scores.shape[1]):
            numeric = central_difference(
                lambda: mmi_loss_and_grad(num, den, scores, cfg)[0],
                scores, (t, j))
            worst_grad = max(worst_grad,
                             abs(grad[t, j] - numeric)
                             / max(1.0, abs(grad[t, j])))
    return [
        ("fb-check[log-total]", worst_total <= 1e-10,
         f"worst |dp - enum| {worst_total:.2e}"),
        ("fb-check[occupancy]", worst_occ <= 1e-10,
         f"worst occ err {worst_occ:.2e}"),
        ("fb-check[mmi-grad]", worst_grad <= 1e-5,
         f"worst rel err {worst_grad:.2e}"),
    ]


def suite_reduction_check(seed=11):
    results = []
    utts, bigram = toy_batch(seed, n_utts=1, n_frames=5, feat_dim=3,
                             n_labels=2)
    feats, _ = utts[0]
    build = dict(hidden=4, bottleneck=None, offsets=((-1, 0), (0, 1)),
                 bayes_layers=frozenset({1}), prior_sigma=0.5, seed=seed)

    def tape_scores(stack, noise):
        tape = Tape()
        samples = sample_layer_noise(stack, noise, step=1)
        node, _ = forward_tape(stack, tape, feats, samples=samples,
                               noise=noise, step=1, seq=0)
        return node.value

    plain = TdnnStack.build(3, 4, mode="tdnn", **build)
    bayes = TdnnStack.build(3, 4, mode="b-tdnn", **build)
    for layer in (bayes.layers[0],):
        layer.w_q.mu.value = plain.layers[0].w.value.copy()
        layer.w_q.rho.value = np.full_like(layer.w_q.rho.value, -np.inf)
    diff = np.abs(tape_scores(bayes, NoiseStream(seed))
                  - tape_scores(plain, NoiseStream(seed))).max()
    results.append(("reduction-check[sigma0]", diff == 0.0,
                    f"max |b-tdnn(sigma=0) - tdnn| = {diff:.2e}"))

    bd = TdnnStack.build(3, 4, mode="bd-tdnn",
                         dropout=BayesDropoutConfig(keep_weight=1.0),
                         **build)
    b2 = TdnnStack.build(3, 4, mode="b-tdnn", **build)
    bd.layers[0].w_q.mu.value = b2.layers[0].w_q.mu.value.copy()
    bd.layers[0].w_q.rho.value = b2.layers[0].w_q.rho.value.copy()
    diff = np.abs(tape_scores(bd, NoiseStream(seed))
                  - tape_scores(b2, NoiseStream(seed))).max()
    results.append(("reduction-check[bd-a1]", diff <= 1e-10,
                    f"max |bd(a=1) - b| = {diff:.2e}"))

    gp = TdnnStack.build(3, 4, mode="gp0", **build)
    gp.layers[0].w.value = plain.layers[0].w.value.copy()
    diff = np.abs(tape_scores(gp, NoiseStream(seed))
                  - tape_scores(plain, NoiseStream(seed))).max()
    results.append(("reduction-check[gp0-relu]", diff == 0.0,
                    f"max |gp0(0,0,1) - tdnn| = {diff:.2e}"))
    return results


def run_all(quick=True):
    """Run every suite; returns (all_passed, result rows)."""
    rows = []
    rows.extend(suite_grad_check(quick=quick))
    rows.extend(suite_kl_check())
    rows.extend(suite_fb_check())
    rows.extend(suite_reduction_check())
    return all(ok for _, ok, _ in rows), rows
