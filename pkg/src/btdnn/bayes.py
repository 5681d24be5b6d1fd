"""Gaussian weight posteriors, dropout mixtures, and their ELBO calculus.

The variational family is a diagonal Gaussian ``N(mu, sigma^2)`` with the
variance tied across rows: ``rho`` stores one entry per input row and
``sigma = exp(rho)`` broadcasts over all hidden nodes of the layer.  The
``exp`` parameterization keeps ``sigma`` positive with an unconstrained
``rho``; the limit ``rho -> -inf`` gives ``sigma == 0.0`` exactly, which the
sampling path supports (the KL terms require strictly positive ``sigma``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .grad import Param

_MASK64 = (1 << 64) - 1


@dataclass
class GaussianVariational:
    """Per-layer weight posterior q(w) = N(mu, sigma^2) with its prior."""

    mu: Param
    rho: Param          # tied: shape (rows, 1); sigma = exp(rho)
    prior_mu: Param     # trainable=False
    prior_sigma: Param  # trainable=False, broadcastable to mu

    def sigma(self):
        return np.exp(self.rho.value)

    def params(self):
        return [self.mu, self.rho, self.prior_mu, self.prior_sigma]

    @staticmethod
    def create(name, mu, prior_mu, prior_sigma):
        """Build a posterior initialised at ``mu`` with ``sigma`` equal to the
        prior deviation (the bootstrap convention)."""
        mu = np.asarray(mu, dtype=np.float64)
        prior_sigma = np.broadcast_to(
            np.asarray(prior_sigma, dtype=np.float64), (mu.shape[0], 1)).copy()
        return GaussianVariational(
            mu=Param(f"{name}.mu", mu.copy()),
            rho=Param(f"{name}.rho", np.log(prior_sigma)),
            prior_mu=Param(f"{name}.prior_mu",
                           np.asarray(prior_mu, dtype=np.float64).copy(),
                           trainable=False),
            prior_sigma=Param(f"{name}.prior_sigma", prior_sigma,
                              trainable=False),
        )


@dataclass(frozen=True)
class BayesDropoutConfig:
    """Mixture posterior settings: keep weight ``a`` and the fixed deviation
    ``sigma1`` of the zero-centred dropout component."""

    keep_weight: float = 0.5
    sigma1: float = float(np.exp(-3.0))


class NoiseStream:
    """Reproducible standard-normal draws keyed by (step, sequence, draw).

    Each draw seeds a fresh generator from the tuple, so results do not
    depend on call order or on how sequences are distributed over workers.
    Sequence id ``BATCH_SCOPE`` marks per-step draws shared by the whole
    minibatch (weight and basis-coefficient samples).  Every draw is logged
    so tests can audit how many tensors a training step consumed.
    """

    BATCH_SCOPE = 0xFFFFFFFF

    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        self.draws = []

    def _rng(self, kind, step, seq, draw, sample):
        key = [self.seed, kind, int(step) & _MASK64, int(seq) & _MASK64,
               int(draw) & _MASK64, int(sample) & _MASK64]
        return np.random.default_rng(key)

    def normal(self, shape, *, step, seq, draw, sample=0):
        self.draws.append((int(step), int(seq), int(draw), int(sample)))
        return self._rng(0, step, seq, draw, sample).standard_normal(shape)

    def uniform(self, shape, *, step, seq, draw, sample=0):
        self.draws.append((int(step), int(seq), int(draw), int(sample)))
        return self._rng(1, step, seq, draw, sample).random(shape)

    def count(self, *, step=None, seq=None, draw=None):
        """Number of logged tensor draws matching the given key fields."""
        return sum(1 for (st, sq, dr, _k) in self.draws
                   if (step is None or st == step)
                   and (seq is None or sq == seq)
                   and (draw is None or dr == draw))

    def clear_log(self):
        self.draws.clear()


def draw_id(layer_index, kind):
    """Stable per-layer draw index. Kinds: weight, lambda, latent, dropout."""
    kinds = {"weight": 0, "lambda": 1, "latent": 2, "dropout": 3}
    return layer_index * 4 + kinds[kind]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_weights(q, eps):
    """Reparameterized draw ``w = mu + sigma * eps``."""
    if eps.shape != q.mu.value.shape:
        raise ShapeError("noise shape disagrees with posterior mean",
                         eps.shape, q.mu.value.shape)
    return q.mu.value + q.sigma() * eps


def sample_weights_bayes_dropout(q, cfg, eps):
    """Mixture draw ``w = a (mu + sigma0 eps) + (1 - a) sigma1 eps`` with a
    single shared ``eps`` for both components."""
    if eps.shape != q.mu.value.shape:
        raise ShapeError("noise shape disagrees with posterior mean",
                         eps.shape, q.mu.value.shape)
    a = cfg.keep_weight
    return a * (q.mu.value + q.sigma() * eps) + (1.0 - a) * cfg.sigma1 * eps


def standard_dropout_mask(q_mu, a, sigma1, rng, *, step=0, seq=0, draw=0):
    """Classic dropout as a weight resampling: each weight keeps its value
    with probability ``a``, otherwise is replaced by a N(0, sigma1^2) draw."""
    q_mu = np.asarray(q_mu, dtype=np.float64)
    keep = rng.uniform(q_mu.shape, step=step, seq=seq, draw=draw) < a
    noise = sigma1 * rng.normal(q_mu.shape, step=step, seq=seq, draw=draw,
                                sample=1)
    return np.where(keep, q_mu, noise)


# ---------------------------------------------------------------------------
# analytic KL terms
# ---------------------------------------------------------------------------

def kl_gaussian(q):
    """Closed-form KL(q || prior) for diagonal Gaussians, summed over
    weights; tied sigma rows are expanded per weight before summation."""
    mu = q.mu.value
    sigma = np.broadcast_to(q.sigma(), mu.shape)
    pmu = np.broadcast_to(q.prior_mu.value, mu.shape)
    psig = np.broadcast_to(q.prior_sigma.value, mu.shape)
    terms = (np.log(psig / sigma)
             + (sigma ** 2 + (mu - pmu) ** 2) / (2.0 * psig ** 2)
             - 0.5)
    return float(terms.sum())


def kl_bayes_dropout(q, cfg):
    """Mixture-posterior KL approximation.

    ``a * sum[(sigma0^2 + (mu - mu_r)^2) / (2 sigma_r^2) - log sigma0]
    + (1-a) * sum[sigma1^2 / (2 sigma_r^2) - log sigma1] - C`` with
    ``C = sum[1/2 - log sigma_r]``, chosen so the ``a == 1`` case reduces
    exactly to :func:`kl_gaussian` (hence 0 at q == prior).
    """
    a = cfg.keep_weight
    mu = q.mu.value
    sigma0 = np.broadcast_to(q.sigma(), mu.shape)
    pmu = np.broadcast_to(q.prior_mu.value, mu.shape)
    psig = np.broadcast_to(q.prior_sigma.value, mu.shape)
    keep = ((sigma0 ** 2 + (mu - pmu) ** 2) / (2.0 * psig ** 2)
            - np.log(sigma0))
    drop = (cfg.sigma1 ** 2 / (2.0 * psig ** 2)) - np.log(cfg.sigma1)
    const = 0.5 - np.log(psig)
    return float((a * keep + (1.0 - a) * drop - const).sum())


# ---------------------------------------------------------------------------
# hyper-parameter gradients
# ---------------------------------------------------------------------------

def tied_sigma_grad(grad_w, eps):
    """Reduce a per-weight Monte-Carlo gradient to the tied-sigma layout:
    d/dsigma_i = sum_j grad_w[i, j] * eps[i, j]."""
    return (grad_w * eps).sum(axis=1, keepdims=True)


def elbo_hyperparam_grads(mc_grad_mu, mc_grad_sigma, q, kl_scale):
    """Ascent gradients for (mu, rho) from Monte-Carlo gradients plus the
    analytic KL derivative, chained through ``sigma = exp(rho)``.

    ``mc_grad_sigma`` arrives in the tied layout (one row per input
    dimension, see :func:`tied_sigma_grad`).
    """
    mu = q.mu.value
    sigma = q.sigma()
    pmu = np.broadcast_to(q.prior_mu.value, mu.shape)
    psig = np.broadcast_to(q.prior_sigma.value, mu.shape)

    grad_mu = mc_grad_mu - kl_scale * (mu - pmu) / psig ** 2
    dkl_dsigma = ((sigma ** 2 - psig ** 2) / (sigma * psig ** 2)).sum(
        axis=1, keepdims=True)
    grad_sigma = mc_grad_sigma - kl_scale * dkl_dsigma
    return grad_mu, grad_sigma * sigma


def elbo_hyperparam_grads_bayes_dropout(mc_grad_mu, mc_grad_sigma, q, cfg,
                                        kl_scale):
    """Bayes-dropout counterpart of :func:`elbo_hyperparam_grads`.

    The Monte-Carlo gradients must already include the mixture chain factor
    ``a`` (i.e. ``mc_grad_mu = a * grad_w``); this routine only adds the
    mixture KL derivatives.
    """
    a = cfg.keep_weight
    mu = q.mu.value
    sigma0 = q.sigma()
    pmu = np.broadcast_to(q.prior_mu.value, mu.shape)
    psig = np.broadcast_to(q.prior_sigma.value, mu.shape)

    grad_mu = mc_grad_mu - kl_scale * a * (mu - pmu) / psig ** 2
    dkl_dsigma = a * (sigma0 / psig ** 2 - 1.0 / sigma0).sum(
        axis=1, keepdims=True)
    grad_sigma = mc_grad_sigma - kl_scale * dkl_dsigma
    return grad_mu, grad_sigma * sigma0
