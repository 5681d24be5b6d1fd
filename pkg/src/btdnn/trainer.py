"""Objective-ascending SGD with prior bootstrapping, adaptation modes and
versioned checkpoints.

Training maximizes ``mmi - sum(kl) + f_smooth_lambda * ce - l2_weight * l2``
(see :mod:`btdnn.criterion` for the sign conventions).  One training step
draws one weight sample per Bayesian layer per Monte-Carlo sample (batch
scope), fans the per-sequence forward/backward out over worker threads, and
merges gradients in sequence order so results do not depend on the worker
count.  The KL weight of a step is ``frames in batch / total training
frames``, which makes the summed per-epoch KL weight equal to one.

Checkpoint container (little-endian): ``magic "BTDN" | u8 version |
u32 meta_len | canonical JSON meta | u32 n_arrays | name table
(u16 len, utf-8 name, u8 ndim, u32 dims) | float64 payloads in table
order | u64 blake2b checksum``.
"""

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bayes import (NoiseStream, elbo_hyperparam_grads,
                    elbo_hyperparam_grads_bayes_dropout, kl_bayes_dropout,
                    kl_gaussian, tied_sigma_grad)
from .criterion import (CriterionConfig, build_denominator_graph,
                        build_numerator_graph, ce_loss_and_grad, combine,
                        mmi_loss_and_grad)
from .decode import evaluate_corpus
from .errors import (CheckpointError, ConfigError, NumericsError,
                     TopologyError)
from .grad import Tape
from .tdnn import (DEFAULT_OFFSETS, MODES, TdnnStack, forward_tape,
                   sample_layer_noise, _weight_init)

CHECKPOINT_MAGIC = b"BTDN"
CHECKPOINT_VERSION = 1

# bayes_adapt caps the initial posterior deviation of the adapted layer
ADAPT_SIGMA_CAP = float(np.exp(-3.0))


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "tdnn"
    bayes_layers: frozenset = frozenset({1})
    lr: float = 0.05
    epochs: int = 10
    batch_frames: int = 512
    mc_samples: int = 1
    seed: int = 0
    criterion: CriterionConfig = field(default_factory=CriterionConfig)
    prior_sigma: float = 0.25
    # fixed conventions of this trainer, exposed for tests
    momentum: float = 0.9
    lr_decay: float = 0.9
    clip_norm: float = 5.0
    constraint_interval: int = 4
    # topology
    hidden: int = 64
    bottleneck: int | None = 16
    offsets: tuple = DEFAULT_OFFSETS
    latent_dim: int = 8
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown uncertainty mode: {self.mode!r}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.epochs < 0 or self.lr < 0 or self.batch_frames < 1:
            raise ConfigError("bad lr/epochs/batch_frames")
        if self.prior_sigma <= 0:
            raise ConfigError("prior_sigma must be positive")
        valid = set(range(1, len(self.offsets) + 1))
        if not set(self.bayes_layers) <= valid:
            raise ConfigError(f"bayes_layers {sorted(self.bayes_layers)} "
                              f"outside the {len(self.offsets)}-layer stack")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class SgdMomentum:
    """Plain ascent SGD with momentum and global-norm gradient clipping."""

    def __init__(self, params, momentum=0.9, clip_norm=5.0):
        self.params = {p.name: p for p in params if p.trainable}
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(p.value)
                         for name, p in self.params.items()}

    def step(self, grads, lr):
        sq = 0.0
        for name in self.params:
            g = grads.get(name)
            if g is not None:
                sq += float(np.sum(g * g))
        norm = math.sqrt(sq)
        scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += scale * g
            p.value = p.value + lr * v


# ---------------------------------------------------------------------------
# batch evaluation (shared by training steps and gradient checks)
# ---------------------------------------------------------------------------

def _sequence_pass(stack, seq_id, utt, num_graph, den_graph, crit, noise,
                   step, sample_idx, samples, kl_seed, inv_n, want_grads):
    tape = Tape()
    scores_node, latent_nodes = forward_tape(
        stack, tape, utt.features, samples=samples, noise=noise, step=step,
        seq=seq_id, sample_idx=sample_idx)
    scores = scores_node.value
    mmi_val, mmi_grad = mmi_loss_and_grad(num_graph, den_graph, scores, crit)
    ce_val, ce_grad = ce_loss_and_grad(scores, utt.alignment)
    latent_vals = {li: float(np.sum(node.value))
                   for li, node in latent_nodes.items()}
    grads = None
    if want_grads:
        seeds = {scores_node:
                 (mmi_grad - crit.f_smooth_lambda * ce_grad) * inv_n}
        for li, node in latent_nodes.items():
            seeds[node] = np.full(node.value.shape, kl_seed)
        grads = tape.gradients(seeds)
    return mmi_val, ce_val, latent_vals, grads


def _merge_into(acc, grads):
    for name, g in grads.items():
        have = acc.get(name)
        acc[name] = g if have is None else have + g


def evaluate_batch(stack, batch, den_graph, cfg, noise, step, kl_scale, *,
                   want_grads, workers=1):
    """Objective breakdown (and ascent gradients) for one minibatch.

    ``batch`` holds ``(seq_id, utterance, numerator_graph)`` triples.  The
    function is pure given (parameters, noise keys), so finite differences
    of its total validate the returned gradients.
    """
    crit = cfg.criterion
    n = cfg.mc_samples
    inv_n = 1.0 / n
    mmi_sum = 0.0
    ce_sum = 0.0
    latent_sums = {}
    grads = {} if want_grads else None
    mc_w = {}
    mc_lam = {}

    for sample_idx in range(n):
        samples = sample_layer_noise(stack, noise, step, sample_idx)

        def run(item):
            seq_id, utt, num_graph = item
            return _sequence_pass(stack, seq_id, utt, num_graph, den_graph,
                                  crit, noise, step, sample_idx, samples,
                                  -kl_scale * inv_n, inv_n, want_grads)

        if workers > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, batch))
        else:
            results = [run(item) for item in batch]

        sample_grads = {}
        for mmi_val, ce_val, latent_vals, seq_grads in results:
            mmi_sum += inv_n * mmi_val
            ce_sum += inv_n * (-ce_val)
            for li, v in latent_vals.items():
                latent_sums[li] = latent_sums.get(li, 0.0) + inv_n * v
            if want_grads:
                _merge_into(sample_grads, seq_grads)

        if not want_grads:
            continue
        # translate sampled-weight gradients into (mu, sigma) space using
        # this sample's eps, then fold into the running totals
        for layer in stack.layers:
            li = layer.index
            if layer.w_q is not None and li in samples and "w" in samples[li]:
                gw = sample_grads.pop(f"layer{li}.w.sample")
                _, eps = samples[li]["w"]
                factor = (layer.dropout.keep_weight
                          if layer.mode == "bd-tdnn" else 1.0)
                gmu, gsig = mc_w.get(li, (0.0, 0.0))
                mc_w[li] = (gmu + factor * gw,
                            gsig + tied_sigma_grad(factor * gw, eps))
            if (layer.lam_q is not None and li in samples
                    and "lam" in samples[li]):
                gl = sample_grads.pop(f"layer{li}.lam.sample")
                _, eps = samples[li]["lam"]
                gmu, gsig = mc_lam.get(li, (0.0, 0.0))
                mc_lam[li] = (gmu + gl, gsig + tied_sigma_grad(gl, eps))
        _merge_into(grads, sample_grads)

    kl_terms = {}
    for layer in stack.layers:
        li = layer.index
        kl = 0.0
        if layer.w_q is not None and not layer.collapsed:
            if layer.mode == "bd-tdnn":
                kl += kl_bayes_dropout(layer.w_q, layer.dropout)
                if want_grads:
                    gmu, grho = elbo_hyperparam_grads_bayes_dropout(
                        *mc_w[li], layer.w_q, layer.dropout, kl_scale)
                    grads[layer.w_q.mu.name] = gmu
                    grads[layer.w_q.rho.name] = grho
            else:
                kl += kl_gaussian(layer.w_q)
                if want_grads:
                    gmu, grho = elbo_hyperparam_grads(
                        *mc_w[li], layer.w_q, kl_scale)
                    grads[layer.w_q.mu.name] = gmu
                    grads[layer.w_q.rho.name] = grho
        if layer.lam_q is not None and not layer.collapsed:
            kl += kl_gaussian(layer.lam_q)
            if want_grads:
                gmu, grho = elbo_hyperparam_grads(
                    *mc_lam[li], layer.lam_q, kl_scale)
                grads[layer.lam_q.mu.name] = gmu
                grads[layer.lam_q.rho.name] = grho
        kl += latent_sums.get(li, 0.0)
        if kl != 0.0:
            kl_terms[li] = kl_scale * kl

    l2_val = 0.0
    for p in stack.trainable_params():
        if p.name.endswith(".rho"):
            continue
        l2_val += float(np.sum(p.value * p.value))
        if want_grads and crit.l2_weight > 0.0:
            extra = -2.0 * crit.l2_weight * p.value
            have = grads.get(p.name)
            grads[p.name] = extra if have is None else have + extra

    breakdown = combine(mmi_sum, kl_terms, ce_sum, l2_val, crit)
    for term, value in [("mmi", breakdown.mmi_term), ("ce", breakdown.ce_term),
                        ("l2", breakdown.l2_term),
                        ("kl", breakdown.kl_total),
                        ("total", breakdown.total)]:
        if not np.isfinite(value):
            raise NumericsError(term, value)
    return breakdown, grads


def batch_objective(stack, batch, den_graph, cfg, noise, step, kl_scale):
    """Objective value only (frozen noise keys); the finite-difference
    counterpart of the gradients from :func:`evaluate_batch`."""
    breakdown, _ = evaluate_batch(stack, batch, den_graph, cfg, noise, step,
                                  kl_scale, want_grads=False)
    return breakdown.total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train_step(stack, batch, den_graph, cfg, noise, step, total_frames, opt,
               lr):
    batch_frames = sum(utt.num_frames for _, utt, _ in batch)
    kl_scale = batch_frames / total_frames
    breakdown, grads = evaluate_batch(stack, batch, den_graph, cfg, noise,
                                      step, kl_scale, want_grads=True,
                                      workers=cfg.workers)
    # per-frame gradient scaling: step sizes independent of batch packing
    inv = 1.0 / batch_frames
    opt.step({name: g * inv for name, g in grads.items()}, lr)
    if cfg.constraint_interval and step % cfg.constraint_interval == 0:
        stack.constrain_bottlenecks()
    return breakdown


@dataclass
class TrainResult:
    stack: TdnnStack
    metrics: list
    final_step: int
    noise: NoiseStream


def make_batches(utterances, order, batch_frames):
    """Pack permuted utterance indices into batches of >= batch_frames."""
    batches = []
    cur = []
    frames = 0
    for idx in order:
        cur.append(int(idx))
        frames += utterances[idx].num_frames
        if frames >= batch_frames:
            batches.append(cur)
            cur = []
            frames = 0
    if cur:
        batches.append(cur)
    return batches


def train(stack, train_utts, dev_utts, bigram, cfg, *, noise=None,
          on_epoch=None):
    """Run ``cfg.epochs`` of discriminative training on ``stack`` in place.

    The metrics list carries one row per epoch with the step-mean loss
    breakdown and the posterior-mean dev error rate.
    """
    den_graph = build_denominator_graph(bigram)
    num_graphs = [build_numerator_graph(u.alignment, bigram)
                  for u in train_utts]
    total_frames = sum(u.num_frames for u in train_utts)
    noise = noise if noise is not None else NoiseStream(cfg.seed)
    opt = SgdMomentum(stack.trainable_params(), cfg.momentum, cfg.clip_norm)

    step = 0
    metrics = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** epoch
        order = np.random.default_rng(
            [cfg.seed, 11, epoch]).permutation(len(train_utts))
        rows = []
        for batch_idx in make_batches(train_utts, order, cfg.batch_frames):
            step += 1
            batch = [(i, train_utts[i], num_graphs[i]) for i in batch_idx]
            rows.append(train_step(stack, batch, den_graph, cfg, noise, step,
                                   total_frames, opt, lr))
        if dev_utts:
            dev_ler, _ = evaluate_corpus(stack, dev_utts, den_graph,
                                         cfg.criterion.acoustic_scale)
        else:
            dev_ler = float("nan")
        metrics.append({
            "step": step,
            "mmi": float(np.mean([r.mmi_term for r in rows])),
            "kl_total": float(np.mean([r.kl_total for r in rows])),
            "ce": float(np.mean([r.ce_term for r in rows])),
            "l2": float(np.mean([r.l2_term for r in rows])),
            "total": float(np.mean([r.total for r in rows])),
            "dev_ler": dev_ler,
        })
        if on_epoch is not None:
            on_epoch(epoch + 1, stack, step)
    return TrainResult(stack=stack, metrics=metrics, final_step=step,
                       noise=noise)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    topology: dict
    arrays: dict
    seed: int
    step: int
    provenance: str = ""
    version: int = CHECKPOINT_VERSION


def checkpoint_from_stack(stack, *, seed=0, step=0, provenance=""):
    return Checkpoint(topology=stack.describe(),
                      arrays={p.name: p.value.copy() for p in stack.params()},
                      seed=seed, step=step, provenance=provenance)


def stack_from_checkpoint(ckpt, *, prior_sigma=0.25):
    stack = TdnnStack.from_descriptor(ckpt.topology, prior_sigma=prior_sigma,
                                      seed=ckpt.seed)
    byname = stack.param_by_name()
    missing = set(byname) - set(ckpt.arrays)
    extra = set(ckpt.arrays) - set(byname)
    if missing or extra:
        raise CheckpointError(f"checkpoint arrays disagree with topology "
                              f"(missing={sorted(missing)}, "
                              f"extra={sorted(extra)})")
    for name, param in byname.items():
        arr = ckpt.arrays[name]
        if arr.shape != param.value.shape:
            raise CheckpointError(f"array {name} has shape {arr.shape}, "
                                  f"expected {param.value.shape}")
        param.value = arr.copy()
    return stack


def serialize_checkpoint(ckpt):
    meta = json.dumps({"topology": ckpt.topology, "seed": ckpt.seed,
                       "step": ckpt.step, "provenance": ckpt.provenance},
                      sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<B", ckpt.version),
             struct.pack("<I", len(meta)), meta]
    names = sorted(ckpt.arrays)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        arr = ckpt.arrays[name]
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        parts.append(np.ascontiguousarray(ckpt.arrays[name],
                                          dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.blake2b(body, digest_size=8).digest()


def checkpoint_hash(ckpt):
    return hashlib.blake2b(serialize_checkpoint(ckpt),
                           digest_size=8).hexdigest()


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(serialize_checkpoint(ckpt))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 4 + 1 + 4 + 8:
        raise CheckpointError(f"checkpoint too short ({len(blob)} bytes)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CheckpointError("checkpoint content checksum mismatch")
    version = body[4]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        (meta_len,) = struct.unpack_from("<I", body, 5)
        off = 9
        meta = json.loads(body[off:off + meta_len].decode())
        off += meta_len
        (n_arrays,) = struct.unpack_from("<I", body, off)
        off += 4
        table = []
        for _ in range(n_arrays):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode()
            off += name_len
            ndim = body[off]
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            table.append((name, shape))
        arrays = {}
        for name, shape in table:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=off)
            off += 8 * count
            arrays[name] = arr.astype(np.float64).reshape(shape)
        if off != len(body):
            raise CheckpointError(f"{len(body) - off} trailing bytes in "
                                  f"checkpoint payload")
    except (struct.error, ValueError, KeyError, IndexError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return Checkpoint(topology=meta["topology"], arrays=arrays,
                      seed=meta["seed"], step=meta["step"],
                      provenance=meta.get("provenance", ""),
                      version=version)


# ---------------------------------------------------------------------------
# prior bootstrapping
# ---------------------------------------------------------------------------

def _topology_divergence(t1, t2):
    out = []
    if t1["feat_dim"] != t2["feat_dim"]:
        out.append("feat_dim")
    if t1["num_outputs"] != t2["num_outputs"]:
        out.append("num_outputs")
    l1, l2 = t1["layers"], t2["layers"]
    if len(l1) != len(l2):
        out.append("depth")
        return out
    for i, (a, b) in enumerate(zip(l1, l2), start=1):
        keys = ("offsets", "in_dim", "hidden", "bottleneck")
        if any(a[k] != b[k] for k in keys):
            out.append(f"layer{i}")
    return out


def _source_weight(arrays, index):
    for key in (f"layer{index}.w", f"layer{index}.w.mu"):
        if key in arrays:
            return arrays[key]
    return None


def _source_lambda(arrays, index):
    for key in (f"layer{index}.lam", f"layer{index}.lam.mu"):
        if key in arrays:
            return arrays[key]
    return None


def bootstrap_prior(converged, half_trained, cfg):
    """Initialize a model in ``cfg.mode`` from two checkpoints: priors from
    the converged one, starting values from the half-trained one, and
    ``sigma`` pinned at ``cfg.prior_sigma`` (``rho = log(prior_sigma)``).

    With ``mode == 'tdnn'`` this is an identity load of the half-trained
    parameters (no prior arrays exist).
    """
    mismatch = _topology_divergence(converged.topology, half_trained.topology)
    if mismatch:
        raise TopologyError("converged/half-trained checkpoints disagree",
                            mismatch)
    desc = json.loads(json.dumps(half_trained.topology))
    for i, layer_desc in enumerate(desc["layers"], start=1):
        if i in cfg.bayes_layers and cfg.mode != "tdnn":
            layer_desc["mode"] = cfg.mode
            if cfg.mode == "v-tdnn":
                layer_desc["latent_dim"] = cfg.latent_dim
        else:
            layer_desc["mode"] = "tdnn"
            layer_desc["latent_dim"] = None
        layer_desc["collapsed"] = False
    stack = TdnnStack.from_descriptor(desc, prior_sigma=cfg.prior_sigma,
                                      seed=cfg.seed)

    half, conv = half_trained.arrays, converged.arrays
    for layer in stack.layers:
        i = layer.index
        if layer.m is not None and f"layer{i}.M" in half:
            layer.m.value = half[f"layer{i}.M"].copy()
        if f"layer{i}.bias" in half:
            layer.bias.value = half[f"layer{i}.bias"].copy()
        src_w = _source_weight(half, i)
        prior_w = _source_weight(conv, i)
        if layer.w_q is not None:
            if src_w is not None:
                layer.w_q.mu.value = src_w.copy()
            if prior_w is not None:
                layer.w_q.prior_mu.value = prior_w.copy()
            layer.w_q.prior_sigma.value = np.full(
                (layer.w_q.mu.value.shape[0], 1), cfg.prior_sigma)
            layer.w_q.rho.value = np.log(layer.w_q.prior_sigma.value)
        elif layer.w is not None and src_w is not None:
            if layer.mode == "v-tdnn" and src_w.shape[0] != layer.w.value.shape[0]:
                # plain source: latent rows start silent, input rows carry over
                w = np.zeros_like(layer.w.value)
                w[layer.latent_dim:, :] = src_w
                layer.w.value = w
            else:
                layer.w.value = src_w.copy()
        src_lam = _source_lambda(half, i)
        prior_lam = _source_lambda(conv, i)
        if layer.lam_q is not None:
            if src_lam is not None:
                layer.lam_q.mu.value = src_lam.copy()
            if prior_lam is not None:
                layer.lam_q.prior_mu.value = prior_lam.copy()
            layer.lam_q.prior_sigma.value = np.full(
                (layer.lam_q.mu.value.shape[0], 1), cfg.prior_sigma)
            layer.lam_q.rho.value = np.log(layer.lam_q.prior_sigma.value)
        elif layer.lam is not None and src_lam is not None:
            layer.lam.value = src_lam.copy()
        net_parts = {"infer.w": "infer_w", "infer.bias": "infer_b",
                     "prior_net.w": "prior_w", "prior_net.bias": "prior_b"}
        for part, attr in net_parts.items():
            key = f"layer{i}.{part}"
            target = getattr(layer, attr)
            if key in half and target is not None:
                target.value = half[key].copy()
    stack.out_w.value = half["output.w"].copy()
    stack.out_bias.value = half["output.bias"].copy()
    return stack


def reinit_layers(stack, names, seed):
    """Freshly re-draw the named blocks ('output' or 'layerN')."""
    for name in sorted(names):
        if name == "output":
            rng = np.random.default_rng([seed, 999, 1])
            stack.out_w.value = _weight_init(rng, stack.out_w.value.shape[0],
                                             stack.out_w.value.shape[1])
            stack.out_bias.value = np.zeros_like(stack.out_bias.value)
        elif name.startswith("layer"):
            index = int(name[5:])
            layer = stack.layers[index - 1]
            rng = np.random.default_rng([seed, 333, index])
            for p in layer.params():
                if not p.trainable or p.name.endswith(".rho"):
                    continue
                if p.name.endswith(".bias"):
                    p.value = np.zeros_like(p.value)
                else:
                    p.value = _weight_init(rng, p.value.shape[0],
                                           p.value.shape[-1]).reshape(
                                               p.value.shape)
        else:
            raise ConfigError(f"cannot reinitialize unknown block {name!r}")


# ---------------------------------------------------------------------------
# multi-phase pipeline and adaptation
# ---------------------------------------------------------------------------

def _phase_seed(seed, ordinal):
    return seed * 1_000_003 + ordinal


@dataclass
class PipelineResult:
    stack: TdnnStack
    metrics: list
    final_step: int
    phases: dict  # name -> Checkpoint


def _train_phase(stack, train_utts, dev_utts, bigram, cfg, ordinal,
                 capture_half=False):
    half_epoch = (cfg.epochs + 1) // 2
    snapshots = {}

    def on_epoch(epoch, st, step):
        if capture_half and epoch == half_epoch:
            snapshots["half"] = checkpoint_from_stack(st, seed=cfg.seed,
                                                      step=step)

    noise = NoiseStream(_phase_seed(cfg.seed, ordinal))
    result = train(stack, train_utts, dev_utts, bigram, cfg, noise=noise,
                   on_epoch=on_epoch)
    return result, snapshots.get("half")


def train_pipeline(train_utts, dev_utts, bigram, cfg):
    """Train a model of ``cfg.mode``, self-bootstrapping the priors.

    Deterministic baselines come first ('half-trained' means the checkpoint
    at 50% of the baseline epochs); gp1/gp3 additionally route through a
    converged gp0 stage so their basis-coefficient priors come from
    converged gp0 values.
    """
    feat_dim = train_utts[0].features.shape[1]
    num_outputs = bigram.shape[0]

    def fresh(mode):
        return TdnnStack.build(
            feat_dim, num_outputs, hidden=cfg.hidden,
            bottleneck=cfg.bottleneck, offsets=cfg.offsets, mode=mode,
            bayes_layers=cfg.bayes_layers, latent_dim=cfg.latent_dim,
            prior_sigma=cfg.prior_sigma, seed=cfg.seed)

    phases = {}
    if cfg.mode == "tdnn":
        result, _ = _train_phase(fresh("tdnn"), train_utts, dev_utts, bigram,
                                 cfg, ordinal=0)
        return PipelineResult(result.stack, result.metrics,
                              result.final_step, phases)

    base_cfg = replace(cfg, mode="tdnn", bayes_layers=frozenset())
    base_result, base_half = _train_phase(fresh("tdnn"), train_utts, dev_utts,
                                          bigram, base_cfg, ordinal=0,
                                          capture_half=True)
    converged = checkpoint_from_stack(base_result.stack, seed=cfg.seed,
                                      step=base_result.final_step)
    phases["baseline"] = converged
    phases["baseline_half"] = base_half

    pair = (converged, base_half)
    if cfg.mode in ("gp1", "gp3"):
        gp0_cfg = replace(cfg, mode="gp0")
        gp0_stack = bootstrap_prior(*pair, gp0_cfg)
        gp0_result, gp0_half = _train_phase(gp0_stack, train_utts, dev_utts,
                                            bigram, gp0_cfg, ordinal=1,
                                            capture_half=True)
        gp0_conv = checkpoint_from_stack(gp0_result.stack, seed=cfg.seed,
                                         step=gp0_result.final_step)
        phases["gp0"] = gp0_conv
        phases["gp0_half"] = gp0_half
        pair = (gp0_conv, gp0_half)

    stack = bootstrap_prior(*pair, cfg)
    result, _ = _train_phase(stack, train_utts, dev_utts, bigram, cfg,
                             ordinal=2)
    return PipelineResult(result.stack, result.metrics, result.final_step,
                          phases)


@dataclass(frozen=True)
class AdaptConfig:
    strategy: str                       # fine_tune | bayes_adapt
    train: TrainConfig
    layers_reinit: frozenset = frozenset({"output"})

    def __post_init__(self):
        if self.strategy not in ("fine_tune", "bayes_adapt"):
            raise ConfigError(f"unknown adaptation strategy "
                              f"{self.strategy!r}")
        if self.strategy == "bayes_adapt" and \
                self.layers_reinit != frozenset({"output"}):
            raise ConfigError("bayes_adapt replaces layer 1 and "
                              "reinitializes exactly the output block")


def adapt(source, train_utts, dev_utts, bigram, acfg):
    """Port ``source`` to the target corpus.

    ``fine_tune`` continues SGD on all weights after reinitializing the
    configured blocks.  ``bayes_adapt`` first fine-tunes, installs the
    fine-tuned weights as both the layer-1 prior and starting point
    (initial KL is 0), reinitializes the output block, and trains the
    Bayesian model.  Returns ``(PipelineResult, fine_tuned_checkpoint)``.
    """
    cfg = acfg.train
    ft_stack = stack_from_checkpoint(source, prior_sigma=cfg.prior_sigma)
    if source.topology["feat_dim"] != train_utts[0].features.shape[1]:
        raise TopologyError("source model disagrees with target features",
                            ["feat_dim"])
    reinit_layers(ft_stack, acfg.layers_reinit, cfg.seed)
    ft_cfg = replace(cfg, mode="tdnn", bayes_layers=frozenset())
    ft_result, _ = _train_phase(ft_stack, train_utts, dev_utts, bigram,
                                ft_cfg, ordinal=5)
    ft_ckpt = checkpoint_from_stack(ft_result.stack, seed=cfg.seed,
                                    step=ft_result.final_step,
                                    provenance=checkpoint_hash(source))
    if acfg.strategy == "fine_tune":
        return (PipelineResult(ft_result.stack, ft_result.metrics,
                               ft_result.final_step,
                               {"fine_tuned": ft_ckpt}), ft_ckpt)

    bcfg = replace(cfg, mode="b-tdnn", bayes_layers=frozenset({1}))
    stack = bootstrap_prior(ft_ckpt, ft_ckpt, bcfg)
    # a very loose prior must not inflate the *initial* sampling noise:
    # the posterior starts at the operating deviation and may widen later
    q = stack.layers[0].w_q
    q.rho.value = np.minimum(q.rho.value, np.log(ADAPT_SIGMA_CAP))
    reinit_layers(stack, {"output"}, cfg.seed)
    result, _ = _train_phase(stack, train_utts, dev_utts, bigram, bcfg,
                             ordinal=6)
    return (PipelineResult(result.stack, result.metrics, result.final_step,
                           {"fine_tuned": ft_ckpt}), ft_ckpt)
