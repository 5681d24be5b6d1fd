"""Factored time-delay stack: temporal splicing, semi-orthogonal bottlenecks,
and the per-layer uncertainty variants.

A layer computes ``relu((splice(x) @ M) @ A + bias)`` where ``M`` is the
(optional) semi-orthogonally constrained linear bottleneck and ``A`` the
affine block feeding the activation.  Uncertainty always attaches to the
block directly inside the activation:

* ``b-tdnn`` / ``bd-tdnn``: Gaussian / mixture posterior over ``A``;
* ``gp0..gp3``: the activation is an interpolation of sigmoid/tanh/relu
  bases with one shared weight block, with optional posteriors over the
  basis coefficients (variants 1, 3) and/or the weights (variants 2, 3);
* ``v-tdnn``: a per-frame latent vector, produced by an inference network
  from the layer input and concatenated with it before the affine.

Parameter counts follow the free-parameter accounting of the weight, basis
and latent groups (biases and bottleneck blocks are reported separately).
"""

from dataclasses import dataclass, field

import numpy as np

from .bayes import BayesDropoutConfig, GaussianVariational, draw_id
from .errors import ConfigError, ConvergenceError, DataError, ShapeError
from .grad import Param, relu, sigmoid

MODES = ("tdnn", "b-tdnn", "bd-tdnn", "gp0", "gp1", "gp2", "gp3", "v-tdnn")
GP_MODES = ("gp0", "gp1", "gp2", "gp3")
GP_BASES = ("sigmoid", "tanh", "relu")

DEFAULT_OFFSETS = ((-1, 0), (0, 1), (-1, 1), (-3, 0), (0, 3), (-3, 3))

_BASIS_FNS = {"sigmoid": sigmoid, "tanh": np.tanh, "relu": relu}


# ---------------------------------------------------------------------------
# splicing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpliceSpec:
    """Signed frame offsets, strictly increasing."""

    offsets: tuple

    def __post_init__(self):
        if len(self.offsets) == 0:
            raise ConfigError("splice offsets must be non-empty")
        if any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise ConfigError(
                f"splice offsets must be strictly increasing: {self.offsets}")

    def __len__(self):
        return len(self.offsets)


def splice_indices(n_frames, offsets):
    """Row indices per offset, clamped to [0, T-1] at the boundaries."""
    base = np.arange(n_frames, dtype=np.int64)
    return [np.clip(base + o, 0, n_frames - 1) for o in offsets]


def splice(x, spec):
    """Concatenate temporally offset copies of ``x`` along columns."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 1:
        raise DataError("cannot splice an empty sequence")
    idx = splice_indices(x.shape[0], spec.offsets)
    return np.concatenate([x[i] for i in idx], axis=1)


def splice_tape(tape, x_node, spec):
    """Tape-recorded splice (gather rows per offset, concat columns)."""
    if x_node.value.shape[0] < 1:
        raise DataError("cannot splice an empty sequence")
    idx = splice_indices(x_node.value.shape[0], spec.offsets)
    return tape.concat_cols(*[tape.gather_rows(x_node, i) for i in idx])


# ---------------------------------------------------------------------------
# semi-orthogonal bottleneck constraint
# ---------------------------------------------------------------------------

def semi_orthogonal_residual(m):
    """Frobenius norm of ``G G^T - I`` with ``G`` the orientation of ``m``
    whose rows are the smaller dimension."""
    g = m if m.shape[0] <= m.shape[1] else m.T
    p = g @ g.T
    return float(np.linalg.norm(p - np.eye(g.shape[0])))

def apply_semi_orthogonal_constraint(m, tol=1e-6, max_iter=20):
    """Drive ``m`` toward ``m m^T = I`` by the Newton-Schulz style update
    ``m <- m - 0.5 (m m^T - I) m``; requires rows(m) <= cols(m)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[0] > m.shape[1]:
        raise ShapeError("constraint expects rows <= cols", m.shape)
    eye = np.eye(m.shape[0])
    for _ in range(max_iter):
        p = m @ m.T - eye
        residual = float(np.linalg.norm(p))
        if residual <= tol:
            return m
        m = m - 0.5 * (p @ m)
    residual = float(np.linalg.norm(m @ m.T - eye))
    if residual <= tol:
        return m
    raise ConvergenceError(
        f"semi-orthogonal constraint not met after {max_iter} iterations",
        residual)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamCounts:
    lam: int
    w: int
    z: int


def param_count(mode, a, b, c=None):
    """Free-parameter counts (lam, w, z) for one layer of input size ``a``,
    ``b`` hidden nodes and latent size ``c``.

    ``bd-tdnn`` counts like ``b-tdnn``: its keep probability and dropout
    deviation are fixed constants, not free parameters.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown uncertainty mode: {mode!r}")
    if a < 1 or b < 1:
        raise ConfigError(f"layer dims must be positive, got a={a}, b={b}")
    if mode == "v-tdnn":
        if c is None or c < 1:
            raise ConfigError("v-tdnn requires a positive latent size c")
        return ParamCounts(0, a * b + c * b, 4 * a * c)
    table = {
        "tdnn": (0, a * b),
        "b-tdnn": (0, a * b + a),
        "bd-tdnn": (0, a * b + a),
        "gp0": (3 * b, a * b),
        "gp1": (3 * b + 3, a * b),
        "gp2": (3 * b, a * b + a),
        "gp3": (3 * b + 3, a * b + a),
    }
    lam, w = table[mode]
    return ParamCounts(lam, w, 0)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class FactoredLayer:
    index: int                      # 1-based position in the stack
    splice_spec: SpliceSpec
    mode: str
    in_dim: int
    hidden: int
    m: Param | None                 # bottleneck block, spliced x bottleneck
    bias: Param
    w: Param | None = None          # deterministic affine block
    w_q: GaussianVariational | None = None
    lam: Param | None = None        # (3, hidden) basis coefficients
    lam_q: GaussianVariational | None = None
    infer_w: Param | None = None    # v-tdnn inference net
    infer_b: Param | None = None
    prior_w: Param | None = None    # v-tdnn prior net
    prior_b: Param | None = None
    latent_dim: int | None = None
    dropout: BayesDropoutConfig | None = None
    collapsed: bool = False         # v-tdnn: latent pinned to its mean

    @property
    def spliced_dim(self):
        return self.in_dim * len(self.splice_spec)

    @property
    def core_in(self):
        return self.m.value.shape[1] if self.m is not None else self.spliced_dim

    @property
    def factored(self):
        return self.m is not None

    def has_weight_uncertainty(self):
        return self.w_q is not None

    def has_lambda_uncertainty(self):
        return self.lam_q is not None

    def is_bayesian(self):
        return self.mode not in ("tdnn", "gp0") and not self.collapsed

    def params(self):
        out = []
        if self.m is not None:
            out.append(self.m)
        for p in (self.w, self.lam, self.infer_w, self.infer_b,
                  self.prior_w, self.prior_b):
            if p is not None:
                out.append(p)
        for q in (self.w_q, self.lam_q):
            if q is not None:
                out.extend(q.params())
        out.append(self.bias)
        return out

    def param_counts(self):
        """(lam, w, z) counts of the core transform; matches
        :func:`param_count` with ``a = core_in``."""
        lam = 0
        if self.lam is not None:
            lam += self.lam.value.size
        if self.lam_q is not None:
            lam += self.lam_q.mu.value.size + self.lam_q.rho.value.size
        w = 0
        if self.w is not None:
            w += self.w.value.size
        if self.w_q is not None:
            w += self.w_q.mu.value.size + self.w_q.rho.value.size
        z = 0
        for p in (self.infer_w, self.prior_w):
            if p is not None:
                z += p.value.size
        return ParamCounts(lam, w, z)

    def bottleneck_params(self):
        return self.m.value.size if self.m is not None else 0


def _weight_init(rng, rows, cols):
    return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))


def _bottleneck_init(rng, rows, cols):
    # spectral norm ~= 1 keeps the orthogonalizing iteration convergent
    return rng.standard_normal((rows, cols)) / (np.sqrt(rows) + np.sqrt(cols))


def _make_layer(index, spec, mode, in_dim, hidden, bottleneck, latent_dim,
                prior_sigma, seed, dropout):
    name = f"layer{index}"
    spliced = in_dim * len(spec)
    m = None
    if bottleneck is not None:
        rng = np.random.default_rng([seed, index, 0])
        m0 = apply_semi_orthogonal_constraint(
            _bottleneck_init(rng, bottleneck, spliced)).T
        m = Param(f"{name}.M", m0)
    a = bottleneck if bottleneck is not None else spliced

    rng = np.random.default_rng([seed, index, 1])
    layer = FactoredLayer(index=index, splice_spec=spec, mode=mode,
                          in_dim=in_dim, hidden=hidden, m=m,
                          bias=Param(f"{name}.bias", np.zeros(hidden)))

    if mode == "v-tdnn":
        if latent_dim is None or latent_dim < 1:
            raise ConfigError("v-tdnn layers need a positive latent_dim")
        c = latent_dim
        layer.latent_dim = c
        layer.w = Param(f"{name}.w", _weight_init(rng, a + c, hidden))
        net_rng = np.random.default_rng([seed, index, 2])
        iw = 0.1 * _weight_init(net_rng, a, 2 * c)
        ib = np.concatenate([np.zeros(c), np.full(c, np.log(0.1))])
        layer.infer_w = Param(f"{name}.infer.w", iw)
        layer.infer_b = Param(f"{name}.infer.bias", ib)
        # prior net starts as a copy of the inference net: initial KL is 0
        layer.prior_w = Param(f"{name}.prior_net.w", iw.copy())
        layer.prior_b = Param(f"{name}.prior_net.bias", ib.copy())
        return layer

    w0 = _weight_init(rng, a, hidden)
    if mode in ("b-tdnn", "bd-tdnn") or mode in ("gp2", "gp3"):
        layer.w_q = GaussianVariational.create(f"{name}.w", w0, w0, prior_sigma)
    else:
        layer.w = Param(f"{name}.w", w0)
    if mode == "bd-tdnn":
        layer.dropout = dropout if dropout is not None else BayesDropoutConfig()

    if mode in GP_MODES:
        # start as a pure relu node so gp0 begins at the plain-stack output
        lam0 = np.zeros((3, hidden))
        lam0[2] = 1.0
        if mode in ("gp1", "gp3"):
            layer.lam_q = GaussianVariational.create(
                f"{name}.lam", lam0, lam0, prior_sigma)
        else:
            layer.lam = Param(f"{name}.lam", lam0)
    return layer


# ---------------------------------------------------------------------------
# the stack
# ---------------------------------------------------------------------------

@dataclass
class TdnnStack:
    feat_dim: int
    num_outputs: int
    layers: list
    out_w: Param
    out_bias: Param

    @staticmethod
    def build(feat_dim, num_outputs, *, hidden=64, bottleneck=16,
              offsets=DEFAULT_OFFSETS, mode="tdnn", bayes_layers=frozenset({1}),
              latent_dim=8, prior_sigma=0.25, seed=0, dropout=None):
        """Construct a stack with ``mode`` applied to the 1-based layer
        indices in ``bayes_layers`` (other layers stay deterministic).
        ``bottleneck=None`` builds unfactored layers."""
        if mode not in MODES:
            raise ConfigError(f"unknown uncertainty mode: {mode!r}")
        n_layers = len(offsets)
        bayes_layers = frozenset() if mode == "tdnn" else frozenset(bayes_layers)
        if not bayes_layers <= set(range(1, n_layers + 1)):
            raise ConfigError(
                f"bayes_layers {sorted(bayes_layers)} outside the "
                f"{n_layers}-layer stack")
        layers = []
        in_dim = feat_dim
        for i, offs in enumerate(offsets, start=1):
            layer_mode = mode if i in bayes_layers else "tdnn"
            layers.append(_make_layer(
                i, SpliceSpec(tuple(offs)), layer_mode, in_dim, hidden,
                bottleneck, latent_dim, prior_sigma, seed, dropout))
            in_dim = hidden
        rng = np.random.default_rng([seed, n_layers + 1, 1])
        return TdnnStack(
            feat_dim=feat_dim, num_outputs=num_outputs, layers=layers,
            out_w=Param("output.w", _weight_init(rng, in_dim, num_outputs)),
            out_bias=Param("output.bias", np.zeros(num_outputs)))

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        out.extend([self.out_w, self.out_bias])
        return out

    def trainable_params(self):
        return [p for p in self.params() if p.trainable]

    def param_by_name(self):
        return {p.name: p for p in self.params()}

    def bayesian_layers(self):
        return [l for l in self.layers if l.is_bayesian()]

    def describe(self):
        """Topology descriptor for checkpoints and compatibility checks."""
        return {
            "feat_dim": self.feat_dim,
            "num_outputs": self.num_outputs,
            "layers": [
                {
                    "offsets": list(l.splice_spec.offsets),
                    "in_dim": l.in_dim,
                    "hidden": l.hidden,
                    "bottleneck": (l.m.value.shape[1] if l.m is not None
                                   else None),
                    "mode": l.mode,
                    "latent_dim": l.latent_dim,
                    "collapsed": l.collapsed,
                }
                for l in self.layers
            ],
        }

    @staticmethod
    def from_descriptor(desc, *, prior_sigma=0.25, seed=0):
        layers = []
        for i, ld in enumerate(desc["layers"], start=1):
            layer = _make_layer(
                i, SpliceSpec(tuple(ld["offsets"])), ld["mode"], ld["in_dim"],
                ld["hidden"], ld["bottleneck"], ld["latent_dim"], prior_sigma,
                seed, None)
            layer.collapsed = bool(ld.get("collapsed", False))
            layers.append(layer)
        rng = np.random.default_rng([seed, len(layers) + 1, 1])
        in_dim = layers[-1].hidden if layers else desc["feat_dim"]
        return TdnnStack(
            feat_dim=desc["feat_dim"], num_outputs=desc["num_outputs"],
            layers=layers,
            out_w=Param("output.w",
                        _weight_init(rng, in_dim, desc["num_outputs"])),
            out_bias=Param("output.bias", np.zeros(desc["num_outputs"])))

    def constrain_bottlenecks(self):
        """Re-impose the semi-orthogonal constraint on every bottleneck.

        A block that drifted beyond the iteration's convergence region
        (spectral norm >= sqrt(3)) is first shrunk by its spectral norm;
        positive scaling leaves the orthonormal fixed point unchanged.
        """
        for layer in self.layers:
            if layer.m is None:
                continue
            g = layer.m.value.T
            spectral = np.linalg.norm(g, 2)
            if spectral > 1.2:
                g = g / spectral
            g = apply_semi_orthogonal_constraint(g)
            layer.m.value = np.ascontiguousarray(g.T)


# ---------------------------------------------------------------------------
# collapsed (eval-time) weights and the deterministic forward pass
# ---------------------------------------------------------------------------

def _collapsed_weight(layer):
    if layer.w is not None:
        return layer.w.value
    if layer.mode == "bd-tdnn":
        return layer.dropout.keep_weight * layer.w_q.mu.value
    return layer.w_q.mu.value


def _collapsed_lambda(layer):
    if layer.lam is not None:
        return layer.lam.value
    return layer.lam_q.mu.value


def _det_core(layer, x):
    pre = x @ _collapsed_weight(layer) + layer.bias.value
    if layer.mode in GP_MODES:
        lam = _collapsed_lambda(layer)
        out = np.zeros_like(pre)
        for m, basis in enumerate(GP_BASES):
            out = out + lam[m] * _BASIS_FNS[basis](pre)
        return out
    return relu(pre)


def _det_latent_core(layer, x):
    c = layer.latent_dim
    pre_i = x @ layer.infer_w.value + layer.infer_b.value
    mu_t = pre_i[:, :c]
    # eval-time latent is its posterior mean; prior net is not consulted
    z = mu_t
    nxt = np.concatenate([z, x], axis=1)
    return relu(nxt @ layer.w.value + layer.bias.value)


def forward_det(stack, feats):
    """Posterior-mean forward pass: deterministic, draws no random numbers.

    This is the single evaluation code path; collapsing a stack first gives
    bit-identical scores because the same collapsed values feed the same
    arithmetic.
    """
    x = np.asarray(feats, dtype=np.float64)
    for layer in stack.layers:
        x = splice(x, layer.splice_spec)
        if layer.m is not None:
            x = x @ layer.m.value
        if layer.mode == "v-tdnn":
            x = _det_latent_core(layer, x)
        else:
            x = _det_core(layer, x)
    return x @ stack.out_w.value + stack.out_bias.value


def posterior_mean_collapse(stack):
    """Replace every random quantity by its posterior mean.

    The result is a detached deterministic stack: weight posteriors collapse
    to ``mu`` (scaled by the keep weight for the dropout mixture), basis
    coefficients to their means, and latent layers pin ``z`` to the
    inference-net mean.
    """
    layers = []
    for layer in stack.layers:
        name = f"layer{layer.index}"
        new = FactoredLayer(
            index=layer.index, splice_spec=layer.splice_spec,
            mode=layer.mode, in_dim=layer.in_dim, hidden=layer.hidden,
            m=(Param(f"{name}.M", layer.m.value.copy())
               if layer.m is not None else None),
            bias=Param(f"{name}.bias", layer.bias.value.copy()))
        if layer.mode == "v-tdnn":
            new.latent_dim = layer.latent_dim
            new.w = Param(f"{name}.w", layer.w.value.copy())
            new.infer_w = Param(f"{name}.infer.w", layer.infer_w.value.copy())
            new.infer_b = Param(f"{name}.infer.bias",
                                layer.infer_b.value.copy())
            new.prior_w = Param(f"{name}.prior_net.w",
                                layer.prior_w.value.copy())
            new.prior_b = Param(f"{name}.prior_net.bias",
                                layer.prior_b.value.copy())
            new.collapsed = True
        else:
            new.w = Param(f"{name}.w", _collapsed_weight(layer).copy())
            if layer.mode in GP_MODES:
                new.mode = "gp0"
                new.lam = Param(f"{name}.lam", _collapsed_lambda(layer).copy())
            else:
                new.mode = "tdnn"
        layers.append(new)
    return TdnnStack(feat_dim=stack.feat_dim, num_outputs=stack.num_outputs,
                     layers=layers,
                     out_w=Param("output.w", stack.out_w.value.copy()),
                     out_bias=Param("output.bias", stack.out_bias.value.copy()))


# ---------------------------------------------------------------------------
# tape forward pass (training)
# ---------------------------------------------------------------------------

def sample_layer_noise(stack, noise, step, sample_idx=0):
    """Per-step batch-scope draws: one eps tensor per random weight block and
    one per random basis-coefficient block (shared across the minibatch)."""
    from .bayes import sample_weights, sample_weights_bayes_dropout
    scope = noise.BATCH_SCOPE
    samples = {}
    for layer in stack.layers:
        entry = {}
        if layer.has_weight_uncertainty() and not layer.collapsed:
            eps = noise.normal(layer.w_q.mu.value.shape, step=step, seq=scope,
                               draw=draw_id(layer.index, "weight"),
                               sample=sample_idx)
            if layer.mode == "bd-tdnn":
                w = sample_weights_bayes_dropout(layer.w_q, layer.dropout, eps)
            else:
                w = sample_weights(layer.w_q, eps)
            entry["w"] = (w, eps)
        if layer.has_lambda_uncertainty() and not layer.collapsed:
            eps = noise.normal(layer.lam_q.mu.value.shape, step=step,
                               seq=scope, draw=draw_id(layer.index, "lambda"),
                               sample=sample_idx)
            entry["lam"] = (sample_weights(layer.lam_q, eps), eps)
        if entry:
            samples[layer.index] = entry
    return samples


def _tape_core(layer, tape, x, samples):
    name = f"layer{layer.index}"
    if layer.w is not None:
        w_node = tape.param(layer.w)
    else:
        w_val, _ = samples[layer.index]["w"]
        w_node = tape.named_value(f"{name}.w.sample", w_val)
    pre = tape.affine(x, w_node, tape.param(layer.bias))
    if layer.mode not in GP_MODES:
        return tape.activation(pre, "relu")
    if layer.lam is not None:
        lam_node = tape.param(layer.lam)
    else:
        lam_val, _ = samples[layer.index]["lam"]
        lam_node = tape.named_value(f"{name}.lam.sample", lam_val)
    out = None
    for m, basis in enumerate(GP_BASES):
        scaled = tape.mul(tape.activation(pre, basis),
                          tape.slice_rows(lam_node, m, m + 1))
        out = scaled if out is None else tape.add(out, scaled)
    return out


def _tape_latent_core(layer, tape, x, noise, step, seq, sample_idx):
    c = layer.latent_dim
    pre_i = tape.affine(x, tape.param(layer.infer_w), tape.param(layer.infer_b))
    mu_t = tape.slice_cols(pre_i, 0, c)
    logsig_t = tape.slice_cols(pre_i, c, 2 * c)
    sig_t = tape.exp(logsig_t)
    pre_p = tape.affine(x, tape.param(layer.prior_w), tape.param(layer.prior_b))
    mu_rt = tape.slice_cols(pre_p, 0, c)
    logsig_rt = tape.slice_cols(pre_p, c, 2 * c)
    sig_rt = tape.exp(logsig_rt)

    if layer.collapsed or noise is None:
        z = mu_t
    else:
        eps = noise.normal((x.value.shape[0], c), step=step, seq=seq,
                           draw=draw_id(layer.index, "latent"),
                           sample=sample_idx)
        z = tape.add(mu_t, tape.mul(sig_t, tape.const(eps)))

    # per-frame elementwise KL(q(z_t) || P_r(z_t)) in closed form
    diff = tape.sub(mu_t, mu_rt)
    num = tape.add(tape.mul(sig_t, sig_t), tape.mul(diff, diff))
    den = tape.scale(tape.mul(sig_rt, sig_rt), 2.0)
    kl_elem = tape.add(tape.add(tape.sub(logsig_rt, logsig_t),
                                tape.div(num, den)),
                       tape.const(-0.5))

    nxt = tape.concat_cols(z, x)
    pre = tape.affine(nxt, tape.param(layer.w), tape.param(layer.bias))
    return tape.activation(pre, "relu"), kl_elem


def forward_tape(stack, tape, feats, *, samples=None, noise=None, step=0,
                 seq=0, sample_idx=0):
    """Training forward pass recorded on ``tape``.

    ``samples`` carries the per-step weight/basis draws from
    :func:`sample_layer_noise`; latent draws happen here, per sequence.
    Returns ``(score_node, latent_kls)`` where ``latent_kls`` maps layer
    index to the (T, c) elementwise-KL node of that latent layer.
    """
    samples = samples or {}
    x = tape.const(np.asarray(feats, dtype=np.float64))
    latent_kls = {}
    for layer in stack.layers:
        x = splice_tape(tape, x, layer.splice_spec)
        if layer.m is not None:
            x = tape.matmul(x, tape.param(layer.m))
        if layer.mode == "v-tdnn":
            x, kl_elem = _tape_latent_core(layer, tape, x, noise, step, seq,
                                           sample_idx)
            latent_kls[layer.index] = kl_elem
        else:
            x = _tape_core(layer, tape, x, samples)
    scores = tape.affine(x, tape.param(stack.out_w), tape.param(stack.out_bias))
    return scores, latent_kls
