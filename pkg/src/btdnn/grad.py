"""Minimal dense-array compute layer with reverse-mode gradients.

Conventions used throughout the package:

* matrices are 2-D C-contiguous ``float64`` numpy arrays, frames as rows;
* a :class:`Tape` records every primitive application together with the
  forward values its backward rule needs;
* :func:`backward` replays the tape once in reverse and returns a gradient
  per named parameter (exact zeros for registered-but-unused parameters).

This is not a general autodiff engine: the primitive set is exactly what the
model forward passes require, there is no control-flow capture and no
higher-order differentiation.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TapeError


@dataclass
class Param:
    """A named parameter array. ``trainable=False`` marks frozen arrays
    (priors) that are checkpointed but never updated."""

    name: str
    value: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)


class Node:
    """One tape entry: a forward value plus the local backward rules."""

    __slots__ = ("value", "parents", "vjps", "param_name")

    def __init__(self, value, parents=(), vjps=(), param_name=None):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.param_name = param_name

    @property
    def shape(self):
        return np.shape(self.value)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape))
                 if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, x, 0.0)


_ACTIVATIONS = {
    "sigmoid": (sigmoid, lambda x, out: out * (1.0 - out)),
    "tanh": (np.tanh, lambda x, out: 1.0 - out * out),
    "relu": (relu, lambda x, out: (x > 0).astype(np.float64)),
}

ACTIVATION_KINDS = tuple(_ACTIVATIONS)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._nodes = []
        self._param_nodes = {}

    # -- leaves -----------------------------------------------------------

    def const(self, value):
        """Constant leaf; receives no gradient."""
        node = Node(np.asarray(value, dtype=np.float64))
        self._nodes.append(node)
        return node

    def param(self, p):
        """Leaf bound to a named parameter; one node per name per tape."""
        node = self._param_nodes.get(p.name)
        if node is None:
            node = Node(p.value, param_name=p.name)
            self._param_nodes[p.name] = node
            self._nodes.append(node)
        return node

    def named_value(self, name, value):
        """Leaf carrying an externally computed array under a gradient name
        (used for per-step sampled weights)."""
        if name in self._param_nodes:
            return self._param_nodes[name]
        node = Node(np.asarray(value, dtype=np.float64), param_name=name)
        self._param_nodes[name] = node
        self._nodes.append(node)
        return node

    # -- primitives -------------------------------------------------------

    def _record(self, value, parents, vjps):
        node = Node(value, tuple(parents), tuple(vjps))
        self._nodes.append(node)
        return node

    def matmul(self, a, b):
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeError("matmul inner dimensions disagree",
                             a.value.shape, b.value.shape)
        av, bv = a.value, b.value
        return self._record(av @ bv, (a, b),
                            (lambda g: g @ bv.T, lambda g: av.T @ g))

    def affine(self, x, w, bias):
        """x @ w + bias, the fused layer primitive."""
        if x.value.shape[1] != w.value.shape[0]:
            raise ShapeError("affine input/weight dimensions disagree",
                             x.value.shape, w.value.shape)
        if bias.value.shape != (w.value.shape[1],):
            raise ShapeError("affine bias shape disagrees with weights",
                             bias.value.shape, w.value.shape)
        xv, wv = x.value, w.value
        out = xv @ wv + bias.value
        return self._record(out, (x, w, bias),
                            (lambda g: g @ wv.T,
                             lambda g: xv.T @ g,
                             lambda g: g.sum(axis=0)))

    def add(self, a, b):
        ash, bsh = a.shape, b.shape
        return self._record(a.value + b.value, (a, b),
                            (lambda g: _unbroadcast(g, ash),
                             lambda g: _unbroadcast(g, bsh)))

    def sub(self, a, b):
        ash, bsh = a.shape, b.shape
        return self._record(a.value - b.value, (a, b),
                            (lambda g: _unbroadcast(g, ash),
                             lambda g: _unbroadcast(-g, bsh)))

    def mul(self, a, b):
        ash, bsh = a.shape, b.shape
        av, bv = a.value, b.value
        return self._record(av * bv, (a, b),
                            (lambda g: _unbroadcast(g * bv, ash),
                             lambda g: _unbroadcast(g * av, bsh)))

    def div(self, a, b):
        ash, bsh = a.shape, b.shape
        av, bv = a.value, b.value
        return self._record(av / bv, (a, b),
                            (lambda g: _unbroadcast(g / bv, ash),
                             lambda g: _unbroadcast(-g * av / (bv * bv), bsh)))

    def scale(self, a, c):
        c = float(c)
        return self._record(a.value * c, (a,), (lambda g: g * c,))

    def exp(self, a):
        out = np.exp(a.value)
        return self._record(out, (a,), (lambda g: g * out,))

    def log(self, a):
        av = a.value
        return self._record(np.log(av), (a,), (lambda g: g / av,))

    def activation(self, x, kind):
        try:
            fwd, deriv = _ACTIVATIONS[kind]
        except KeyError:
            raise ConfigError(f"unknown activation kind: {kind!r}") from None
        xv = x.value
        out = fwd(xv)
        return self._record(out, (x,), (lambda g: g * deriv(xv, out),))

    def gather_rows(self, x, idx):
        """x[idx] for an integer row-index vector; backward scatter-adds."""
        idx = np.asarray(idx, dtype=np.int64)
        xsh = x.shape

        def vjp(g):
            gx = np.zeros(xsh)
            np.add.at(gx, idx, g)
            return gx

        return self._record(x.value[idx], (x,), (vjp,))

    def concat_cols(self, *parts):
        widths = [p.value.shape[1] for p in parts]
        bounds = np.cumsum([0] + widths)
        vjps = tuple((lambda lo, hi: lambda g: g[:, lo:hi])(bounds[i], bounds[i + 1])
                     for i in range(len(parts)))
        return self._record(np.concatenate([p.value for p in parts], axis=1),
                            parts, vjps)

    def slice_cols(self, x, lo, hi):
        xsh = x.shape

        def vjp(g):
            gx = np.zeros(xsh)
            gx[:, lo:hi] = g
            return gx

        return self._record(np.ascontiguousarray(x.value[:, lo:hi]), (x,), (vjp,))

    def slice_rows(self, x, lo, hi):
        xsh = x.shape

        def vjp(g):
            gx = np.zeros(xsh)
            gx[lo:hi, :] = g
            return gx

        return self._record(np.ascontiguousarray(x.value[lo:hi, :]), (x,), (vjp,))

    def sum(self, x):
        """Full reduction to a python float node."""
        xsh = x.shape
        return self._record(float(np.sum(x.value)), (x,),
                            (lambda g: np.full(xsh, g),))

    # -- reverse sweep ------------------------------------------------------

    def gradients(self, seeds, params=None):
        """Reverse-replay the tape once.

        ``seeds`` maps output nodes to their upstream gradients.  Returns a
        dict ``name -> gradient`` covering every named leaf on the tape plus
        every entry of ``params`` (exact zeros when untouched).
        """
        if not self._nodes:
            raise TapeError("backward called on an empty tape")
        grads = {}
        for node, g in seeds.items():
            if np.isscalar(node.value):
                grads[id(node)] = float(g)
            else:
                g = np.asarray(g, dtype=np.float64)
                if g.shape != node.value.shape:
                    raise ShapeError("seed gradient shape disagrees with node",
                                     g.shape, node.value.shape)
                grads[id(node)] = g

        out = {}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.param_name is not None:
                acc = out.get(node.param_name)
                out[node.param_name] = g if acc is None else acc + g
            for parent, vjp in zip(node.parents, node.vjps):
                pg = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        for name, node in self._param_nodes.items():
            if name not in out:
                out[name] = np.zeros_like(node.value)
        if params is not None:
            for p in params:
                if p.name not in out:
                    out[p.name] = np.zeros_like(p.value)
        return out

    @property
    def last(self):
        if not self._nodes:
            raise TapeError("tape is empty")
        return self._nodes[-1]

    def __len__(self):
        return len(self._nodes)


# -- module-level operation wrappers ---------------------------------------

def affine_forward(tape, x, w, bias):
    """Record ``x @ w + bias`` on ``tape``; inputs may be Nodes or arrays."""
    x = x if isinstance(x, Node) else tape.const(x)
    w = w if isinstance(w, Node) else tape.const(w)
    bias = bias if isinstance(bias, Node) else tape.const(bias)
    return tape.affine(x, w, bias)


def activation_forward(tape, x, kind):
    """Record an elementwise activation on ``tape``."""
    x = x if isinstance(x, Node) else tape.const(x)
    return tape.activation(x, kind)


def backward(tape, loss_grad, output=None, params=None):
    """Gradient map for one completed forward pass.

    ``loss_grad`` is the gradient of the loss with respect to ``output``
    (the last recorded node when omitted).  Pass a ``{node: seed}`` dict as
    ``loss_grad`` with ``output=None`` to seed several outputs at once.
    """
    if isinstance(loss_grad, dict):
        seeds = loss_grad
    else:
        seeds = {output if output is not None else tape.last: loss_grad}
    return tape.gradients(seeds, params=params)
