"""Minimal dense neural-network engine.

MLP evaluation, tape-based reverse-mode gradients, Adam, and the scalar
losses the alignment objective is assembled from.  All arithmetic is float64.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from cyclealign import kernels

HIDDEN_ACTIVATIONS = {"relu": kernels.RELU, "tanh": kernels.TANH}
OUTPUT_ACTIVATIONS = {"linear": kernels.LINEAR, "tanh": kernels.TANH, "sigmoid": kernels.SIGMOID}
_CODE_NAMES = {0: "linear", 1: "relu", 2: "tanh", 3: "sigmoid"}

PARAMS_MAGIC = b"CYAL"
PARAMS_VERSION = 1


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class FormatError(ValueError):
    """Raised when a binary artifact cannot be decoded."""


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError(f"MlpSpec needs at least 2 layer sizes, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ValueError(f"MlpSpec layer sizes must be >= 1, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]


@dataclass(eq=False)
class MlpParams:
    spec: MlpSpec
    weights: list
    biases: list

    def arrays(self):
        """Parameter arrays in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def copy(self):
        return MlpParams(self.spec, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def num_parameters(self):
        return sum(a.size for a in self.arrays())

    def digest(self):
        import hashlib

        return hashlib.sha256(params_to_bytes(self)).hexdigest()


def mlp_init(spec: MlpSpec, seed: int) -> MlpParams:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    if not isinstance(spec, MlpSpec):
        spec = MlpSpec(*spec)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


# ---------------------------------------------------------------------------
# tape


class Var:
    """A node on a :class:`Tape`: a float64 array plus how to differentiate it."""

    __slots__ = ("value", "tape", "parents", "op", "backward", "requires_grad", "param_key")

    def __init__(self, value, tape, parents=(), op=None, backward=None, requires_grad=False,
                 param_key=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.op = op
        self.backward = backward
        self.requires_grad = requires_grad
        self.param_key = param_key

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "param" if self.param_key is not None else ("op" if self.op else "const")
        return f"Var({kind}, shape={self.value.shape})"


class Tape:
    """Records operations so gradients of a scalar can be computed in reverse."""

    def __init__(self):
        self.nodes = []
        self._params = {}

    def constant(self, value) -> Var:
        v = Var(np.ascontiguousarray(value, dtype=np.float64), self)
        self.nodes.append(v)
        return v

    def param(self, array: np.ndarray) -> Var:
        """Mark ``array`` as a differentiable leaf (the same array maps to one node)."""
        key = id(array)
        node = self._params.get(key)
        if node is None:
            node = Var(array, self, requires_grad=True, param_key=key)
            self._params[key] = node
            self.nodes.append(node)
        return node

    def marked(self):
        return list(self._params.values())

    def record(self, op, parents, backward) -> Var:
        """Evaluate ``op`` on the parents' values and append the result.

        ``op(*values)`` returns ``(value, cache)``; ``backward(grad, cache, needs)``
        returns one gradient (or None) per parent, where ``needs[i]`` says
        whether parent ``i`` wants one.
        """
        value, cache = op(*[p.value for p in parents])
        node = Var(value, self, tuple(parents), op, None,
                   requires_grad=any(p.requires_grad for p in parents))
        node.backward = (backward, cache)
        self.nodes.append(node)
        return node

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("Var belongs to a different tape")
            return x
        return self.constant(x)

    def replay(self):
        """Re-evaluate every recorded operation from the leaves.

        Returns a dict mapping node index to recomputed value.
        """
        index = {id(n): i for i, n in enumerate(self.nodes)}
        values = {}
        for i, node in enumerate(self.nodes):
            if node.op is None:
                values[i] = node.value
            else:
                values[i], _ = node.op(*[values[index[id(p)]] for p in node.parents])
        return values


class Gradients(dict):
    """Gradient arrays keyed by ``id`` of the parameter array."""

    def of(self, array):
        return self[id(array)]

    def for_mlp(self, params: MlpParams):
        """``(dweights, dbiases)`` for ``params``; zeros where no entry exists."""
        dws = [self.get(id(W), np.zeros_like(W)) for W in params.weights]
        dbs = [self.get(id(b), np.zeros_like(b)) for b in params.biases]
        return dws, dbs


def backprop(tape: Tape, output: Var) -> Gradients:
    """Gradients of scalar ``output`` w.r.t. every parameter marked on ``tape``."""
    if not isinstance(output, Var) or output.tape is not tape:
        raise ValueError("output was not produced under this tape")
    if output.value.size != 1:
        raise ShapeError(f"backprop needs a scalar output, got shape {output.value.shape}")
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    if id(output) not in position:
        raise ValueError("output is not recorded on this tape")
    grads = {id(output): np.ones_like(output.value)}
    for node in reversed(tape.nodes[: position[id(output)] + 1]):
        g = grads.get(id(node))
        if g is None or node.op is None or not node.requires_grad:
            continue
        fn, cache = node.backward
        needs = [p.requires_grad for p in node.parents]
        parent_grads = fn(g, cache, needs)
        for p, pg, need in zip(node.parents, parent_grads, needs):
            if not need or pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    out = Gradients()
    for p in tape.marked():
        g = grads.get(id(p))
        out[p.param_key] = np.zeros_like(p.value) if g is None else g
    return out


# ---------------------------------------------------------------------------
# primitive ops


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _mlp_op(params: MlpParams):
    spec = params.spec
    h_code = HIDDEN_ACTIVATIONS[spec.hidden_activation]
    o_code = OUTPUT_ACTIVATIONS[spec.output_activation]
    n = len(params.weights)

    def op(x, *arrays):
        weights = list(arrays[:n])
        biases = list(arrays[n:])
        acts = kernels.mlp_forward(x, weights, biases, h_code, o_code)
        return acts[-1], (x, weights, acts)

    def backward(g, cache, needs):
        x, weights, acts = cache
        need_params = any(needs[1:])
        dx, dws, dbs = kernels.mlp_backward(
            x, weights, acts, np.ascontiguousarray(g), h_code, o_code, needs[0], need_params)
        if not need_params:
            return [dx] + [None] * (2 * n)
        return [dx] + dws + dbs

    return op, backward


def mlp_forward(params: MlpParams, x, tape: Tape | None = None, trainable: bool = True):
    """Evaluate the MLP on a vector or a (batch, in) matrix.

    Without a tape, returns a numpy array.  With a tape, records one node and
    returns a :class:`Var`; ``trainable=False`` feeds the weights as constants
    so they never receive gradients.
    """
    spec = params.spec
    if tape is None:
        xv = np.asarray(x, dtype=np.float64)
        single = xv.ndim == 1
        xb = np.ascontiguousarray(_as_batch(xv))
        if xb.ndim != 2 or xb.shape[1] != spec.input_dim:
            raise ShapeError(f"MLP expects input dim {spec.input_dim}, got shape {xv.shape}")
        out = kernels.mlp_forward(
            xb, params.weights, params.biases,
            HIDDEN_ACTIVATIONS[spec.hidden_activation], OUTPUT_ACTIVATIONS[spec.output_activation],
        )[-1]
        return out[0] if single else out
    xv = tape.lift(x if isinstance(x, Var) else _as_batch(x))
    if xv.value.ndim != 2 or xv.value.shape[1] != spec.input_dim:
        raise ShapeError(f"MLP expects input dim {spec.input_dim}, got shape {xv.value.shape}")
    leaf = tape.param if trainable else tape.constant
    weights = [leaf(W) for W in params.weights]
    biases = [leaf(b) for b in params.biases]
    op, backward = _mlp_op(params)
    return tape.record(op, [xv] + weights + biases, backward)


def add(a: Var, b: Var) -> Var:
    tape = a.tape
    b = tape.lift(b)
    _check_same(a, b, "add")
    return tape.record(lambda x, y: (x + y, None), [a, b], lambda g, c, n: [g, g])


def sub(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = tape.lift(a), tape.lift(b)
    _check_same(a, b, "sub")
    return tape.record(lambda x, y: (x - y, None), [a, b], lambda g, c, n: [g, -g])


def affine(a: Var, scale, shift) -> Var:
    """Elementwise ``a * scale + shift`` with constant (broadcastable) arrays."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)

    def op(x):
        return x * scale + shift, None

    def backward(g, cache, needs):
        return [_unbroadcast(g * scale, a.value.shape)]

    return a.tape.record(op, [a], backward)


def matmul_const(a: Var, M) -> Var:
    """``a @ M.T`` for a constant matrix ``M`` of shape (out, in)."""
    M = np.asarray(M, dtype=np.float64)
    if a.value.shape[-1] != M.shape[1]:
        raise ShapeError(f"matmul_const: input width {a.value.shape[-1]} != {M.shape[1]}")

    def op(x):
        return x @ M.T, None

    def backward(g, cache, needs):
        return [g @ M]

    return a.tape.record(op, [a], backward)


def concat(parts) -> Var:
    """Concatenate batches along the feature axis."""
    tape = next(p.tape for p in parts if isinstance(p, Var))
    parts = [tape.lift(p) for p in parts]
    rows = {p.value.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat batch sizes differ: {sorted(rows)}")
    widths = [p.value.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def op(*xs):
        return np.concatenate(xs, axis=1), None

    def backward(g, cache, needs):
        return np.split(g, cuts, axis=1)

    return tape.record(op, parts, backward)


def take_columns(a: Var, columns) -> Var:
    columns = np.asarray(columns, dtype=np.intp)
    width = a.value.shape[1]

    def op(x):
        return np.ascontiguousarray(x[:, columns]), None

    def backward(g, cache, needs):
        out = np.zeros((g.shape[0], width))
        np.add.at(out, (slice(None), columns), g)
        return [out]

    return a.tape.record(op, [a], backward)


def take_rows(a: Var, start, stop) -> Var:
    """Rows ``start:stop`` of a batch (used to split a stacked forward pass)."""
    rows = a.value.shape[0]

    def op(x):
        return x[start:stop], None

    def backward(g, cache, needs):
        out = np.zeros((rows,) + g.shape[1:])
        out[start:stop] = g
        return [out]

    return a.tape.record(op, [a], backward)


def stack_rows(parts) -> Var:
    tape = next(p.tape for p in parts if isinstance(p, Var))
    parts = [tape.lift(p) for p in parts]
    cuts = np.cumsum([p.value.shape[0] for p in parts])[:-1]

    def op(*xs):
        return np.concatenate(xs, axis=0), None

    def backward(g, cache, needs):
        return np.split(g, cuts, axis=0)

    return tape.record(op, parts, backward)


def detach(a: Var) -> Var:
    return a.tape.constant(a.value.copy())


def weighted_sum(terms) -> Var:
    """``sum(w * t)`` over ``(weight, scalar Var)`` pairs."""
    terms = list(terms)
    weights = [float(w) for w, _ in terms]
    nodes = [t for _, t in terms]

    def op(*xs):
        total = np.zeros((), dtype=np.float64)
        for w, x in zip(weights, xs):
            total = total + w * x
        return total, None

    def backward(g, cache, needs):
        return [w * g for w in weights]

    return nodes[0].tape.record(op, nodes, backward)


def _check_same(a, b, what):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{what}: shape mismatch {a.value.shape} vs {b.value.shape}")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred, target):
    """Mean absolute difference over all coordinates (and batch rows)."""
    if not isinstance(pred, Var) and not isinstance(target, Var):
        p = np.asarray(pred, dtype=np.float64)
        t = np.asarray(target, dtype=np.float64)
        if p.shape != t.shape:
            raise ShapeError(f"l1_loss: shape mismatch {p.shape} vs {t.shape}")
        if p.size == 0:
            raise ShapeError("l1_loss: empty input")
        return float(np.mean(np.abs(p - t)))
    tape = pred.tape if isinstance(pred, Var) else target.tape
    pred, target = tape.lift(pred), tape.lift(target)
    _check_same(pred, target, "l1_loss")
    if pred.value.size == 0:
        raise ShapeError("l1_loss: empty input")

    def op(p, t):
        d = p - t
        return np.mean(np.abs(d)), np.sign(d) / d.size

    def backward(g, cache, needs):
        return [g * cache, -g * cache]

    return tape.record(op, [pred, target], backward)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def bce_with_logits(logits, label: float):
    """Mean binary cross-entropy of sigmoid(logits) against a constant label."""
    label = float(label)
    if not isinstance(logits, Var):
        z = np.asarray(logits, dtype=np.float64)
        if z.size == 0:
            raise ShapeError("bce_with_logits: empty batch")
        return float(np.mean(label * _softplus(-z) + (1.0 - label) * _softplus(z)))
    if logits.value.size == 0:
        raise ShapeError("bce_with_logits: empty batch")

    def op(z):
        return np.mean(label * _softplus(-z) + (1.0 - label) * _softplus(z)), None

    def backward(g, cache, needs):
        z = logits.value
        return [g * (_sigmoid(z) - label) / z.size]

    return logits.tape.record(op, [logits], backward)


def gan_losses(d_on_real, d_on_fake):
    """Discriminator and (non-saturating) generator losses from logits.

    discriminator: BCE(real, 1) + BCE(fake, 0); generator: BCE(fake, 1).
    Accepts arrays (returns floats) or Vars (returns Vars).
    """
    for name, v in (("d_on_real", d_on_real), ("d_on_fake", d_on_fake)):
        size = v.value.size if isinstance(v, Var) else np.asarray(v).size
        if size == 0:
            raise ShapeError(f"gan_losses: {name} is empty")
    real_term = bce_with_logits(d_on_real, 1.0)
    fake_term = bce_with_logits(d_on_fake, 0.0)
    if isinstance(real_term, Var) or isinstance(fake_term, Var):
        tape = (real_term if isinstance(real_term, Var) else fake_term).tape
        disc = weighted_sum([(1.0, tape.lift(real_term)), (1.0, tape.lift(fake_term))])
    else:
        disc = real_term + fake_term
    return disc, bce_with_logits(d_on_fake, 1.0)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moments: list
    second_moments: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, arrays, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                   0, beta1, beta2, epsilon)


def adam_step(params, gradients, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place.

    ``params`` and ``gradients`` are parallel lists of arrays (or an
    :class:`MlpParams` and a :class:`Gradients`).  Returns ``(params, state)``.
    """
    arrays = params.arrays() if isinstance(params, MlpParams) else list(params)
    if isinstance(gradients, Gradients):
        grads = [gradients.get(id(a), np.zeros_like(a)) for a in arrays]
    else:
        grads = list(gradients)
    if len(grads) != len(arrays) or len(state.first_moments) != len(arrays):
        raise ShapeError("adam_step: parameter, gradient and state counts differ")
    for a, g, m in zip(arrays, grads, state.first_moments):
        if a.shape != np.shape(g) or a.shape != m.shape:
            raise ShapeError(f"adam_step: shape mismatch {a.shape} / {np.shape(g)} / {m.shape}")
    state.step_count += 1
    for a, g, m, v in zip(arrays, grads, state.first_moments, state.second_moments):
        kernels.adam_update(a, np.ascontiguousarray(g, dtype=np.float64), m, v, float(lr),
                            state.beta1, state.beta2, state.epsilon, state.step_count)
    return params, state


# ---------------------------------------------------------------------------
# checkpoint format


def write_params(stream, params: MlpParams):
    spec = params.spec
    stream.write(PARAMS_MAGIC)
    stream.write(struct.pack("<I", PARAMS_VERSION))
    stream.write(struct.pack("<I", len(spec.layer_sizes)))
    stream.write(struct.pack(f"<{len(spec.layer_sizes)}I", *spec.layer_sizes))
    stream.write(struct.pack("<BB", HIDDEN_ACTIVATIONS[spec.hidden_activation],
                             OUTPUT_ACTIVATIONS[spec.output_activation]))
    for a in params.arrays():
        stream.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_exact(stream, n, what):
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated: expected {n} bytes for {what}, got {len(data)}")
    return data


def read_params(stream) -> MlpParams:
    magic = _read_exact(stream, 4, "magic")
    if magic != PARAMS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PARAMS_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(stream, 4, "version"))
    if version != PARAMS_VERSION:
        raise FormatError(f"version mismatch: file has {version}, reader supports {PARAMS_VERSION}")
    (count,) = struct.unpack("<I", _read_exact(stream, 4, "layer count"))
    sizes = struct.unpack(f"<{count}I", _read_exact(stream, 4 * count, "layer sizes"))
    h_code, o_code = struct.unpack("<BB", _read_exact(stream, 2, "activation codes"))
    spec = MlpSpec(sizes, _CODE_NAMES[h_code], _CODE_NAMES[o_code])
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(_read_exact(stream, 8 * fan_in * fan_out, "weights"), dtype="<f8")
        b = np.frombuffer(_read_exact(stream, 8 * fan_out, "biases"), dtype="<f8")
        weights.append(w.astype(np.float64).reshape(fan_out, fan_in))
        biases.append(b.astype(np.float64))
    return MlpParams(spec, weights, biases)


def params_to_bytes(params: MlpParams) -> bytes:
    buf = io.BytesIO()
    write_params(buf, params)
    return buf.getvalue()


def params_from_bytes(data: bytes) -> MlpParams:
    return read_params(io.BytesIO(data))


def save_params(params: MlpParams, path):
    with open(path, "wb") as f:
        write_params(f, params)


def load_params(path) -> MlpParams:
    with open(path, "rb") as f:
        return read_params(f)
