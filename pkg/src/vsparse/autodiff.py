"""Minimal dense tensor engine with reverse-mode differentiation.

Everything is float64.  A Tensor remembers the tensors it was computed
from together with a closure that routes the output gradient back to
them; backward() walks that implicit tape once, accumulates gradients
into the leaves and then tears the graph down so a second call fails
loudly instead of silently reusing stale state.

Shapes are strict: no broadcasting beyond the explicit row-bias add.
Every op checks its result for NaN/Inf and raises NumericError rather
than letting poison propagate.
"""

import contextlib
import struct

import numpy as np

from .errors import FormatError, NumericError, ShapeError, StaleTapeError, UsageError

LEAKY_SLOPE = 0.01

_grad_enabled = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    """A dense float64 array plus an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values):
    """Wrap an array as a non-differentiable tensor."""
    return Tensor(values, requires_grad=False)


def parameter(values):
    """Wrap an array as a trainable leaf."""
    return Tensor(values, requires_grad=True)


def _result(op, values, parents, backward):
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    track = _grad_enabled[-1] and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result("add", a.values + b.values, (a, b), back)


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result("sub", a.values - b.values, (a, b), back)


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        _accumulate(a, g * bv)
        _accumulate(b, g * av)

    return _result("mul", av * bv, (a, b), back)


def scale(a, c):
    c = float(c)

    def back(g):
        _accumulate(a, g * c)

    return _result("scale", a.values * c, (a,), back)


def add_const(a, c):
    c = float(c)

    def back(g):
        _accumulate(a, g)

    return _result("add_const", a.values + c, (a,), back)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        _accumulate(a, g @ bv.T)
        _accumulate(b, av.T @ g)

    return _result("matmul", av @ bv, (a, b), back)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: rank {a.ndim}")

    def back(g):
        _accumulate(a, g.T)

    return _result("transpose", a.values.T, (a,), back)


def add_row_bias(a, bias):
    """a[n, d] + bias[d] broadcast over rows — the only broadcast allowed."""
    if a.ndim != 2 or bias.ndim != 1 or a.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_row_bias: {a.shape} + {bias.shape}")

    def back(g):
        _accumulate(a, g)
        _accumulate(bias, g.sum(axis=0))

    return _result("add_row_bias", a.values + bias.values[None, :], (a, bias), back)


def leaky_relu(a, slope=LEAKY_SLOPE):
    av = a.values
    factor = np.where(av > 0.0, 1.0, slope)

    def back(g):
        _accumulate(a, g * factor)

    return _result("leaky_relu", av * factor, (a,), back)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-np.clip(a.values, -500.0, 500.0)))

    def back(g):
        _accumulate(a, g * out * (1.0 - out))

    return _result("sigmoid", out, (a,), back)


def tanh(a):
    out = np.tanh(a.values)

    def back(g):
        _accumulate(a, g * (1.0 - out * out))

    return _result("tanh", out, (a,), back)


def square(a):
    av = a.values

    def back(g):
        _accumulate(a, 2.0 * av * g)

    return _result("square", av * av, (a,), back)


def sum_all(a):
    shape = a.shape

    def back(g):
        _accumulate(a, float(g) * np.ones(shape))

    return _result("sum_all", a.values.sum(), (a,), back)


def mean_all(a):
    if a.values.size == 0:
        raise ShapeError("mean_all of empty tensor")
    return scale(sum_all(a), 1.0 / a.values.size)


def concat(tensors, axis=0):
    """Concatenate 2-D tensors along rows (axis 0) or columns (axis 1)."""
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis {axis}")
    if not tensors:
        raise ShapeError("concat of no tensors")
    for t in tensors:
        if t.ndim != 2:
            raise ShapeError("concat expects rank-2 tensors")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
            _accumulate(t, piece)

    values = np.concatenate([t.values for t in tensors], axis=axis)
    return _result("concat", values, tuple(tensors), back)


def stack(tensors):
    """Stack same-shape 2-D tensors into a rank-3 tensor along a new axis 0."""
    if not tensors:
        raise ShapeError("stack of no tensors")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack: {t.shape} vs {shape}")

    def back(g):
        for idx, t in enumerate(tensors):
            _accumulate(t, g[idx])

    values = np.stack([t.values for t in tensors], axis=0)
    return _result("stack", values, tuple(tensors), back)


def index_axis0(a, k):
    """Select slice k along the leading axis (inverse of stack)."""
    if not 0 <= k < a.shape[0]:
        raise ShapeError(f"index_axis0: {k} out of {a.shape[0]}")
    shape = a.shape

    def back(g):
        z = np.zeros(shape)
        z[k] = g
        _accumulate(a, z)

    return _result("index_axis0", a.values[k], (a,), back)


def gather_rows(a, idx):
    """a[idx, :] for a rank-2 tensor; duplicate indices scatter-add on backward."""
    if a.ndim != 2:
        raise ShapeError("gather_rows expects rank-2")
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        _accumulate(a, z)

    return _result("gather_rows", a.values[idx], (a,), back)


def gather_cols(a, idx):
    if a.ndim != 2:
        raise ShapeError("gather_cols expects rank-2")
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        z = np.zeros((shape[1], shape[0]))
        np.add.at(z, idx, g.T)
        _accumulate(a, z.T)

    return _result("gather_cols", a.values[:, idx], (a,), back)


def _softmax_values(x, axis, extra_mass):
    # Shift by max(logits, 0) per fiber: exact for the extra-mass form because
    # extra_mass * exp(-shift) is folded into the denominator, and never
    # overflows since the shift is nonnegative.
    shift = np.maximum(x.max(axis=axis, keepdims=True), 0.0)
    num = np.exp(x - shift)
    den = extra_mass * np.exp(-shift) + num.sum(axis=axis, keepdims=True)
    return num / den


def softmax(a, axis):
    """Standard softmax along one axis; rows sum to 1."""
    out = _softmax_values(a.values, axis, 0.0)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _result("softmax", out, (a,), back)


def softmax_extra(a, axis, extra_mass):
    """Softmax with a constant extra competitor in the denominator.

    out = exp(x) / (extra_mass + sum_axis exp(x)); sums along the axis to
    strictly less than 1 when extra_mass > 0.  The Jacobian has the same
    form as plain softmax because the extra mass does not depend on x.
    """
    if extra_mass < 0:
        raise UsageError("extra_mass must be nonnegative")
    out = _softmax_values(a.values, axis, float(extra_mass))

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _result("softmax_extra", out, (a,), back)


def binary_cross_entropy(p, targets, clamp=1e-12):
    """Elementwise -q log p - (1-q) log(1-p) against constant targets q.

    p is clamped to [clamp, 1-clamp] before the logs; the gradient is zero
    where the clamp is active, matching the derivative of the clamped
    composite.
    """
    q = np.asarray(targets, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"binary_cross_entropy: {p.shape} vs {q.shape}")
    pv = np.clip(p.values, clamp, 1.0 - clamp)
    inside = (p.values >= clamp) & (p.values <= 1.0 - clamp)
    out = -(q * np.log(pv) + (1.0 - q) * np.log1p(-pv))

    def back(g):
        _accumulate(p, g * inside * (-q / pv + (1.0 - q) / (1.0 - pv)))

    return _result("binary_cross_entropy", out, (p,), back)


def mlp_forward(x, layers, activation="leaky_relu"):
    """Affine chain with leaky rectifier between layers, nothing after the last.

    ``layers`` is a list of (weight, bias) tensor pairs.
    """
    if activation not in ("leaky_relu", "none"):
        raise UsageError(f"unknown activation '{activation}'")
    for i, (w, b) in enumerate(layers):
        x = add_row_bias(matmul(x, w), b)
        if activation == "leaky_relu" and i + 1 < len(layers):
            x = leaky_relu(x)
    return x


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topological_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(loss, seed=1.0):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad slot.

    ``seed`` scales the whole gradient (used for batch averaging).  The
    graph is torn down afterwards; calling backward on the same tensor
    again raises StaleTapeError.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward expects a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise StaleTapeError("backward called twice on the same graph")
    loss._consumed = True
    if not loss.requires_grad:
        return  # constant loss: nothing depends on any leaf
    order = _topological_order(loss)
    loss.grad = np.asarray(float(seed))
    for node in reversed(order):
        if node._backward is None:
            continue  # leaf
        g = node.grad
        if g is not None:
            node._backward(g)
        node.grad = None
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

_OPT_PREFIX = "opt/"
_META_PREFIX = "meta/"


class ParamStore:
    """Named trainable tensors plus per-parameter Adam accumulators."""

    def __init__(self):
        self._params = {}
        self.moment1 = {}
        self.moment2 = {}
        self.steps = {}

    def add(self, name, values):
        if name in self._params:
            raise UsageError(f"duplicate parameter '{name}'")
        if name.startswith((_OPT_PREFIX, _META_PREFIX)):
            raise UsageError(f"parameter name '{name}' uses a reserved prefix")
        t = parameter(np.array(values, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def n_values(self):
        return sum(t.values.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    # -- persistence --------------------------------------------------------

    def save(self, path, include_optimizer=True, extra=None):
        arrays = {n: t.values for n, t in self.items()}
        if include_optimizer:
            for n in self.names():
                if n in self.moment1:
                    arrays[_OPT_PREFIX + "m/" + n] = self.moment1[n]
                    arrays[_OPT_PREFIX + "v/" + n] = self.moment2[n]
                    arrays[_OPT_PREFIX + "t/" + n] = np.asarray(float(self.steps[n]))
        for key, val in (extra or {}).items():
            arrays[_META_PREFIX + key] = np.asarray(val, dtype=np.float64)
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path):
        """Returns (store, extra) where extra holds the saved meta scalars."""
        arrays = load_arrays(path)
        store = cls()
        extra = {}
        for name, values in arrays.items():
            if name.startswith(_OPT_PREFIX):
                kind, pname = name[len(_OPT_PREFIX):].split("/", 1)
                if kind == "m":
                    store.moment1[pname] = values
                elif kind == "v":
                    store.moment2[pname] = values
                else:
                    store.steps[pname] = int(values.reshape(-1)[0])
            elif name.startswith(_META_PREFIX):
                extra[name[len(_META_PREFIX):]] = values
            else:
                store._params[name] = parameter(values)
        for pname in store.moment1:
            if pname not in store._params:
                raise FormatError(f"optimizer state for unknown parameter '{pname}'")
        return store, extra


def adam_step(store, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update over every parameter in the store; grads then cleared.

    Parameters frozen via ``requires_grad = False`` are skipped; everything
    else must carry a gradient or the call is a usage error.
    """
    b1, b2 = betas
    for name, t in store.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise UsageError(f"adam_step: parameter '{name}' has no gradient")
        g = t.grad
        m = store.moment1.get(name)
        v = store.moment2.get(name)
        if m is None:
            m = np.zeros_like(t.values)
            v = np.zeros_like(t.values)
        step = store.steps.get(name, 0) + 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        t.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(t.values)):
            raise NumericError(f"adam_step produced non-finite values in '{name}'")
        store.moment1[name] = m
        store.moment2[name] = v
        store.steps[name] = step
        t.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Outcome of grad_check: worst relative error and where it occurred."""

    def __init__(self, ok, max_rel_error, worst_param, n_checked, failures):
        self.ok = ok
        self.max_rel_error = max_rel_error
        self.worst_param = worst_param
        self.n_checked = n_checked
        self.failures = failures

    def __repr__(self):
        status = "ok" if self.ok else "FAILED"
        return (f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3e} "
                f"at '{self.worst_param}', {self.n_checked} components)")


def grad_check(f, store, tolerance=1e-3, eps=1e-4):
    """Compare backward() gradients of scalar f(store) to central differences.

    f must be deterministic and rebuild its graph on every call.  The
    relative error for one component is |a - n| / max(1, |a| + |n|), so
    tiny gradients are compared absolutely.
    """
    store.zero_grads()
    loss = f(store)
    backward(loss)
    analytic = {}
    for name, t in store.items():
        analytic[name] = np.zeros_like(t.values) if t.grad is None else t.grad.copy()
    store.zero_grads()

    max_err, worst, n_checked, failures = 0.0, "", 0, []
    for name, t in store.items():
        flat = t.values.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            v0 = flat[i]
            with no_grad():
                flat[i] = v0 + eps
                hi = float(f(store).values)
                flat[i] = v0 - eps
                lo = float(f(store).values)
            flat[i] = v0
            numeric = (hi - lo) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            n_checked += 1
            if err > max_err:
                max_err, worst = err, f"{name}[{i}]"
            if err > tolerance:
                failures.append((name, i, float(a), numeric, err))
    return GradCheckReport(not failures, max_err, worst, n_checked, failures)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"VSPC"
_VERSION = 1


def save_arrays(path, arrays):
    """Write named float64 arrays: magic, version, then per-array records."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.astype("<f8").tobytes())


def load_arrays(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}", offset=0)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    arrays, pos = {}, 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise FormatError("truncated checkpoint", offset=pos)
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    while pos < len(blob):
        (name_len,) = take("<I")
        if pos + name_len > len(blob):
            raise FormatError("truncated checkpoint name", offset=pos)
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        shape = tuple(take("<I")[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if pos + nbytes > len(blob):
            raise FormatError(f"truncated values for '{name}'", offset=pos)
        values = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8").reshape(shape)
        pos += nbytes
        arrays[name] = values.astype(np.float64)
    return arrays
