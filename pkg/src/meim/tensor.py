"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is stored row-major as a flat numpy buffer. The op set is
deliberately small: exactly the contractions, reductions and layers that
the scoring and training paths need. Each op computes its value eagerly
and, when a GradTape is active and an input requires gradients, records
the output node together with a vector-Jacobian closure. Replaying the
tape in reverse execution order accumulates adjoints; a parameter used in
several places receives the sum of its per-use contributions.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ShapeError, ValidationError

_LOG_FLOOR = 1e-300


class _TapeStack(threading.local):
    """Per-thread stack of active tapes; ops record on the innermost one.

    Thread-local so read-only scoring on worker threads can never append
    to a tape owned by the training thread.
    """

    def __init__(self):
        self.stack: list["GradTape"] = []


_TAPES = _TapeStack()


class Tensor:
    """Dense float64 array node of the computation graph.

    Treat the data as immutable once the tensor participates in a taped
    forward pass; in-place mutation is reserved for optimizer updates on
    leaf parameters between passes.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def transpose(self, axes):
        return transpose(self, axes)


class GradTape:
    """Ordered record of one forward pass, replayed backwards for adjoints.

    Single-writer: one forward/backward pass owns one tape. Nodes are
    appended in execution order, so iterating the record in reverse visits
    operations in exact reverse execution order.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        assert popped is self, "GradTape exited out of order"
        return False

    def __len__(self) -> int:
        return len(self._nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    if not _TAPES.stack or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = parents
    out._vjp = vjp
    _TAPES.stack[-1]._nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ops ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g * (2.0 * a.data),)

    return _node(a.data * a.data, (a,), vjp)


def abs_pow(a, p: float) -> Tensor:
    """|x| ** p with the almost-everywhere derivative p * |x|**(p-1) * sign(x)."""
    a = as_tensor(a)
    absx = np.abs(a.data)
    out = absx**p

    def vjp(g):
        return (g * (p * absx ** (p - 1.0) * np.sign(a.data)),)

    return _node(out, (a,), vjp)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g * np.cos(a.data),)

    return _node(np.sin(a.data), (a,), vjp)


# -- shape ops -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(a.data.reshape(shape), (a,), vjp)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _node(np.swapaxes(a.data, axis1, axis2), (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _node(a.data.transpose(axes), (a,), vjp)


def concat_rows(a, b) -> Tensor:
    """Concatenate along axis 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"cannot concatenate rows of shapes {a.shape} and {b.shape}")
    n = a.shape[0]

    def vjp(g):
        return g[:n], g[n:]

    return _node(np.concatenate([a.data, b.data], axis=0), (a, b), vjp)


def gather_rows(a, indices) -> Tensor:
    """Select rows along axis 0; the adjoint scatter-adds duplicates."""
    a = as_tensor(a)
    idx = np.asarray(indices)

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _node(a.data[idx], (a,), vjp)


# -- reductions ------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        g_exp = g
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(ax % a.ndim for ax in axes):
                g_exp = np.expand_dims(g_exp, ax)
        return (np.broadcast_to(g_exp, a.shape),)

    return _node(out, (a,), vjp)


# -- contractions ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """np.matmul semantics on stacks of matrices, with batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner axes disagree: {a.shape} (axis {a.ndim - 1}) vs {b.shape} (axis {b.ndim - 2})"
        )
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), vjp)


def n_mode_product(core, vec, mode: int) -> Tensor:
    """Contract a rank-3 tensor with a vector along `mode` (1-indexed).

    The remaining two axes keep their original order, so for mode 3
    out[i, j] = sum_l core[i, j, l] * vec[l].
    """
    core, vec = as_tensor(core), as_tensor(vec)
    if core.ndim != 3:
        raise ShapeError(f"n_mode_product needs a rank-3 core, got rank {core.ndim}")
    if vec.ndim != 1:
        raise ShapeError(f"n_mode_product needs a rank-1 vector, got rank {vec.ndim}")
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode}")
    axis = mode - 1
    if core.shape[axis] != vec.shape[0]:
        raise ShapeError(
            f"axis {axis} of core has size {core.shape[axis]} but vector has length {vec.shape[0]}"
        )
    kept = tuple(ax for ax in range(3) if ax != axis)
    moved = transpose(core, kept + (axis,))
    rows = moved.shape[0] * moved.shape[1]
    flat = reshape(moved, (rows, vec.shape[0]))
    out = matmul(flat, reshape(vec, (vec.shape[0], 1)))
    return reshape(out, (moved.shape[0], moved.shape[1]))


def batched_bilinear(h, m, t) -> Tensor:
    """Per-example quadratic form out[n] = h[n]^T m[n] t[n].

    h: (N, C), m: (N, C, C), t: (N, C) -> (N,).
    """
    h, m, t = as_tensor(h), as_tensor(m), as_tensor(t)
    if h.ndim != 2 or t.ndim != 2 or m.ndim != 3:
        raise ShapeError(
            f"batched_bilinear expects (N,C), (N,C,C), (N,C); got {h.shape}, {m.shape}, {t.shape}"
        )
    if not (h.shape[0] == m.shape[0] == t.shape[0]):
        raise ShapeError(
            f"batch sizes disagree: {h.shape[0]}, {m.shape[0]}, {t.shape[0]} (axis 0)"
        )
    n, c = h.shape
    left = matmul(reshape(h, (n, 1, c)), m)  # (N, 1, C)
    out = matmul(left, reshape(t, (n, c, 1)))  # (N, 1, 1)
    return reshape(out, (n,))


# -- losses ------------------------------------------------------------------


def _check_target_rows(weights_sum: np.ndarray):
    bad = np.abs(weights_sum - 1.0) > 1e-9
    if np.any(bad):
        row = int(np.argmax(bad))
        raise ValidationError(
            f"target row {row} sums to {weights_sum.flat[row]:.12g}, expected 1 within 1e-9"
        )


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Total cross-entropy between row-softmax of `logits` and dense `targets`.

    Stabilized by per-row max subtraction; probabilities are floored at
    1e-300 before the log. Every target row must sum to one within 1e-9.
    Returns the sum over rows as a scalar.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got shape {logits.shape}")
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} does not match logits shape {logits.shape}")
    _check_target_rows(t.sum(axis=1))

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    value = -(t * np.log(np.maximum(p, _LOG_FLOOR))).sum()

    def vjp(g):
        return (g * (p - t),)

    return _node(np.float64(value), (logits,), vjp)


def softmax_cross_entropy_sparse(logits, rows) -> Tensor:
    """softmax_cross_entropy with per-row sparse targets.

    `rows` is a sequence of (ids, weights) pairs, one per logits row, each
    weight vector summing to one. Equivalent to densifying the targets but
    never materializes the (N, E) target matrix; the log only touches the
    target positions.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got shape {logits.shape}")
    if len(rows) != logits.shape[0]:
        raise ShapeError(f"{len(rows)} target rows for {logits.shape[0]} logits rows")
    lengths = np.array([len(ids) for ids, _ in rows])
    if np.any(lengths == 0):
        raise ValidationError(f"target row {int(np.argmax(lengths == 0))} is empty")
    ids_cat = np.concatenate([ids for ids, _ in rows])
    w_cat = np.concatenate([w for _, w in rows]).astype(np.float64)
    row_rep = np.repeat(np.arange(len(rows)), lengths)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    _check_target_rows(np.add.reduceat(w_cat, offsets))

    buf = logits.data - logits.data.max(axis=1, keepdims=True)
    np.exp(buf, out=buf)
    buf /= buf.sum(axis=1, keepdims=True)  # buf now holds the softmax rows
    picked = buf[row_rep, ids_cat]
    value = -float(w_cat @ np.log(np.maximum(picked, _LOG_FLOOR)))

    def vjp(g):
        # single use per backward pass: consumes the probability buffer
        buf[row_rep, ids_cat] -= w_cat  # (n, id) pairs are unique
        np.multiply(buf, g, out=buf)
        return (buf,)

    return _node(np.float64(value), (logits,), vjp)


# -- layers ------------------------------------------------------------------


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scales kept entries by 1/(1-rate) at train time."""
    x = as_tensor(x)
    if not (0.0 <= rate < 1.0):
        raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValidationError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def vjp(g):
        return (g * keep,)

    return _node(x.data * keep, (x,), vjp)


class BatchNorm:
    """Per-feature batch normalization with affine transform and running stats.

    Training mode normalizes by batch statistics (biased variance) and
    updates exponential running averages; evaluation mode normalizes by
    the stored running statistics, which then act as constants.
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def __call__(self, x, training: bool) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise ShapeError(
                f"batch norm expects (batch, {self.num_features}), got {x.shape}"
            )
        gamma, beta = self.gamma, self.beta
        if training:
            mean = x.data.mean(axis=0)
            var = x.data.var(axis=0)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x.data - mean) * inv
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
            n = x.shape[0]

            def vjp(g):
                gy = g * gamma.data
                dx = inv / n * (n * gy - gy.sum(axis=0) - xhat * (gy * xhat).sum(axis=0))
                return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x.data - self.running_mean) * inv

            def vjp(g):
                return g * (gamma.data * inv), (g * xhat).sum(axis=0), g.sum(axis=0)

        out = gamma.data * xhat + beta.data
        return _node(out, (x, gamma, beta), vjp)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "gamma": self.gamma.data,
            "beta": self.beta.data,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.gamma.data = np.array(arrays["gamma"], dtype=np.float64)
        self.beta.data = np.array(arrays["beta"], dtype=np.float64)
        self.running_mean = np.array(arrays["running_mean"], dtype=np.float64)
        self.running_var = np.array(arrays["running_var"], dtype=np.float64)


# -- differentiation ---------------------------------------------------------


def backward(tape: GradTape, loss: Tensor, leaves) -> list[np.ndarray]:
    """Adjoints of scalar `loss` for every tensor in `leaves`.

    Visits the tape in exact reverse execution order; a leaf used in
    several places receives the sum of its per-use adjoints, and leaves
    that never fed the loss get zero gradients. A tape supports one
    backward pass: some ops consume their cached buffers when replayed.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = grads.get(id(parent))
            # functional accumulation: never mutate a stored array in place
            grads[id(parent)] = pg if held is None else held + pg
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        out.append(np.zeros_like(leaf.data) if g is None else np.ascontiguousarray(g))
    return out


def finite_diff_check(function, params, step: float = 1e-5) -> float:
    """Max relative error between taped gradients and central differences.

    `function` maps the given parameter tensors to a scalar Tensor and must
    be deterministic (dropout disabled, batch norm in a fixed mode). The
    error for each coordinate is |analytic - numeric| / max(1, |analytic|);
    a NaN in any probe reports as infinity.
    """
    with GradTape() as tape:
        loss = function(params)
    analytic = backward(tape, loss, params)

    worst = 0.0
    for p, grad in zip(params, analytic):
        # index assignment (not a flat view) so probes reach non-contiguous data
        for idx in np.ndindex(*p.data.shape):
            saved = p.data[idx]
            p.data[idx] = saved + step
            up = function(params).item()
            p.data[idx] = saved - step
            down = function(params).item()
            p.data[idx] = saved
            numeric = (up - down) / (2.0 * step)
            if not np.isfinite(numeric):
                return float("inf")
            err = abs(grad[idx] - numeric) / max(1.0, abs(grad[idx]))
            worst = max(worst, err)
    return worst
