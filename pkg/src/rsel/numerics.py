"""Minimal dense-tensor kernel with reverse-mode gradients.

The encoder architecture is fixed, so there is no general graph engine:
each op computes its forward value with numpy and records one backward
closure on an explicit tape. Parameters live in a :class:`ParamStore`;
``Tape.backward`` replays the recorded closures in reverse, accumulating
gradients into the stores' nodes.

Parameters are float32 by default; reductions accumulate in float64 before
casting back. Ops preserve the dtype of their inputs, which lets
:func:`grad_check` run the same code path in float64, where central finite
differences are meaningful at the 1e-4 tolerance.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class Node:
    """A value in the recorded computation plus its gradient accumulator."""

    __slots__ = ("value", "grad", "touched", "dense_hit")

    def __init__(self, value: np.ndarray) -> None:
        self.value = value
        self.grad: np.ndarray | None = None
        # Row indices written by sparse (gather) backward passes, and whether
        # any dense backward pass also touched this node. SGD uses these to
        # update only the gathered rows of embedding tables.
        self.touched: list[np.ndarray] = []
        self.dense_hit = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def _ensure_grad(node: Node) -> np.ndarray:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    return node.grad


def _accum(x, g: np.ndarray) -> None:
    if isinstance(x, Node):
        if x.grad is None:
            # g may be a broadcast view; materialize it.
            x.grad = np.array(g, dtype=x.value.dtype)
        else:
            x.grad += g
        x.dense_hit = True


def _accum_rows(x, ids: np.ndarray, g: np.ndarray) -> None:
    # Segment-sum scatter: sort duplicate row ids together and reduce once
    # per distinct row. Much faster than np.add.at on gather-heavy steps.
    if not isinstance(x, Node):
        return
    grad = _ensure_grad(x)
    flat_ids = ids.reshape(-1)
    flat_g = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
    order = np.argsort(flat_ids, kind="stable")
    sorted_ids = flat_ids[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(sorted_ids)) + 1))
    sums = np.add.reduceat(flat_g[order], starts, axis=0)
    rows = sorted_ids[starts]
    grad[rows] += sums
    x.touched.append(rows)


class Tape:
    """Recorded evaluation sequence; replayed in reverse for gradients."""

    def __init__(self) -> None:
        self._steps: list[tuple[Node, Callable[[np.ndarray], None]]] = []

    def record(self, out: Node, backward: Callable[[np.ndarray], None]) -> None:
        self._steps.append((out, backward))

    def backward(self, node: Node, seed_grad: np.ndarray | None = None) -> None:
        """Seed ``node`` (with ones, or an explicit gradient array) and
        replay every recorded backward in reverse order."""
        if seed_grad is None:
            node.grad = np.ones_like(node.value)
        else:
            seed_grad = np.asarray(seed_grad, dtype=node.value.dtype)
            if seed_grad.shape != node.value.shape:
                raise ValueError(
                    f"backward: seed shape mismatch {seed_grad.shape} vs {node.value.shape}"
                )
            node.grad = seed_grad.copy()
        for out, fn in reversed(self._steps):
            if out.grad is not None:
                fn(out.grad)


def _record(tape: Tape | None, out: Node, backward) -> Node:
    if tape is not None:
        tape.record(out, backward)
    return out


class ParamStore:
    """Named map of parameter nodes with per-entry gradient accumulators."""

    def __init__(self) -> None:
        self._nodes: dict[str, Node] = {}

    def add(self, name: str, value: np.ndarray) -> Node:
        if name in self._nodes:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = Node(np.asarray(value))
        self._nodes[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __iter__(self) -> Iterator[str]:
        return iter(self._nodes)

    def names(self) -> list[str]:
        return list(self._nodes)

    def items(self) -> Iterable[tuple[str, Node]]:
        return self._nodes.items()

    def zero_grads(self) -> None:
        for node in self._nodes.values():
            node.grad = None
            node.touched.clear()
            node.dense_hit = False

    def n_parameters(self) -> int:
        return sum(node.value.size for node in self._nodes.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, node in self._nodes.items():
            out.add(name, node.value.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, node in self._nodes.items():
            out.add(name, node.value.copy())
        return out


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Ops: forward values per the standard definitions, backward closures on the
# tape. Inputs may be Nodes or plain arrays; only Nodes receive gradients.
# ---------------------------------------------------------------------------


def sigmoid(tape: Tape | None, x) -> Node:
    xv = _val(x)
    yv = 1.0 / (1.0 + np.exp(-xv))
    out = Node(yv.astype(xv.dtype))

    def backward(g):
        _accum(x, g * out.value * (1.0 - out.value))

    return _record(tape, out, backward)


def swish(tape: Tape | None, x, beta: float = 1.0) -> Node:
    """Elementwise x * sigmoid(beta * x)."""
    xv = _val(x)
    s = 1.0 / (1.0 + np.exp(-beta * xv))
    out = Node((xv * s).astype(xv.dtype))

    def backward(g):
        _accum(x, g * (s * (1.0 + beta * xv * (1.0 - s))))

    return _record(tape, out, backward)


def tanh(tape: Tape | None, x) -> Node:
    xv = _val(x)
    out = Node(np.tanh(xv))

    def backward(g):
        _accum(x, g * (1.0 - out.value * out.value))

    return _record(tape, out, backward)


def embedding_gather(tape: Tape | None, table, ids: np.ndarray) -> Node:
    ids = np.asarray(ids, dtype=np.int64)
    tv = _val(table)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise ValueError(
            f"embedding_gather: ids out of range for table of {tv.shape[0]} rows"
        )
    out = Node(tv[ids])

    def backward(g):
        _accum_rows(table, ids, g)

    return _record(tape, out, backward)


def add(tape: Tape | None, a, b) -> Node:
    av, bv = _val(a), _val(b)
    _check_same_shape(av, bv, "add")
    out = Node(av + bv)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _record(tape, out, backward)


def add_positional(tape: Tape | None, x, pos_table) -> Node:
    """Add the first n rows of a positional table to an n-row matrix."""
    n = _val(x).shape[0]
    pos = embedding_gather(tape, pos_table, np.arange(n))
    return add(tape, x, pos)


def mul(tape: Tape | None, a, b) -> Node:
    """Elementwise product; either side may be a scalar (0-d array)."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape and av.ndim != 0 and bv.ndim != 0:
        raise ValueError(f"mul: shape mismatch {av.shape} vs {bv.shape}")
    out = Node(av * bv)

    def backward(g):
        ga = g * bv
        gb = g * av
        if isinstance(a, Node) and a.value.shape != ga.shape:
            ga = ga.sum(dtype=np.float64).astype(a.value.dtype).reshape(a.value.shape)
        if isinstance(b, Node) and b.value.shape != gb.shape:
            gb = gb.sum(dtype=np.float64).astype(b.value.dtype).reshape(b.value.shape)
        _accum(a, ga)
        _accum(b, gb)

    return _record(tape, out, backward)


def scale_by(tape: Tape | None, x, c: float) -> Node:
    xv = _val(x)
    out = Node(xv * xv.dtype.type(c))

    def backward(g):
        _accum(x, g * c)

    return _record(tape, out, backward)


def _swap(x: np.ndarray) -> np.ndarray:
    return x.swapaxes(-1, -2)


def _contract_leading(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum a[..., i] * g[..., j] over all leading axes -> (i, j)."""
    axes = list(range(a.ndim - 1))
    return np.tensordot(a, g, axes=(axes, axes))


def matmul(tape: Tape | None, a, b, transpose_b: bool = False) -> Node:
    """Matrix product, optionally against the transposed last two axes of b.

    Supports stacked operands: (..., n, d) @ (d, k), or batched
    (g, n, d) @ (g, d, m) with matching leading axes.
    """
    av, bv = _val(a), _val(b)
    inner_b = bv.shape[-1] if transpose_b else bv.shape[-2] if bv.ndim > 1 else bv.shape[0]
    if av.shape[-1] != inner_b:
        raise ValueError(
            f"matmul: shape mismatch {av.shape} vs {bv.shape}"
            f"{' (transposed)' if transpose_b else ''}"
        )
    out = Node(av @ (_swap(bv) if transpose_b else bv))

    def backward(g):
        if isinstance(a, Node):
            _accum(a, g @ (bv if transpose_b else _swap(bv)))
        if isinstance(b, Node):
            if transpose_b:
                gb = _contract_leading(g, av) if bv.ndim == 2 else _swap(g) @ av
            else:
                gb = _contract_leading(av, g) if bv.ndim == 2 else _swap(av) @ g
            _accum(b, gb)

    return _record(tape, out, backward)


def affine(tape: Tape | None, x, w, b) -> Node:
    """x @ w + b for a 2-d batch x."""
    xv, wv, bv = _val(x), _val(w), _val(b)
    if xv.shape[1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
        raise ValueError(
            f"affine: shape mismatch {xv.shape} @ {wv.shape} + {bv.shape}"
        )
    out = Node(xv @ wv + bv)

    def backward(g):
        _accum(x, g @ wv.T)
        _accum(w, xv.T @ g)
        _accum(b, g.sum(axis=0, dtype=np.float64).astype(bv.dtype))

    return _record(tape, out, backward)


def sum_rows(tape: Tape | None, x) -> Node:
    """Sum an n x d matrix over rows into a d vector (float64 accumulator)."""
    xv = _val(x)
    out = Node(xv.sum(axis=0, dtype=np.float64).astype(xv.dtype))

    def backward(g):
        _accum(x, np.broadcast_to(g, xv.shape))

    return _record(tape, out, backward)


def sum_seq(tape: Tape | None, x) -> Node:
    """Sum a (g, n, d) stack over its sequence axis into (g, d)."""
    xv = _val(x)
    out = Node(xv.sum(axis=1, dtype=np.float64).astype(xv.dtype))

    def backward(g):
        _accum(x, np.broadcast_to(g[:, None, :], xv.shape))

    return _record(tape, out, backward)


def concat_rows(tape: Tape | None, xs: Sequence) -> Node:
    """Concatenate 2-d blocks along axis 0."""
    vals = [_val(x) for x in xs]
    out = Node(np.concatenate(vals, axis=0))
    offsets = np.cumsum([0] + [v.shape[0] for v in vals])

    def backward(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            _accum(x, g[lo:hi])

    return _record(tape, out, backward)


def permute_rows(tape: Tape | None, x, perm: np.ndarray) -> Node:
    """Reorder rows as x[perm] for a permutation array."""
    perm = np.asarray(perm, dtype=np.int64)
    xv = _val(x)
    out = Node(xv[perm])

    def backward(g):
        gx = np.empty_like(xv)
        gx[perm] = g
        _accum(x, gx)

    return _record(tape, out, backward)


def mean(tape: Tape | None, xs: Sequence) -> Node:
    """Elementwise mean of same-shape inputs."""
    vals = [_val(x) for x in xs]
    for v in vals[1:]:
        _check_same_shape(vals[0], v, "mean")
    k = len(vals)
    acc = np.zeros(vals[0].shape, dtype=np.float64)
    for v in vals:
        acc += v
    out = Node((acc / k).astype(vals[0].dtype))

    def backward(g):
        share = g / k
        for x in xs:
            _accum(x, share.astype(vals[0].dtype))

    return _record(tape, out, backward)


def stack_rows(tape: Tape | None, xs: Sequence) -> Node:
    """Stack k same-length vectors into a k x d matrix."""
    vals = [_val(x) for x in xs]
    out = Node(np.stack(vals, axis=0))

    def backward(g):
        for i, x in enumerate(xs):
            _accum(x, g[i])

    return _record(tape, out, backward)


def softmax_rows(tape: Tape | None, x) -> Node:
    xv = _val(x)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Node((e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(xv.dtype))

    def backward(g):
        p = out.value
        inner = (g * p).sum(axis=-1, keepdims=True, dtype=np.float64).astype(p.dtype)
        _accum(x, p * (g - inner))

    return _record(tape, out, backward)


def single_head_attention(tape: Tape | None, x, wq, wk, wv) -> Node:
    """Scaled dot-product self-attention over sequences.

    q/k project the input to the attention dimension, v projects to d; no
    residual connection, no layer norm. ``x`` may be one (n, d) sequence or
    a (g, n, d) stack of same-length sequences.
    """
    proj_dim = _val(wq).shape[1]
    q = matmul(tape, x, wq)
    k = matmul(tape, x, wk)
    v = matmul(tape, x, wv)
    logits = scale_by(tape, matmul(tape, q, k, transpose_b=True), 1.0 / np.sqrt(proj_dim))
    weights = softmax_rows(tape, logits)
    return matmul(tape, weights, v)


def transpose(tape: Tape | None, x) -> Node:
    xv = _val(x)
    out = Node(xv.T.copy())

    def backward(g):
        _accum(x, g.T)

    return _record(tape, out, backward)


def l2_normalize(tape: Tape | None, x) -> Node:
    """Normalize each row of a 2-d matrix to unit length."""
    xv = _val(x)
    norms = np.sqrt((xv * xv).sum(axis=-1, keepdims=True, dtype=np.float64))
    if np.any(norms == 0.0):
        raise ValueError("l2_normalize: zero row")
    norms = norms.astype(xv.dtype)
    out = Node(xv / norms)

    def backward(g):
        inner = (g * out.value).sum(axis=-1, keepdims=True, dtype=np.float64).astype(
            xv.dtype
        )
        _accum(x, (g - out.value * inner) / norms)

    return _record(tape, out, backward)


def cosine_rows(tape: Tape | None, a, b) -> Node:
    """Row-wise cosine similarity of two equally shaped matrices."""
    an = l2_normalize(tape, a)
    bn = l2_normalize(tape, b)
    prod = mul(tape, an, bn)
    av = _val(prod)
    out = Node(av.sum(axis=-1, dtype=np.float64).astype(av.dtype))

    def backward(g):
        _accum(prod, np.broadcast_to(g[..., None], av.shape).astype(av.dtype))

    return _record(tape, out, backward)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(
    loss_fn: Callable[[ParamStore, Tape | None], Node],
    params: ParamStore,
    eps: float = 1e-5,
    max_entries_per_param: int = 64,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    Returns the worst relative error ``|a - n| / (|a| + |n| + 1e-6)`` over
    every parameter entry (or a seeded sample for large tensors). Runs the
    given loss in float64: float32 rounding noise would swamp the finite
    differences long before the 1e-4 tolerance of interest. The small
    default step matters too: near initialization the normalized-score
    surface is violently curved (1/norm terms), so large steps see mostly
    curvature.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    store = params.astype(np.float64)
    tape = Tape()
    loss = loss_fn(store, tape)
    if not np.isfinite(loss.value):
        raise ValueError(f"non-finite loss {loss.value!r} in grad_check")
    tape.backward(loss)
    analytic = {
        name: (np.zeros_like(node.value) if node.grad is None else node.grad.copy())
        for name, node in store.items()
    }

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for name, node in store.items():
        flat = node.value.reshape(-1)
        size = flat.size
        if size > max_entries_per_param:
            entries = rng.choice(size, size=max_entries_per_param, replace=False)
        else:
            entries = np.arange(size)
        a_flat = analytic[name].reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn(store, None).value)
            flat[i] = orig - eps
            lo = float(loss_fn(store, None).value)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ValueError("non-finite loss during finite differences")
            numeric = (hi - lo) / (2.0 * eps)
            a = float(a_flat[i])
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-6)
            worst = max(worst, rel)
    return worst
