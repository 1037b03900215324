"""Reverse-mode differentiation over Matrix values.

A Tape is a context manager. While it is active, the ops in this module
record every primitive whose operands trace back to a watched leaf; the
backward pass then replays the records in reverse creation order (a valid
reverse topological order) and accumulates adjoints additively. Ops called
with no tape active, or on operands that never touch a leaf, are plain
numpy arithmetic.

A tape is built per training step and discarded; it is single-threaded,
and the active-tape stack is thread-local.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .matrix import Matrix, NonFiniteError, NumericsError, ShapeError

_CONST = -1

_tls = threading.local()


def _stack() -> list["Tape"]:
    s = getattr(_tls, "stack", None)
    if s is None:
        s = []
        _tls.stack = s
    return s


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


@dataclass(slots=True)
class _Node:
    out: Matrix
    parents: tuple[int, ...]  # node indices; _CONST for untracked operands
    # backward(adjoint of out, needs) -> per-parent adjoints (None where not needed)
    backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]] | None


class Tape:
    """Records primitive ops for one reverse-mode gradient computation."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._index: dict[int, int] = {}  # id(Matrix) -> node index
        self._leaves: dict[str, int] = {}  # leaf id -> node index

    # -- context management -------------------------------------------------

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        top = _stack().pop()
        if top is not self:  # pragma: no cover - misuse guard
            raise NumericsError("tape context exited out of order")

    # -- recording ----------------------------------------------------------

    def watch(self, m: Matrix, leaf_id: str) -> Matrix:
        """Mark `m` as a differentiable parameter named `leaf_id`."""
        if leaf_id in self._leaves:
            raise NumericsError(f"leaf id {leaf_id!r} already watched")
        if id(m) in self._index:
            raise NumericsError(f"matrix already recorded on this tape ({leaf_id!r})")
        self._nodes.append(_Node(m, (), None))
        idx = len(self._nodes) - 1
        self._index[id(m)] = idx
        self._leaves[leaf_id] = idx
        return m

    def _lookup(self, m: Matrix) -> int:
        return self._index.get(id(m), _CONST)

    def record(self, out: Matrix, operands: Sequence[Matrix], backward) -> None:
        parents = tuple(self._lookup(m) for m in operands)
        self._nodes.append(_Node(out, parents, backward))
        self._index[id(out)] = len(self._nodes) - 1

    def tracks(self, m: Matrix) -> bool:
        return id(m) in self._index

    @property
    def leaf_ids(self) -> tuple[str, ...]:
        return tuple(self._leaves)

    def __len__(self) -> int:
        return len(self._nodes)

    # -- reverse pass -------------------------------------------------------

    def grad(self, loss: Matrix) -> dict[str, Matrix]:
        """Adjoint of `loss` with respect to every watched leaf.

        `loss` must be a 1x1 matrix recorded on this tape. Leaves the loss
        does not depend on get a zero gradient of their own shape.
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be scalar (1x1), got {loss.shape}")
        start = self._lookup(loss)
        if start == _CONST:
            raise NumericsError("loss is not recorded on this tape")

        # reachability: which recorded nodes feed the loss
        needed = np.zeros(len(self._nodes), dtype=bool)
        needed[start] = True
        for i in range(start, -1, -1):
            if needed[i]:
                for p in self._nodes[i].parents:
                    if p != _CONST:
                        needed[p] = True

        adjoint: dict[int, np.ndarray] = {start: np.ones((1, 1))}
        for i in range(start, -1, -1):
            node = self._nodes[i]
            if not needed[i] or node.backward is None:
                continue
            g = adjoint.pop(i, None)
            if g is None:
                continue
            flags = tuple(p != _CONST for p in node.parents)
            parent_grads = node.backward(g, flags)
            for p, pg in zip(node.parents, parent_grads):
                if p == _CONST or pg is None:
                    continue
                acc = adjoint.get(p)
                adjoint[p] = pg if acc is None else acc + pg

        out: dict[str, Matrix] = {}
        for leaf_id, idx in self._leaves.items():
            g = adjoint.get(idx)
            if g is None:
                g = np.zeros(self._nodes[idx].out.shape)
            out[leaf_id] = Matrix._wrap(np.ascontiguousarray(g))
        return out


def grad(tape: Tape, loss: Matrix) -> dict[str, Matrix]:
    """Functional form of Tape.grad."""
    return tape.grad(loss)


# -- primitive ops ------------------------------------------------------------


def _emit(out: Matrix, operands: Sequence[Matrix], backward) -> Matrix:
    t = active_tape()
    if t is not None and any(t.tracks(m) for m in operands):
        t.record(out, operands, backward)
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out = Matrix._wrap(a.array @ b.array)

    def backward(g, needs):
        return (
            g @ b.array.T if needs[0] else None,
            a.array.T @ g if needs[1] else None,
        )

    return _emit(out, (a, b), backward)


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = Matrix._wrap(a.array + b.array)

    def backward(g, needs):
        return (g if needs[0] else None, g if needs[1] else None)

    return _emit(out, (a, b), backward)


def sub(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ, {a.shape} vs {b.shape}")
    out = Matrix._wrap(a.array - b.array)

    def backward(g, needs):
        return (g if needs[0] else None, -g if needs[1] else None)

    return _emit(out, (a, b), backward)


def scale(a: Matrix, c: float) -> Matrix:
    c = float(c)
    out = Matrix._wrap(a.array * c)

    def backward(g, needs):
        return (g * c if needs[0] else None,)

    return _emit(out, (a,), backward)


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    out = Matrix._wrap(a.array * b.array)

    def backward(g, needs):
        return (
            g * b.array if needs[0] else None,
            g * a.array if needs[1] else None,
        )

    return _emit(out, (a, b), backward)


def transpose(a: Matrix) -> Matrix:
    out = Matrix._wrap(np.ascontiguousarray(a.array.T))

    def backward(g, needs):
        return (np.ascontiguousarray(g.T) if needs[0] else None,)

    return _emit(out, (a,), backward)


def add_rowvec(a: Matrix, v: Matrix) -> Matrix:
    """Add a 1 x cols row vector to every row of `a`."""
    if v.rows != 1 or v.cols != a.cols:
        raise ShapeError(f"add_rowvec: need 1x{a.cols} vector, got {v.shape}")
    out = Matrix._wrap(a.array + v.array)

    def backward(g, needs):
        return (
            g if needs[0] else None,
            g.sum(axis=0, keepdims=True) if needs[1] else None,
        )

    return _emit(out, (a, v), backward)


def tanh(a: Matrix) -> Matrix:
    out = Matrix._wrap(np.tanh(a.array))

    def backward(g, needs):
        return (g * (1.0 - out.array**2) if needs[0] else None,)

    return _emit(out, (a,), backward)


def square(a: Matrix) -> Matrix:
    out = Matrix._wrap(a.array * a.array)

    def backward(g, needs):
        return (g * (2.0 * a.array) if needs[0] else None,)

    return _emit(out, (a,), backward)


def absolute(a: Matrix) -> Matrix:
    """Elementwise |a|; the subgradient at exact zeros is taken as 0."""
    out = Matrix._wrap(np.abs(a.array))

    def backward(g, needs):
        return (g * np.sign(a.array) if needs[0] else None,)

    return _emit(out, (a,), backward)


def sum_all(a: Matrix) -> Matrix:
    out = Matrix._wrap(a.array.sum().reshape(1, 1))

    def backward(g, needs):
        return (np.full(a.shape, g[0, 0]) if needs[0] else None,)

    return _emit(out, (a,), backward)


def mean_all(a: Matrix) -> Matrix:
    n = a.rows * a.cols
    out = Matrix._wrap((a.array.sum() / n).reshape(1, 1))

    def backward(g, needs):
        return (np.full(a.shape, g[0, 0] / n) if needs[0] else None,)

    return _emit(out, (a,), backward)


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction for stability."""
    z = a.array - a.array.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Matrix._wrap(np.ascontiguousarray(s))

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _emit(out, (a,), backward)


def col_select(a: Matrix, cols: Sequence[int]) -> Matrix:
    """Gather the given columns (unique, in the given order)."""
    cols = tuple(int(c) for c in cols)
    if len(set(cols)) != len(cols):
        raise ShapeError("col_select: duplicate column indices")
    if not cols:
        raise ShapeError("col_select: empty column set")
    out = Matrix._wrap(np.ascontiguousarray(a.array[:, cols]))

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        z = np.zeros(a.shape)
        z[:, cols] = g
        return (z,)

    return _emit(out, (a,), backward)


def col_scatter(block: Matrix, cols: Sequence[int], n: int) -> Matrix:
    """Place `block`'s columns at positions `cols` of a rows x n zero matrix."""
    cols = tuple(int(c) for c in cols)
    if len(cols) != block.cols or len(set(cols)) != len(cols):
        raise ShapeError(f"col_scatter: {block.cols} columns vs targets {cols}")
    z = np.zeros((block.rows, n))
    z[:, cols] = block.array
    out = Matrix._wrap(z)

    def backward(g, needs):
        return (np.ascontiguousarray(g[:, cols]) if needs[0] else None,)

    return _emit(out, (block,), backward)


def col_add(base: Matrix, cols: Sequence[int], block: Matrix) -> Matrix:
    """Copy of `base` with `block` added into the given columns.

    Untouched columns keep the exact bits of `base`, which is what makes
    column-masked adapter injection byte-transparent elsewhere.
    """
    cols = tuple(int(c) for c in cols)
    if len(cols) != block.cols or len(set(cols)) != len(cols):
        raise ShapeError(f"col_add: {block.cols} columns vs targets {cols}")
    if block.rows != base.rows:
        raise ShapeError(f"col_add: row mismatch, {base.shape} vs {block.shape}")
    buf = base.array.copy()
    buf[:, cols] += block.array
    out = Matrix._wrap(buf)

    def backward(g, needs):
        return (
            g if needs[0] else None,
            np.ascontiguousarray(g[:, cols]) if needs[1] else None,
        )

    return _emit(out, (base, block), backward)


def slice_rows(a: Matrix, start: int, stop: int) -> Matrix:
    out = Matrix._wrap(np.ascontiguousarray(a.array[start:stop, :]))

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        z = np.zeros(a.shape)
        z[start:stop, :] = g
        return (z,)

    return _emit(out, (a,), backward)


def slice_cols(a: Matrix, start: int, stop: int) -> Matrix:
    out = Matrix._wrap(np.ascontiguousarray(a.array[:, start:stop]))

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        z = np.zeros(a.shape)
        z[:, start:stop] = g
        return (z,)

    return _emit(out, (a,), backward)


def concat_cols(parts: Sequence[Matrix]) -> Matrix:
    if not parts:
        raise ShapeError("concat_cols: no parts")
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    widths = [p.cols for p in parts]
    out = Matrix._wrap(np.concatenate([p.array for p in parts], axis=1))

    def backward(g, needs):
        grads = []
        off = 0
        for w, need in zip(widths, needs):
            grads.append(np.ascontiguousarray(g[:, off : off + w]) if need else None)
            off += w
        return grads

    return _emit(out, tuple(parts), backward)


# -- composite helpers --------------------------------------------------------


def l1_norm(a: Matrix) -> Matrix:
    """Sum of absolute values, as a scalar node."""
    return sum_all(absolute(a))


def mean_sq_error(a: Matrix, b: Matrix) -> Matrix:
    """Mean over all entries of (a - b)^2, as a scalar node."""
    return mean_all(square(sub(a, b)))
