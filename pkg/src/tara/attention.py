"""Cross-attention with low-rank adapter injection on Key/Value projections.

The adapter path is column-masked per token (Token Focus Masking): the
adapter's contribution is computed only at masked-in columns and added
into a copy of the frozen projection. Columns outside the mask therefore
carry the base model's exact bytes, which turns "adapters do not touch
other tokens" from a tolerance statement into an identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import (
    Matrix,
    ShapeError,
    add,
    col_add,
    col_scatter,
    col_select,
    concat_cols,
    matmul,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)
from .text import TokenSequence


class AttentionError(ValueError):
    """Inconsistent layer, mask, or adapter wiring."""


@dataclass(frozen=True, slots=True)
class CrossAttentionLayer:
    """One frozen attention block's projections.

    W_K/W_V map token embeddings (d_text) into the model width; W_Q/W_O act
    on latent patches. Heads > 1 split the model width evenly.
    """

    layer_id: int
    w_q: Matrix  # d_model x d_model
    w_k: Matrix  # d_model x d_text
    w_v: Matrix  # d_model x d_text
    w_o: Matrix  # d_model x d_model
    heads: int = 1

    def __post_init__(self):
        d = self.w_q.rows
        if self.w_q.shape != (d, d) or self.w_o.shape != (d, d):
            raise ShapeError("W_Q and W_O must be square and equal-sized")
        if self.w_k.rows != d or self.w_v.shape != self.w_k.shape:
            raise ShapeError("W_K/W_V must be d_model x d_text and equal-shaped")
        if self.heads < 1 or d % self.heads:
            raise AttentionError(f"head count {self.heads} must divide d_model={d}")

    @property
    def d_model(self) -> int:
        return self.w_q.rows

    @property
    def d_text(self) -> int:
        return self.w_k.cols

    def checksum(self) -> str:
        return "/".join(m.checksum() for m in (self.w_q, self.w_k, self.w_v, self.w_o))


@dataclass(frozen=True, slots=True)
class TokenMask:
    """Which token columns an adapter may touch in one sequence."""

    concept: str
    columns: tuple[int, ...]
    n: int

    def __post_init__(self):
        cols = tuple(sorted(int(c) for c in self.columns))
        if len(set(cols)) != len(cols):
            raise AttentionError("mask columns repeat")
        if cols and not (0 <= cols[0] and cols[-1] < self.n):
            raise AttentionError(f"mask columns {cols} out of range for n={self.n}")
        object.__setattr__(self, "columns", cols)

    @classmethod
    def token_focused(cls, concept: str, seq: TokenSequence) -> "TokenMask":
        return cls(concept, tuple(sorted(seq.rare_positions_of(concept))), seq.n)

    @classmethod
    def unmasked(cls, concept: str, n: int) -> "TokenMask":
        return cls(concept, tuple(range(n)), n)

    @property
    def empty(self) -> bool:
        return not self.columns

    def to_matrix(self, d: int) -> Matrix:
        """Materialized d x n binary mask (oracle/debug path, not the hot path)."""
        m = np.zeros((d, self.n))
        if self.columns:
            m[:, self.columns] = 1.0
        return Matrix(m)


class AdapterTerm(NamedTuple):
    """One adapter's contribution to one projection: factors (or a dense delta) plus its mask."""

    delta: "Matrix | tuple[Matrix, Matrix]"  # dense d_model x d_text, or (B, A)
    mask: TokenMask


def _delta_shape(delta) -> tuple[int, int]:
    if isinstance(delta, tuple):
        b, a = delta
        if b.cols != a.rows:
            raise ShapeError(f"factored delta: B is {b.shape}, A is {a.shape}")
        return b.rows, a.cols
    return delta.shape


def masked_adapter_forward(delta, X: Matrix, mask: TokenMask) -> Matrix:
    """M ⊙ (Δ X) for a binary column mask M.

    `delta` is either the dense update or the (B, A) factor pair; the factored
    form is what training differentiates through. Only masked-in columns are
    computed, so masked-out columns are exact zeros by construction.
    """
    d_out, d_in = _delta_shape(delta)
    if d_in != X.rows:
        raise ShapeError(f"delta acts on width {d_in}, X has {X.rows} rows")
    if mask.n != X.cols:
        raise ShapeError(f"mask built for n={mask.n}, X has {X.cols} columns")
    if mask.empty:
        return Matrix.zeros(d_out, X.cols)
    sel = col_select(X, mask.columns)
    if isinstance(delta, tuple):
        b, a = delta
        block = matmul(b, matmul(a, sel))
    else:
        block = matmul(delta, sel)
    if len(mask.columns) == X.cols:
        return block
    return col_scatter(block, mask.columns, X.cols)


def composed_projection(w: Matrix, terms: Sequence[AdapterTerm], X: Matrix) -> Matrix:
    """W X plus every adapter's masked contribution, in registration order.

    Adapters with empty masks are skipped outright, so a prompt that never
    mentions an adapter's rare token produces the adapter-free bytes.
    """
    seen: set[str] = set()
    for t in terms:
        if t.mask.concept in seen:
            raise AttentionError(f"two adapters for concept {t.mask.concept!r} in one composition")
        seen.add(t.mask.concept)

    out = matmul(w, X)
    for t in terms:
        if t.mask.empty:
            continue
        d_out, d_in = _delta_shape(t.delta)
        if d_in != X.rows or t.mask.n != X.cols or d_out != w.rows:
            raise ShapeError("adapter term does not conform to projection shapes")
        sel = col_select(X, t.mask.columns)
        if isinstance(t.delta, tuple):
            b, a = t.delta
            block = matmul(b, matmul(a, sel))
        else:
            block = matmul(t.delta, sel)
        out = col_add(out, t.mask.columns, block)
    return out


@dataclass(frozen=True, slots=True)
class AttentionMap:
    """Row-stochastic patch-over-token attention for one layer."""

    layer_id: int
    a: Matrix  # m x n

    @property
    def m(self) -> int:
        return self.a.rows

    @property
    def n(self) -> int:
        return self.a.cols

    def token_profile(self, j: int) -> np.ndarray:
        """Attention mass each patch puts on token j (length-m vector)."""
        return self.a.array[:, j].copy()


class MapCollector:
    """Per-run sink for attention maps, keyed by (layer, timestep)."""

    def __init__(self) -> None:
        self.records: list[tuple[int, int, AttentionMap]] = []

    def record(self, timestep: int, amap: AttentionMap) -> None:
        self.records.append((amap.layer_id, int(timestep), amap))

    def maps_for(self, layer_id: int | None = None, timestep: int | None = None):
        return [
            rec
            for rec in self.records
            if (layer_id is None or rec[0] == layer_id)
            and (timestep is None or rec[1] == timestep)
        ]


def attention_forward(
    layer: CrossAttentionLayer,
    z: Matrix,
    seq: TokenSequence,
    k_terms: Sequence[AdapterTerm] = (),
    v_terms: Sequence[AdapterTerm] = (),
) -> tuple[Matrix, AttentionMap]:
    """One cross-attention pass: patches attend over the token sequence.

    Returns the m x d_model output and the attention map (head-averaged when
    heads > 1). Scaling uses the square root of the per-head key width.
    """
    if z.cols != layer.d_model:
        raise ShapeError(f"latent width {z.cols} != d_model {layer.d_model}")
    if seq.X.rows != layer.d_text:
        raise ShapeError(f"embedding width {seq.X.rows} != d_text {layer.d_text}")

    q = matmul(z, transpose(layer.w_q))  # m x d_model
    k = composed_projection(layer.w_k, k_terms, seq.X)  # d_model x n
    v = composed_projection(layer.w_v, v_terms, seq.X)  # d_model x n

    h = layer.heads
    if h == 1:
        a = softmax_rows(scale(matmul(q, k), layer.d_model**-0.5))
        mixed = matmul(a, transpose(v))
        map_avg = a
    else:
        dh = layer.d_model // h
        outs = []
        acc = None
        for i in range(h):
            qi = slice_cols(q, i * dh, (i + 1) * dh)
            ki = slice_rows(k, i * dh, (i + 1) * dh)
            vi = slice_rows(v, i * dh, (i + 1) * dh)
            ai = softmax_rows(scale(matmul(qi, ki), dh**-0.5))
            outs.append(matmul(ai, transpose(vi)))
            acc = ai if acc is None else add(acc, ai)
        mixed = concat_cols(outs)
        map_avg = scale(acc, 1.0 / h)

    out = matmul(mixed, transpose(layer.w_o))
    return out, AttentionMap(layer.layer_id, map_avg)
