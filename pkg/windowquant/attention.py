"""
WindowQuant -- Two-stage attention engine.

Prefill runs standard masked attention over the original token order in full
precision. Decode runs over a ``SegmentedKVCache`` without a mask: scores are
computed block by block (one block per segment, then the live tail), the
softmax is taken over the concatenated row, and the weight row is sliced back
into blocks that are multiplied with the matching V blocks and summed.

Quantized blocks go through the fused contract: ``s·((codes − z) · q)`` per
group, never materialising a dequantized matrix. The unfused path
(materialise, then multiply) is kept as the reference and for the fusion
ablation.
"""
import math
from dataclasses import dataclass

import numpy as np

from windowquant.errors import CacheError, ShapeError
from windowquant.kvstore import Segment, SegmentedKVCache
from windowquant.numerics import (
    Matrix,
    Vector,
    as_matrix,
    as_vector,
    causal_mask,
    matmul,
    relative_error,
    scaled_scores,
    softmax_rows,
)
from windowquant.quant import BitWidth


# ---------------------------------------------------------------------------
# Full-precision references
# ---------------------------------------------------------------------------
def prefill_attention(q: Matrix, k: Matrix, v: Matrix, d_k: int) -> Matrix:
    """softmax(q kᵀ / sqrt(d_k) + causal mask) · v."""
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise ShapeError(f"token counts differ: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = scaled_scores(q, k, d_k) + causal_mask(q.shape[0])
    return matmul(softmax_rows(scores), v)


def decode_attention(q: Matrix, k: Matrix, v: Matrix, d_k: int) -> Matrix:
    """Unmasked attention of the query rows over every cached token."""
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k {k.shape} and v {v.shape} hold different token counts")
    if k.shape[0] == 0:
        raise CacheError("decode attention over an empty cache")
    return matmul(softmax_rows(scaled_scores(q, k, d_k)), v)


def _split_heads(x: Matrix, heads: int, head_dim: int) -> list[Matrix]:
    if x.shape[1] != heads * head_dim:
        raise ShapeError(f"width {x.shape[1]} != heads {heads} x head_dim {head_dim}")
    return [x[:, h * head_dim:(h + 1) * head_dim] for h in range(heads)]


def multihead_prefill(q: Matrix, k: Matrix, v: Matrix, heads: int, head_dim: int) -> Matrix:
    parts = zip(_split_heads(q, heads, head_dim), _split_heads(k, heads, head_dim),
                _split_heads(v, heads, head_dim))
    return as_matrix(np.hstack([prefill_attention(qh, kh, vh, head_dim) for qh, kh, vh in parts]))


def multihead_decode(q_row: Vector, k: Matrix, v: Matrix, heads: int, head_dim: int) -> Vector:
    q = as_matrix(np.reshape(q_row, (1, -1)))
    parts = zip(_split_heads(q, heads, head_dim), _split_heads(k, heads, head_dim),
                _split_heads(v, heads, head_dim))
    return as_vector(np.hstack([decode_attention(qh, kh, vh, head_dim)[0] for qh, kh, vh in parts]))


# ---------------------------------------------------------------------------
# Fused dequantize-matmul
# ---------------------------------------------------------------------------
def _require_quantized(segment: Segment) -> None:
    if not segment.width.is_quantized:
        raise ShapeError("FP16 segments take the plain matmul path, not the fused kernel")


def fused_dequant_scores(q_row, segment: Segment, d_k: int) -> Vector:
    """Scores of one head's query against a quantized segment, one pass per group."""
    _require_quantized(segment)
    q = np.asarray(q_row, dtype=np.float64).reshape(-1)
    if q.size != segment.head_dim:
        raise ShapeError(f"query length {q.size} != head_dim {segment.head_dim}")
    if d_k < 1:
        raise ShapeError(f"d_k must be >= 1, got {d_k}")
    inv_sqrt = 1.0 / math.sqrt(d_k)
    out = np.empty(segment.token_count)
    for i, group in enumerate(segment.groups):
        centred = group.codes().reshape(segment.window_size, segment.head_dim).astype(np.int64)
        centred -= group.params.zero_point
        rows = slice(i * segment.window_size, (i + 1) * segment.window_size)
        out[rows] = group.params.scale * (centred @ q) * inv_sqrt
    return as_vector(out)


def fused_dequant_output(weights, segment: Segment) -> Vector:
    """Σ_t w_t · v̂_t over a quantized segment without a dequantized matrix."""
    _require_quantized(segment)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != segment.token_count:
        raise ShapeError(f"{w.size} weights for a segment of {segment.token_count} tokens")
    out = np.zeros(segment.head_dim)
    for i, group in enumerate(segment.groups):
        centred = group.codes().reshape(segment.window_size, segment.head_dim).astype(np.int64)
        centred -= group.params.zero_point
        wg = w[i * segment.window_size:(i + 1) * segment.window_size]
        out += group.params.scale * (wg @ centred)
    return as_vector(out)


def unfused_scores(q_row, segment: Segment, d_k: int) -> Vector:
    q = np.asarray(q_row, dtype=np.float64).reshape(-1)
    return as_vector(segment.materialize() @ q / math.sqrt(d_k))


def unfused_output(weights, segment: Segment) -> Vector:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    return as_vector(w @ segment.materialize())


def segment_scores(q_row, segment: Segment, d_k: int, fused: bool = True) -> Vector:
    if segment.token_count == 0:
        return as_vector(np.zeros(0))
    if segment.width.is_quantized and fused:
        return fused_dequant_scores(q_row, segment, d_k)
    return unfused_scores(q_row, segment, d_k)


def segment_output(weights, segment: Segment, fused: bool = True) -> Vector:
    if segment.token_count == 0:
        return as_vector(np.zeros(segment.head_dim))
    if segment.width.is_quantized and fused:
        return fused_dequant_output(weights, segment)
    return unfused_output(weights, segment)


# ---------------------------------------------------------------------------
# Blocked decode
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DecodeBlocks:
    """Score row of one head split into blocks: one per segment, then the tail."""

    scores: tuple[Vector, ...]
    widths: tuple[BitWidth, ...]

    @property
    def lengths(self) -> list[int]:
        return [s.size for s in self.scores]

    def _width_len(self, width: BitWidth) -> int:
        return sum(s.size for s, w in zip(self.scores, self.widths) if w is width)

    @property
    def len_2(self) -> int:
        return self._width_len(BitWidth.INT2)

    @property
    def len_4(self) -> int:
        return self._width_len(BitWidth.INT4)

    @property
    def total(self) -> int:
        return sum(self.lengths)

    def concatenated(self) -> Vector:
        return as_vector(np.concatenate(self.scores)) if self.scores else as_vector(np.zeros(0))

    def softmax_blocks(self) -> list[Vector]:
        """Softmax over the full row (one shared max), sliced back into blocks."""
        weights = softmax_rows(as_matrix(self.concatenated().reshape(1, -1)))[0]
        bounds = np.cumsum([0] + self.lengths)
        return [weights[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def _head_cols(cache: SegmentedKVCache, head: int) -> slice:
    return slice(head * cache.head_dim, (head + 1) * cache.head_dim)


def decode_blocks(q_head, cache: SegmentedKVCache, head: int, d_k: int, fused: bool = True) -> DecodeBlocks:
    scores = [segment_scores(q_head, seg, d_k, fused) for seg in cache.segments("k", head)]
    widths = [seg.width for seg in cache.segments("k", head)]
    tail_k = cache.live_tail_k[:, _head_cols(cache, head)]
    scores.append(as_vector(tail_k @ np.asarray(q_head, dtype=np.float64) / math.sqrt(d_k)))
    widths.append(BitWidth.FP16)
    return DecodeBlocks(scores=tuple(scores), widths=tuple(widths))


def decode_step(q_row, cache: SegmentedKVCache, d_k: int | None = None, fused: bool = True) -> Vector:
    """Attention output (heads·head_dim) of the current token over the cache."""
    q_row = as_vector(q_row)
    if q_row.size != cache.row_dim:
        raise ShapeError(f"query length {q_row.size} != heads x head_dim {cache.row_dim}")
    if cache.num_tokens == 0:
        raise CacheError("decode step over an empty cache")
    d_k = d_k or cache.head_dim

    out = np.zeros(cache.row_dim)
    for head in range(cache.num_heads):
        cols = _head_cols(cache, head)
        blocks = decode_blocks(q_row[cols], cache, head, d_k, fused)
        weights = blocks.softmax_blocks()
        acc = np.zeros(cache.head_dim)
        for seg, w in zip(cache.segments("v", head), weights[:-1]):
            acc += segment_output(w, seg, fused)
        acc += weights[-1] @ cache.live_tail_v[:, cols]
        out[cols] = acc
    return as_vector(out)


# ---------------------------------------------------------------------------
# Reordering check
# ---------------------------------------------------------------------------
def permute_windows(x: Matrix, permutation, window_size: int) -> Matrix:
    """Reorder the window blocks of ``x``; rows after the last window stay put."""
    n = len(permutation)
    blocks = [x[p * window_size:(p + 1) * window_size] for p in permutation]
    blocks.append(x[n * window_size:])
    return as_matrix(np.vstack(blocks))


def verify_reorder_equivalence(q: Matrix, k: Matrix, v: Matrix, permutation, d_k: int,
                               window_size: int | None = None) -> float:
    """Max relative discrepancy of decode attention with vs without reordering."""
    permutation = [int(p) for p in permutation]
    n = len(permutation)
    if n == 0 or sorted(permutation) != list(range(n)):
        raise CacheError(f"{permutation} is not a permutation of range({n})")
    if window_size is None:
        window_size = k.shape[0] // n
    if window_size < 1 or n * window_size > k.shape[0]:
        raise ShapeError(f"{n} windows of {window_size} do not fit {k.shape[0]} tokens")

    baseline = decode_attention(q, k, v, d_k)
    reordered = decode_attention(
        q, permute_windows(k, permutation, window_size), permute_windows(v, permutation, window_size), d_k
    )
    return relative_error(reordered, baseline)
