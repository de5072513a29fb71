"""
WindowQuant -- Precision-segmented KV cache.

For one model layer, visual-token windows are stable-partitioned by their
assigned width into contiguous segments in the fixed order INT2, INT4, FP16
(per head, separately for K and V). INT2/INT4 windows are stored as packed
groups; FP16 windows as full-precision slabs. Every token after the last full
visual window (visual tail and text prompt) plus every generated token lives
in an append-only full-precision tail.

``reorder=False`` keeps windows in their original order as maximal runs of
equal width. The decode math is unchanged; only the layout is fragmented.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from windowquant.errors import CacheError, ShapeError
from windowquant.numerics import Matrix, as_matrix, as_vector
from windowquant.quant import (
    FP16_BYTES_PER_ELEMENT,
    METADATA_BYTES_PER_GROUP,
    SEGMENT_ORDER,
    BitWidth,
    PackedGroup,
    QuantParams,
    compute_params,
    dequantize_group,
    packed_length,
    quantize_group,
)
from windowquant.search import WindowPlan

logger = logging.getLogger("windowquant.kvstore")

GRANULARITIES = ("group", "tensor")


# ---------------------------------------------------------------------------
# Segments
# ---------------------------------------------------------------------------
@dataclass
class Segment:
    width: BitWidth
    window_size: int
    head_dim: int
    window_ids: list[int] = field(default_factory=list)
    groups: list[PackedGroup] = field(default_factory=list)
    slabs: list[Matrix] = field(default_factory=list)

    @property
    def token_count(self) -> int:
        return len(self.window_ids) * self.window_size

    @property
    def payload_bytes(self) -> int:
        if self.width.is_quantized:
            return sum(g.nbytes for g in self.groups)
        return self.token_count * self.head_dim * FP16_BYTES_PER_ELEMENT

    def add_window(self, window_id: int, block: np.ndarray, params: QuantParams | None = None) -> None:
        if self.width.is_quantized:
            self.groups.append(quantize_group(block, self.width.bits, params))
        else:
            self.slabs.append(as_matrix(block))
        self.window_ids.append(window_id)

    def window_blocks(self) -> list[np.ndarray]:
        """Per window, a (window_size × head_dim) full-precision block."""
        if self.width.is_quantized:
            return [dequantize_group(g).reshape(self.window_size, self.head_dim) for g in self.groups]
        return list(self.slabs)

    def materialize(self) -> Matrix:
        """All tokens of the segment, dequantized, in segment order."""
        blocks = self.window_blocks()
        if not blocks:
            return as_matrix(np.zeros((0, self.head_dim)))
        return as_matrix(np.vstack(blocks))


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------
class SegmentedKVCache:
    """KV cache of a single layer, segmented per head."""

    def __init__(self, num_heads: int, head_dim: int, plan: WindowPlan,
                 granularity: str = "group", reordered: bool = True):
        if num_heads < 1 or head_dim < 1:
            raise ShapeError(f"heads ({num_heads}) and head_dim ({head_dim}) must be >= 1")
        if granularity not in GRANULARITIES:
            raise CacheError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.plan = plan
        self.granularity = granularity
        self.reordered = reordered
        self.k_segments: list[list[Segment]] = [[] for _ in range(num_heads)]
        self.v_segments: list[list[Segment]] = [[] for _ in range(num_heads)]
        self.tail_token_ids: list[int] = []
        self._tail_k: list[np.ndarray] = []
        self._tail_v: list[np.ndarray] = []
        self._tail_cache: tuple[Matrix, Matrix] | None = None

    @property
    def row_dim(self) -> int:
        return self.num_heads * self.head_dim

    # -- tail ----------------------------------------------------------------
    def _tail_matrices(self) -> tuple[Matrix, Matrix]:
        if self._tail_cache is None:
            if self._tail_k:
                self._tail_cache = (as_matrix(np.vstack(self._tail_k)), as_matrix(np.vstack(self._tail_v)))
            else:
                empty = as_matrix(np.zeros((0, self.row_dim)))
                self._tail_cache = (empty, empty)
        return self._tail_cache

    @property
    def live_tail_k(self) -> Matrix:
        return self._tail_matrices()[0]

    @property
    def live_tail_v(self) -> Matrix:
        return self._tail_matrices()[1]

    @property
    def tail_len(self) -> int:
        return len(self.tail_token_ids)

    def append(self, k_row, v_row) -> None:
        """Append one full-precision token to the live tail."""
        k_row, v_row = as_vector(k_row), as_vector(v_row)
        if k_row.size != self.row_dim or v_row.size != self.row_dim:
            raise ShapeError(
                f"expected K/V rows of length {self.row_dim}, got {k_row.size} and {v_row.size}"
            )
        self.tail_token_ids.append(self.num_tokens)
        self._tail_k.append(k_row.reshape(1, -1))
        self._tail_v.append(v_row.reshape(1, -1))
        self._tail_cache = None

    # -- layout --------------------------------------------------------------
    def segments(self, kind: str, head: int) -> list[Segment]:
        if kind == "k":
            return self.k_segments[head]
        if kind == "v":
            return self.v_segments[head]
        raise CacheError(f"unknown cache kind {kind!r}; expected 'k' or 'v'")

    @property
    def segment_widths(self) -> list[BitWidth]:
        return [seg.width for seg in self.k_segments[0]]

    @property
    def block_lengths(self) -> list[int]:
        """Token count of each segment, in decode order (tail excluded)."""
        return [seg.token_count for seg in self.k_segments[0]]

    @property
    def fragment_count(self) -> int:
        return sum(1 for seg in self.k_segments[0] if seg.token_count)

    @property
    def is_contiguous(self) -> bool:
        """At most one non-empty segment per width."""
        widths = [seg.width for seg in self.k_segments[0] if seg.token_count]
        return len(widths) == len(set(widths))

    @property
    def num_tokens(self) -> int:
        return self.plan.windowed_tokens + self.tail_len

    def token_counts(self) -> dict[BitWidth, int]:
        counts = {w: 0 for w in BitWidth}
        for seg in self.k_segments[0]:
            counts[seg.width] += seg.token_count
        counts[BitWidth.FP16] += self.tail_len
        return counts

    def metadata_groups(self) -> int:
        if self.granularity == "group":
            return sum(len(seg.groups) for segs in self.k_segments + self.v_segments for seg in segs)
        shared = {
            (kind, head, seg.width)
            for kind in ("k", "v")
            for head in range(self.num_heads)
            for seg in self.segments(kind, head)
            if seg.width.is_quantized and seg.groups
        }
        return len(shared)

    def payload_bytes(self) -> dict[BitWidth, int]:
        """Stored bytes per width over K and V and all heads, tail included."""
        totals = {w: 0 for w in BitWidth}
        for segs in self.k_segments + self.v_segments:
            for seg in segs:
                totals[seg.width] += seg.payload_bytes
        totals[BitWidth.FP16] += 2 * self.tail_len * self.row_dim * FP16_BYTES_PER_ELEMENT
        return totals

    # -- checks & reconstruction ---------------------------------------------
    def validate(self) -> None:
        """Check coverage, K/V agreement and stable order; raise CacheError."""
        reference = [(seg.width, tuple(seg.window_ids)) for seg in self.k_segments[0]]
        for kind in ("k", "v"):
            for head in range(self.num_heads):
                layout = [(seg.width, tuple(seg.window_ids)) for seg in self.segments(kind, head)]
                if layout != reference:
                    raise CacheError(f"{kind.upper()} layout of head {head} disagrees with head 0 K")
        ids = [wid for _, wids in reference for wid in wids]
        if sorted(ids) != list(range(self.plan.num_windows)):
            raise CacheError(f"window ids {ids} do not cover {self.plan.num_windows} windows exactly once")
        for width, wids in reference:
            if any(a >= b for a, b in zip(wids, wids[1:])):
                raise CacheError(f"{width.label} segment is not in original order: {list(wids)}")
        expected_tail = list(range(self.plan.windowed_tokens, self.num_tokens))
        if self.tail_token_ids != expected_tail:
            raise CacheError("tail token ids are not contiguous after the visual windows")

    def reconstruct(self, kind: str) -> Matrix:
        """Dequantized K or V in original token order (tokens × heads·head_dim)."""
        out = np.zeros((self.num_tokens, self.row_dim))
        for head in range(self.num_heads):
            cols = slice(head * self.head_dim, (head + 1) * self.head_dim)
            for seg in self.segments(kind, head):
                for wid, block in zip(seg.window_ids, seg.window_blocks()):
                    out[self.plan.window_slice(wid), cols] = block
        if self.tail_len:
            tail = self.live_tail_k if kind == "k" else self.live_tail_v
            out[self.plan.windowed_tokens:] = tail
        return as_matrix(out)


def _layout(widths: list[BitWidth], reorder: bool) -> list[tuple[BitWidth, list[int]]]:
    if reorder:
        return [(w, [j for j, wj in enumerate(widths) if wj is w]) for w in SEGMENT_ORDER]
    runs: list[tuple[BitWidth, list[int]]] = []
    for j, w in enumerate(widths):
        if runs and runs[-1][0] is w:
            runs[-1][1].append(j)
        else:
            runs.append((w, [j]))
    return runs


def build_cache(
    k: Matrix,
    v: Matrix,
    widths,
    plan: WindowPlan,
    heads: int,
    head_dim: int,
    *,
    reorder: bool = True,
    granularity: str = "group",
) -> SegmentedKVCache:
    """Partition, quantize and store one layer's prefill K/V.

    ``k``/``v`` hold every prefill token in original order: the plan's visual
    windows first, then the visual tail and the text prompt, which go to the
    full-precision tail.
    """
    widths = list(widths)
    if len(widths) != plan.num_windows:
        raise ShapeError(f"config has {len(widths)} windows, plan has {plan.num_windows}")
    if k.shape != v.shape or k.ndim != 2:
        raise ShapeError(f"K {k.shape} and V {v.shape} must be equal 2-D shapes")
    if k.shape[1] != heads * head_dim:
        raise ShapeError(f"K/V width {k.shape[1]} != heads {heads} x head_dim {head_dim}")
    if k.shape[0] < plan.windowed_tokens:
        raise ShapeError(f"{k.shape[0]} tokens cannot hold {plan.num_windows} windows of {plan.window_size}")

    cache = SegmentedKVCache(heads, head_dim, plan, granularity=granularity, reordered=reorder)
    layout = _layout(widths, reorder)

    for head in range(heads):
        cols = slice(head * head_dim, (head + 1) * head_dim)
        for kind, source, target in (("k", k, cache.k_segments), ("v", v, cache.v_segments)):
            shared: dict[BitWidth, QuantParams] = {}
            if granularity == "tensor":
                for w in (BitWidth.INT2, BitWidth.INT4):
                    rows = [source[plan.window_slice(j), cols] for j, wj in enumerate(widths) if wj is w]
                    if rows:
                        shared[w] = compute_params(np.vstack(rows), w.bits)
            for width, window_ids in layout:
                seg = Segment(width=width, window_size=plan.window_size, head_dim=head_dim)
                for wid in window_ids:
                    seg.add_window(wid, source[plan.window_slice(wid), cols], shared.get(width))
                target[head].append(seg)

    for row in range(plan.windowed_tokens, k.shape[0]):
        cache.append(k[row], v[row])

    logger.debug(
        "Built cache: %d windows in %d fragments, tail %d tokens (granularity=%s, reorder=%s)",
        plan.num_windows, cache.fragment_count, cache.tail_len, granularity, reorder,
    )
    return cache


# ---------------------------------------------------------------------------
# Memory accounting
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MemoryReport:
    bytes_fp16: int
    bytes_int4: int
    bytes_int2: int
    bytes_metadata: int
    bytes_total: int
    bytes_baseline_fp16: int
    bytes_saved: int
    average_bit_width: float
    layers: int
    tokens_fp16: int
    tokens_int4: int
    tokens_int2: int

    @property
    def bytes_saved_per_layer(self) -> float:
        return self.bytes_saved / self.layers

    def to_document(self) -> dict:
        return asdict(self)


def mib(num_bytes: float) -> float:
    return num_bytes / (1024 * 1024)


def _average_bit_width(n_int2: int, n_int4: int, n_fp16: int) -> float:
    total = n_int2 + n_int4 + n_fp16
    if total == 0:
        raise CacheError("average bit-width is undefined for an empty cache")
    return (2 * n_int2 + 4 * n_int4 + 16 * n_fp16) / total


def _assemble(b16, b4, b2, meta, baseline, n2, n4, n16, layers) -> MemoryReport:
    total = b16 + b4 + b2 + meta
    return MemoryReport(
        bytes_fp16=b16,
        bytes_int4=b4,
        bytes_int2=b2,
        bytes_metadata=meta,
        bytes_total=total,
        bytes_baseline_fp16=baseline,
        bytes_saved=baseline - total,
        average_bit_width=_average_bit_width(n2, n4, n16),
        layers=layers,
        tokens_fp16=n16,
        tokens_int4=n4,
        tokens_int2=n2,
    )


def memory_report_from_counts(
    n_int2: int,
    n_int4: int,
    n_fp16: int,
    heads: int,
    head_dim: int,
    layers: int = 1,
    group_count: int = 0,
) -> MemoryReport:
    """Closed-form accounting from per-layer token counts.

    ``group_count`` is the number of quantized groups per layer; each costs
    ``METADATA_BYTES_PER_GROUP`` bytes.
    """
    if min(n_int2, n_int4, n_fp16, group_count) < 0 or heads < 1 or head_dim < 1 or layers < 1:
        raise CacheError("token counts must be nonnegative and heads/head_dim/layers positive")
    elements = heads * head_dim * 2  # K and V
    b16 = n_fp16 * elements * FP16_BYTES_PER_ELEMENT
    b4 = packed_length(n_int4 * elements, 4)
    b2 = packed_length(n_int2 * elements, 2)
    meta = group_count * METADATA_BYTES_PER_GROUP
    baseline = (n_int2 + n_int4 + n_fp16) * elements * FP16_BYTES_PER_ELEMENT
    return _assemble(
        b16 * layers, b4 * layers, b2 * layers, meta * layers, baseline * layers,
        n_int2 * layers, n_int4 * layers, n_fp16 * layers, layers,
    )


def memory_report(caches: list[SegmentedKVCache]) -> MemoryReport:
    """Accounting recounted from the packed groups of real caches."""
    if not caches:
        raise CacheError("memory report needs at least one layer cache")
    b = {w: 0 for w in BitWidth}
    n = {w: 0 for w in BitWidth}
    meta = baseline = 0
    for cache in caches:
        for w, nbytes in cache.payload_bytes().items():
            b[w] += nbytes
        for w, count in cache.token_counts().items():
            n[w] += count
        meta += cache.metadata_groups() * METADATA_BYTES_PER_GROUP
        baseline += cache.num_tokens * cache.row_dim * 2 * FP16_BYTES_PER_ELEMENT
    return _assemble(
        b[BitWidth.FP16], b[BitWidth.INT4], b[BitWidth.INT2], meta, baseline,
        n[BitWidth.INT2], n[BitWidth.INT4], n[BitWidth.FP16], len(caches),
    )


def append_decode_token(cache: SegmentedKVCache, k_row, v_row) -> None:
    """Append a generated token's K/V rows; quantized segments are untouched."""
    cache.append(k_row, v_row)
