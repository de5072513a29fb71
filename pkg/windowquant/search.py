"""
WindowQuant -- Window-level quantization search.

Given visual token embeddings, text prompt embeddings and one sensitivity
value per model layer, decide for every (layer, window) pair whether the
window's KV cache stays FP16 or is quantized to INT4 or INT2:

1. Each layer's sensitivity ``s_i`` (cosine of hidden states before/after its
   attention) is clamped to [0, 1] and mapped through two exponential
   threshold functions to ``T_low`` and ``T_high``.
2. Each window of ``S`` visual tokens is scored once against the text tokens
   (mean pairwise similarity); the score does not depend on the layer.
3. score > T_high → FP16, score < T_low → INT2, otherwise INT4.
4. Window 0 is pinned to FP16 in every layer.

Visual tokens past the last full window form the tail and always stay FP16;
they are not part of a ``BitWidthConfig``.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from windowquant.errors import DegenerateEmbeddingError, SearchError, ShapeError
from windowquant.numerics import Matrix, cosine_sim, matmul, normalize_rows, pairwise_cosine, transpose
from windowquant.quant import BitWidth

logger = logging.getLogger("windowquant.search")

SIMILARITY_METRICS = ("cosine", "pearson", "euclidean")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class WindowPlan:
    window_size: int
    num_windows: int
    tail_len: int

    def __post_init__(self):
        if self.window_size < 1:
            raise SearchError(f"window size must be >= 1, got {self.window_size}")
        if self.num_windows < 0 or not 0 <= self.tail_len < self.window_size:
            raise SearchError(
                f"inconsistent plan: {self.num_windows} windows, tail {self.tail_len}, "
                f"window size {self.window_size}"
            )

    @classmethod
    def for_tokens(cls, total_tokens: int, window_size: int) -> "WindowPlan":
        if window_size < 1:
            raise SearchError(f"window size must be >= 1, got {window_size}")
        return cls(window_size, total_tokens // window_size, total_tokens % window_size)

    @property
    def windowed_tokens(self) -> int:
        return self.num_windows * self.window_size

    @property
    def total_tokens(self) -> int:
        return self.windowed_tokens + self.tail_len

    def window_slice(self, window_id: int) -> slice:
        start = window_id * self.window_size
        return slice(start, start + self.window_size)


@dataclass(frozen=True)
class LayerSensitivity:
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise SearchError("layer sensitivity needs at least one layer")
        for i, s in enumerate(self.values):
            if not (-1.0 - 1e-12 <= s <= 1.0 + 1e-12):
                raise SearchError(f"sensitivity of layer {i} is {s}, outside [-1, 1]")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> float:
        return self.values[i]


@dataclass(frozen=True)
class Thresholds:
    low: tuple[float, ...]
    high: tuple[float, ...]


@dataclass(frozen=True)
class BitWidthConfig:
    """Per-layer, per-window widths. Tail and text tokens are implicitly FP16."""

    widths: tuple[tuple[BitWidth, ...], ...]
    plan: WindowPlan
    alpha: float

    def __post_init__(self):
        for i, layer in enumerate(self.widths):
            if len(layer) != self.plan.num_windows:
                raise ShapeError(
                    f"layer {i} has {len(layer)} windows, plan has {self.plan.num_windows}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.widths)

    @property
    def num_windows(self) -> int:
        return self.plan.num_windows

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_layers, self.num_windows)

    def layer(self, i: int) -> tuple[BitWidth, ...]:
        return self.widths[i]

    def first_window_pinned(self) -> bool:
        return self.num_windows == 0 or all(layer[0] is BitWidth.FP16 for layer in self.widths)

    def histogram(self) -> list[dict[str, int]]:
        """Per layer, number of windows at each width."""
        out = []
        for layer in self.widths:
            counts = Counter(layer)
            out.append({w.label: counts.get(w, 0) for w in BitWidth})
        return out

    def token_counts(self) -> dict[str, int]:
        """Window tokens per width, summed over layers."""
        counts = {w.label: 0 for w in BitWidth}
        for layer in self.widths:
            for w in layer:
                counts[w.label] += self.plan.window_size
        return counts

    def to_document(self) -> dict:
        return {
            "window_size": self.plan.window_size,
            "num_windows": self.plan.num_windows,
            "tail_len": self.plan.tail_len,
            "alpha": self.alpha,
            "layers": [[w.label for w in layer] for layer in self.widths],
        }

    @classmethod
    def from_document(cls, doc: dict) -> "BitWidthConfig":
        try:
            plan = WindowPlan(int(doc["window_size"]), int(doc["num_windows"]), int(doc["tail_len"]))
            widths = tuple(tuple(BitWidth.from_label(w) for w in layer) for layer in doc["layers"])
            return cls(widths=widths, plan=plan, alpha=float(doc["alpha"]))
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise SearchError(f"malformed bit-width config document: {exc}") from exc


# ---------------------------------------------------------------------------
# Sensitivity & thresholds
# ---------------------------------------------------------------------------
def layer_sensitivity(h_before: Matrix, h_after: Matrix) -> float:
    """Cosine similarity of the two hidden-state matrices, flattened."""
    if np.shape(h_before) != np.shape(h_after):
        raise ShapeError(f"hidden states differ in shape: {np.shape(h_before)} vs {np.shape(h_after)}")
    return cosine_sim(h_before, h_after)


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise SearchError(f"alpha must be positive, got {alpha}")


def threshold_low(s: float, alpha: float) -> float:
    """T_low = (e^{αs} − 1) / (e^α − 1)."""
    _check_alpha(alpha)
    return math.expm1(alpha * s) / math.expm1(alpha)


def threshold_high(s: float, alpha: float) -> float:
    """T_high = (e^{−αs} − 1) / (e^{−α} − 1)."""
    _check_alpha(alpha)
    return math.expm1(-alpha * s) / math.expm1(-alpha)


def clamp_sensitivity(s: float) -> float:
    return min(max(s, 0.0), 1.0)


def compute_thresholds(sens: LayerSensitivity, alpha: float) -> Thresholds:
    clamped = [clamp_sensitivity(s) for s in sens.values]
    return Thresholds(
        low=tuple(threshold_low(s, alpha) for s in clamped),
        high=tuple(threshold_high(s, alpha) for s in clamped),
    )


# ---------------------------------------------------------------------------
# Window similarity
# ---------------------------------------------------------------------------
def window_similarity(text: Matrix, window: Matrix, metric: str = "cosine") -> float:
    """Mean similarity over all (text token, window token) pairs.

    ``pearson`` centres each row on its own mean first, so a row whose entries
    are all equal has no direction and raises ``DegenerateEmbeddingError``
    even when its norm is nonzero.
    """
    if text.shape[1] != window.shape[1]:
        raise ShapeError(f"text dim {text.shape[1]} != window dim {window.shape[1]}")
    if metric == "cosine":
        return float(pairwise_cosine(text, window).mean())
    if metric == "pearson":
        try:
            return float(pairwise_cosine(
                text - text.mean(axis=1, keepdims=True),
                window - window.mean(axis=1, keepdims=True),
            ).mean())
        except DegenerateEmbeddingError as e:
            raise DegenerateEmbeddingError("pearson similarity of a constant embedding row") from e
    if metric == "euclidean":
        for rows in (text, window):
            normalize_rows(rows)  # rejects zero-norm embeddings
        sq = (
            (text ** 2).sum(axis=1)[:, None]
            + (window ** 2).sum(axis=1)[None, :]
            - 2.0 * matmul(text, transpose(window))
        )
        return float((1.0 / (1.0 + np.sqrt(np.maximum(sq, 0.0)))).mean())
    raise SearchError(f"unknown similarity metric {metric!r}; expected one of {SIMILARITY_METRICS}")


def window_similarities(visual: Matrix, text: Matrix, plan: WindowPlan, metric: str = "cosine") -> list[float]:
    return [
        window_similarity(text, visual[plan.window_slice(j)], metric)
        for j in range(plan.num_windows)
    ]


def assign_window(sim: float, t_low: float, t_high: float) -> BitWidth:
    if t_low > t_high:
        raise SearchError(f"T_low {t_low} exceeds T_high {t_high}")
    if sim > t_high:
        return BitWidth.FP16
    if sim < t_low:
        return BitWidth.INT2
    return BitWidth.INT4


def pin_first_window(widths: list[list[BitWidth]]) -> list[list[BitWidth]]:
    for layer in widths:
        if layer:
            layer[0] = BitWidth.FP16
    return widths


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------
def search_config(
    visual: Matrix,
    text: Matrix,
    sens: LayerSensitivity,
    window_size: int,
    alpha: float,
    *,
    pin_first: bool = True,
    metric: str = "cosine",
) -> BitWidthConfig:
    """Assign a width to every (layer, window) pair."""
    if visual.shape[0] < window_size:
        raise SearchError(f"{visual.shape[0]} visual tokens cannot fill a window of {window_size}")
    plan = WindowPlan.for_tokens(visual.shape[0], window_size)
    thresholds = compute_thresholds(sens, alpha)
    sims = window_similarities(visual, text, plan, metric)

    widths = [
        [assign_window(sim, t_low, t_high) for sim in sims]
        for t_low, t_high in zip(thresholds.low, thresholds.high)
    ]
    if pin_first:
        pin_first_window(widths)

    config = BitWidthConfig(widths=tuple(tuple(layer) for layer in widths), plan=plan, alpha=alpha)
    logger.debug("Searched %d layers x %d windows: %s", config.num_layers, config.num_windows,
                 config.histogram())
    return config


def uniform_config(num_layers: int, plan: WindowPlan, width: BitWidth, alpha: float = 0.0) -> BitWidthConfig:
    return BitWidthConfig(
        widths=tuple((width,) * plan.num_windows for _ in range(num_layers)),
        plan=plan,
        alpha=alpha,
    )


def random_config(
    num_layers: int,
    plan: WindowPlan,
    seed: int,
    *,
    pin_first: bool = True,
    alpha: float = 0.0,
) -> BitWidthConfig:
    """Uniformly random widths from a seeded generator (search disabled)."""
    rng = np.random.default_rng(seed)
    choices = list(BitWidth)
    widths = [
        [choices[i] for i in rng.integers(0, len(choices), size=plan.num_windows)]
        for _ in range(num_layers)
    ]
    if pin_first:
        pin_first_window(widths)
    return BitWidthConfig(widths=tuple(tuple(layer) for layer in widths), plan=plan, alpha=alpha)


def batch_vote(configs: list[BitWidthConfig]) -> BitWidthConfig:
    """Per-cell modal width across a batch; ties go to the higher precision."""
    if not configs:
        raise SearchError("batch vote needs at least one config")
    first = configs[0]
    for other in configs[1:]:
        if other.shape != first.shape or other.plan != first.plan:
            raise ShapeError(f"config shape {other.shape} does not match {first.shape}")

    widths = []
    for i in range(first.num_layers):
        layer = []
        for j in range(first.num_windows):
            votes = Counter(c.widths[i][j] for c in configs)
            layer.append(max(votes, key=lambda w: (votes[w], w.bits)))
        widths.append(tuple(layer))
    return BitWidthConfig(widths=tuple(widths), plan=first.plan, alpha=first.alpha)
