"""
WindowQuant -- Toy multi-layer decoder.

A small pre-norm residual transformer with deterministic, seeded weights. It
stands in for a pretrained language model: any fixed nonlinear map with a
real per-layer KV cache is enough to exercise search, quantization and the
blocked decode kernel.

Each block is ``h += attn(norm(h)) · W_o`` followed by
``h += relu(norm(h) · W_1) · W_2``. The attention output projection of
deeper layers is scaled up so that sensitivities spread across layers, with
early layers changing the hidden state little and late layers a lot.
"""
import copy
import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from windowquant.attention import multihead_prefill
from windowquant.errors import ShapeError
from windowquant.numerics import Matrix, Vector, as_matrix, as_vector, matmul
from windowquant.search import LayerSensitivity, layer_sensitivity

logger = logging.getLogger("windowquant.model")

NORM_EPS = 1e-5


@dataclass(frozen=True)
class ToyModelSpec:
    layers: int = 4
    heads: int = 2
    head_dim: int = 8
    vocab: int = 64
    seed: int = 0
    weight_scale: float = 0.05
    depth_gain: float = 8.0

    def __post_init__(self):
        for name in ("layers", "heads", "head_dim", "vocab"):
            if getattr(self, name) < 1:
                raise ShapeError(f"model {name} must be >= 1, got {getattr(self, name)}")
        if self.weight_scale <= 0 or self.depth_gain < 0:
            raise ShapeError("weight_scale must be positive and depth_gain nonnegative")

    @property
    def embed_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class LayerWeights:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    w_1: Matrix
    w_2: Matrix


@dataclass(frozen=True)
class PrefillResult:
    keys: list[Matrix]
    values: list[Matrix]
    attn_before: list[Matrix]
    attn_after: list[Matrix]
    hidden: Matrix
    logits: Vector

    @property
    def first_token(self) -> int:
        return int(np.argmax(self.logits))


@dataclass(frozen=True)
class StepResult:
    logits: Vector
    attention_outputs: list[Vector]

    @property
    def token(self) -> int:
        return int(np.argmax(self.logits))


# attend(layer, q_row, k_row, v_row) -> attention output row (before W_o)
AttendFn = Callable[[int, Vector, Vector, Vector], Vector]


def layer_norm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + NORM_EPS)


class ToyDecoder:
    def __init__(self, spec: ToyModelSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        d, s = spec.embed_dim, spec.weight_scale
        self.embeddings = as_matrix(rng.normal(0.0, 1.0 / np.sqrt(d), (spec.vocab, d)))
        self.layers: list[LayerWeights] = []
        for i in range(spec.layers):
            depth = i / (spec.layers - 1) if spec.layers > 1 else 0.0
            gain = 1.0 + spec.depth_gain * depth ** 2
            self.layers.append(LayerWeights(
                w_q=as_matrix(rng.normal(0.0, s, (d, d))),
                w_k=as_matrix(rng.normal(0.0, s, (d, d))),
                w_v=as_matrix(rng.normal(0.0, s, (d, d))),
                w_o=as_matrix(rng.normal(0.0, s * gain, (d, d))),
                w_1=as_matrix(rng.normal(0.0, s, (d, 2 * d))),
                w_2=as_matrix(rng.normal(0.0, s, (2 * d, d))),
            ))
        self.w_out = as_matrix(rng.normal(0.0, 1.0 / np.sqrt(d), (d, spec.vocab)))

    def with_zeroed_attention(self, layer: int) -> "ToyDecoder":
        """Copy of this decoder whose layer ``layer`` has a zero output projection."""
        clone = copy.copy(self)
        clone.layers = list(self.layers)
        d = self.spec.embed_dim
        clone.layers[layer] = replace(self.layers[layer], w_o=as_matrix(np.zeros((d, d))))
        return clone

    def _feed_forward(self, h: np.ndarray, lw: LayerWeights) -> np.ndarray:
        return np.maximum(layer_norm(h) @ lw.w_1, 0.0) @ lw.w_2

    def prefill(self, x: Matrix) -> PrefillResult:
        """Full-precision masked forward pass over the input embeddings."""
        spec = self.spec
        if x.ndim != 2 or x.shape[1] != spec.embed_dim:
            raise ShapeError(f"input shape {x.shape} does not match embed_dim {spec.embed_dim}")
        h = np.array(x, dtype=np.float64)
        keys, values, before, after = [], [], [], []
        for lw in self.layers:
            a = as_matrix(layer_norm(h))
            q, k, v = matmul(a, lw.w_q), matmul(a, lw.w_k), matmul(a, lw.w_v)
            keys.append(k)
            values.append(v)
            before.append(as_matrix(h))
            h = h + multihead_prefill(q, k, v, spec.heads, spec.head_dim) @ lw.w_o
            after.append(as_matrix(h))
            h = h + self._feed_forward(h, lw)
        logits = layer_norm(h[-1:]) @ self.w_out
        return PrefillResult(keys, values, before, after, as_matrix(h), as_vector(logits))

    def step(self, token_id: int, attend: AttendFn) -> StepResult:
        """One decode step; ``attend`` owns the KV cache of every layer."""
        if not 0 <= token_id < self.spec.vocab:
            raise ShapeError(f"token id {token_id} outside vocab of {self.spec.vocab}")
        h = np.array(self.embeddings[token_id:token_id + 1])
        outputs = []
        for i, lw in enumerate(self.layers):
            a = layer_norm(h)
            q, k, v = (a @ lw.w_q)[0], (a @ lw.w_k)[0], (a @ lw.w_v)[0]
            out = as_vector(attend(i, as_vector(q), as_vector(k), as_vector(v)))
            outputs.append(out)
            h = h + out.reshape(1, -1) @ lw.w_o
            h = h + self._feed_forward(h, lw)
        return StepResult(as_vector(layer_norm(h) @ self.w_out), outputs)


def calibrate(model: ToyModelSpec | ToyDecoder, sample_input: Matrix) -> LayerSensitivity:
    """Per-layer cosine of hidden states before/after the attention sub-block."""
    decoder = model if isinstance(model, ToyDecoder) else ToyDecoder(model)
    result = decoder.prefill(sample_input)
    sens = LayerSensitivity(tuple(
        layer_sensitivity(h_before, h_after)
        for h_before, h_after in zip(result.attn_before, result.attn_after)
    ))
    logger.debug("Calibrated sensitivities: %s", ", ".join(f"{s:.4f}" for s in sens.values))
    return sens
