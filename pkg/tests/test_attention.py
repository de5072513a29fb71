"""Unit tests for prefill/decode attention, fused dequantization and reordering."""

import itertools
import math

import numpy as np
import pytest

from windowquant.attention import (
    DecodeBlocks,
    decode_attention,
    decode_step,
    fused_dequant_output,
    fused_dequant_scores,
    multihead_decode,
    permute_windows,
    prefill_attention,
    segment_output,
    segment_scores,
    unfused_output,
    unfused_scores,
    verify_reorder_equivalence,
)
from windowquant.errors import CacheError, ShapeError
from windowquant.kvstore import Segment, build_cache
from windowquant.numerics import as_matrix, as_vector, relative_error, softmax_rows
from windowquant.quant import BitWidth, PackedGroup, QuantParams, pack_codes
from windowquant.search import WindowPlan, random_config, uniform_config

FP16, INT4, INT2 = BitWidth.FP16, BitWidth.INT4, BitWidth.INT2


def _naive_attention(q, k, v, d_k, causal):
    n_q, n_k = q.shape[0], k.shape[0]
    out = np.zeros((n_q, v.shape[1]))
    for i in range(n_q):
        scores = []
        for j in range(n_k):
            if causal and j > i:
                scores.append(-1e9)
                continue
            s = 0.0
            for c in range(d_k):
                s += q[i, c] * k[j, c]
            scores.append(s / math.sqrt(d_k))
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        for j in range(n_k):
            for c in range(v.shape[1]):
                out[i, c] += weights[j] / total * v[j, c]
    return out


def _random_segment(rng, width, windows, window_size, head_dim):
    seg = Segment(width=width, window_size=window_size, head_dim=head_dim)
    for wid in range(windows):
        block = rng.normal(loc=rng.uniform(-2, 2), scale=rng.uniform(0.1, 2.0), size=(window_size, head_dim))
        seg.add_window(wid, block)
    return seg


class TestPrefillAttention:
    def test_single_token(self, rng):
        q, k, v = (as_matrix(rng.normal(size=(1, 3))) for _ in range(3))
        assert np.allclose(prefill_attention(q, k, v, 3), v)

    def test_mask_forces_first_token(self):
        out = prefill_attention(as_matrix([[1, 0], [0, 1]]), as_matrix([[1, 0], [0, 1]]),
                                as_matrix([[5, 6], [7, 8]]), 2)
        assert np.allclose(out[0], [5, 6])

    def test_matches_triple_loop(self, rng):
        for n in range(1, 17):
            d = int(rng.integers(1, 6))
            q, k, v = (rng.normal(size=(n, d)) for _ in range(3))
            out = prefill_attention(as_matrix(q), as_matrix(k), as_matrix(v), d)
            assert np.max(np.abs(out - _naive_attention(q, k, v, d, causal=True))) <= 1e-9

    def test_token_count_mismatch(self, rng):
        with pytest.raises(ShapeError):
            prefill_attention(as_matrix(rng.normal(size=(2, 2))), as_matrix(rng.normal(size=(3, 2))),
                              as_matrix(rng.normal(size=(3, 2))), 2)


class TestDecodeAttention:
    def test_matches_triple_loop(self, rng):
        for n in range(1, 17):
            d = int(rng.integers(1, 6))
            q = rng.normal(size=(1, d))
            k, v = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            out = decode_attention(as_matrix(q), as_matrix(k), as_matrix(v), d)
            assert np.max(np.abs(out - _naive_attention(q, k, v, d, causal=False))) <= 1e-9

    def test_empty_cache(self):
        with pytest.raises(CacheError):
            decode_attention(as_matrix([[1.0]]), as_matrix(np.zeros((0, 1))), as_matrix(np.zeros((0, 1))), 1)


class TestFusedDequant:
    def test_codes_at_zero_point_give_zero_scores(self):
        params = QuantParams(scale=0.7, zero_point=5, bits=4)
        group = PackedGroup(params, 6, pack_codes([5] * 6, 4))
        seg = Segment(width=INT4, window_size=3, head_dim=2, window_ids=[0], groups=[group])
        assert not fused_dequant_scores([1.0, -2.0], seg, 2).any()

    def test_single_element(self):
        group = PackedGroup(QuantParams(scale=1.0, zero_point=0, bits=4), 1, pack_codes([3], 4))
        seg = Segment(width=INT4, window_size=1, head_dim=1, window_ids=[0], groups=[group])
        assert fused_dequant_scores([2.0], seg, 1)[0] == pytest.approx(6.0)

    @pytest.mark.parametrize("width", [INT2, INT4])
    def test_matches_unfused_scores_and_outputs(self, rng, width):
        for _ in range(500):
            seg = _random_segment(rng, width, int(rng.integers(1, 4)), int(rng.integers(1, 6)),
                                  int(rng.integers(1, 9)))
            q = rng.normal(size=seg.head_dim)
            fused = fused_dequant_scores(q, seg, seg.head_dim)
            assert relative_error(fused, unfused_scores(q, seg, seg.head_dim)) <= 1e-6
            w = rng.dirichlet(np.ones(seg.token_count))
            assert relative_error(fused_dequant_output(w, seg), unfused_output(w, seg)) <= 1e-6

    def test_fp16_segments_are_rejected(self, rng):
        seg = _random_segment(rng, FP16, 1, 2, 2)
        with pytest.raises(ShapeError):
            fused_dequant_scores([1.0, 0.0], seg, 2)

    def test_dispatch_honours_fusion_flag(self, rng):
        seg = _random_segment(rng, INT2, 2, 3, 4)
        q = rng.normal(size=4)
        assert np.allclose(segment_scores(q, seg, 4, fused=True), segment_scores(q, seg, 4, fused=False))
        w = np.full(seg.token_count, 1.0 / seg.token_count)
        assert np.allclose(segment_output(w, seg, fused=True), segment_output(w, seg, fused=False))

    def test_query_length_mismatch(self, rng):
        seg = _random_segment(rng, INT4, 1, 2, 3)
        with pytest.raises(ShapeError):
            fused_dequant_scores([1.0, 2.0], seg, 3)


class TestDecodeBlocks:
    def test_blocked_softmax_matches_monolithic(self, rng):
        for _ in range(200):
            lengths = [int(x) for x in rng.integers(0, 7, size=3)]
            lengths[-1] += 1
            scores = tuple(as_vector(rng.normal(scale=3.0, size=n)) for n in lengths)
            blocks = DecodeBlocks(scores=scores, widths=(INT2, INT4, FP16))
            sliced = np.concatenate(blocks.softmax_blocks())
            whole = softmax_rows(as_matrix(np.concatenate(scores).reshape(1, -1)))[0]
            assert np.max(np.abs(sliced - whole)) <= 1e-9
            assert (blocks.len_2, blocks.len_4) == (lengths[0], lengths[1])

    def test_generalised_block_list(self):
        scores = tuple(as_vector(np.zeros(n)) for n in (2, 1, 3, 2))
        blocks = DecodeBlocks(scores=scores, widths=(FP16, INT2, INT2, FP16))
        assert blocks.lengths == [2, 1, 3, 2]
        assert blocks.len_2 == 4 and blocks.len_4 == 0 and blocks.total == 8


class TestDecodeStep:
    def test_hand_computed(self):
        k = v = as_matrix([[1, 0], [0, 1]])
        cache = build_cache(k, v, [FP16, FP16], WindowPlan(1, 2, 0), 1, 2)
        p = 1.0 / (1.0 + math.exp(-1.0 / math.sqrt(2.0)))
        assert decode_step([1.0, 0.0], cache, 2) == pytest.approx([p, 1.0 - p], abs=1e-9)

    def test_fp16_cache_matches_unmasked_attention(self, rng):
        heads, head_dim = 2, 3
        plan = WindowPlan(2, 4, 1)
        k, v = (as_matrix(rng.normal(size=(12, heads * head_dim))) for _ in range(2))
        cache = build_cache(k, v, [FP16] * 4, plan, heads, head_dim)
        q = rng.normal(size=heads * head_dim)
        expected = multihead_decode(q, k, v, heads, head_dim)
        assert np.max(np.abs(decode_step(q, cache) - expected)) <= 1e-9

    def test_reordered_fp16_windows_match_baseline(self, rng):
        k, v = (as_matrix(rng.normal(size=(12, 4))) for _ in range(2))
        q = as_matrix(rng.normal(size=(1, 4)))
        assert verify_reorder_equivalence(q, k, v, [1, 4, 2, 5, 0, 3], 4) <= 1e-6

    def test_mixed_cache_matches_dequantized_oracle(self, rng):
        heads, head_dim = 2, 4
        plan = WindowPlan(4, 6, 2)
        k, v = (as_matrix(rng.normal(size=(30, heads * head_dim))) for _ in range(2))
        cache = build_cache(k, v, random_config(1, plan, seed=5).layer(0), plan, heads, head_dim)
        q = rng.normal(size=heads * head_dim)
        expected = multihead_decode(q, cache.reconstruct("k"), cache.reconstruct("v"), heads, head_dim)
        for fused in (True, False):
            assert relative_error(decode_step(q, cache, fused=fused), expected) <= 1e-6

    def test_output_lies_in_convex_hull_of_values(self, rng):
        plan = WindowPlan(3, 5, 0)
        k, v = (as_matrix(rng.normal(size=(15, 4))) for _ in range(2))
        cache = build_cache(k, v, [FP16, INT2, INT4, INT2, FP16], plan, 1, 4)
        values = cache.reconstruct("v")
        for _ in range(20):
            out = decode_step(rng.normal(size=4) * 3, cache)
            assert np.all(out >= values.min(axis=0) - 1e-12)
            assert np.all(out <= values.max(axis=0) + 1e-12)

    def test_no_reorder_gives_same_output(self, rng):
        plan = WindowPlan(2, 6, 0)
        k, v = (as_matrix(rng.normal(size=(12, 4))) for _ in range(2))
        widths = [FP16, INT2, INT4, FP16, INT2, INT4]
        a = build_cache(k, v, widths, plan, 2, 2)
        b = build_cache(k, v, widths, plan, 2, 2, reorder=False)
        q = rng.normal(size=4)
        assert relative_error(decode_step(q, b), decode_step(q, a)) <= 1e-6

    def test_uniform_config_decode(self, rng):
        plan = WindowPlan(2, 3, 0)
        k, v = (as_matrix(rng.normal(size=(6, 2))) for _ in range(2))
        cache = build_cache(k, v, uniform_config(1, plan, INT2).layer(0), plan, 1, 2)
        assert np.all(np.isfinite(decode_step([0.5, -0.5], cache)))

    def test_query_width_mismatch(self, rng):
        k, v = (as_matrix(rng.normal(size=(4, 2))) for _ in range(2))
        cache = build_cache(k, v, [FP16, FP16], WindowPlan(2, 2, 0), 1, 2)
        with pytest.raises(ShapeError):
            decode_step([1.0, 2.0, 3.0], cache)

    def test_empty_cache(self):
        empty = as_matrix(np.zeros((0, 2)))
        cache = build_cache(empty, empty, [], WindowPlan(2, 0, 0), 1, 2)
        with pytest.raises(CacheError):
            decode_step([1.0, 0.0], cache)


class TestReorderEquivalence:
    def test_identity_is_exact(self, rng):
        k, v = (as_matrix(rng.normal(size=(8, 3))) for _ in range(2))
        q = as_matrix(rng.normal(size=(1, 3)))
        assert verify_reorder_equivalence(q, k, v, [0, 1, 2, 3], 3) == 0.0

    def test_reversal(self, rng):
        k, v = (as_matrix(rng.normal(size=(8, 3))) for _ in range(2))
        q = as_matrix(rng.normal(size=(1, 3)))
        assert verify_reorder_equivalence(q, k, v, [3, 2, 1, 0], 3) <= 1e-6

    def test_random_instances(self, rng):
        for _ in range(200):
            windows = int(rng.integers(1, 9))
            heads, head_dim = int(rng.integers(1, 5)), int(rng.integers(1, 17))
            window_size = int(rng.integers(1, 5))
            tokens = windows * window_size + int(rng.integers(0, 3))
            k, v = (rng.normal(size=(tokens, heads * head_dim)) for _ in range(2))
            q = rng.normal(size=(1, heads * head_dim))
            if windows <= 4:
                perms = list(itertools.permutations(range(windows)))
            else:
                perms = [rng.permutation(windows) for _ in range(20)]
            for head in range(heads):
                cols = slice(head * head_dim, (head + 1) * head_dim)
                qh, kh, vh = as_matrix(q[:, cols]), as_matrix(k[:, cols]), as_matrix(v[:, cols])
                for perm in perms:
                    assert verify_reorder_equivalence(qh, kh, vh, perm, head_dim, window_size) <= 1e-6

    def test_permute_windows_keeps_tail(self):
        x = as_matrix(np.arange(10.0).reshape(5, 2))
        assert np.array_equal(permute_windows(x, [1, 0], 2), [[4, 5], [6, 7], [0, 1], [2, 3], [8, 9]])

    def test_rejects_non_permutation(self, rng):
        k, v = (as_matrix(rng.normal(size=(4, 2))) for _ in range(2))
        with pytest.raises(CacheError):
            verify_reorder_equivalence(as_matrix([[1.0, 0.0]]), k, v, [0, 0], 2)
