import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_layer
from ream.calibration import LayerStats, collect_layer_stats
from ream.model import ExpertWeights, MoELayer, moe_forward
from ream.saliency import compute_saliency, saliency_freq, saliency_reap


def hand_stats(masked_probs, outputs, top_k=1):
    """LayerStats built from a T x N masked-prob table and per-expert outputs of routed tokens."""
    mp = np.asarray(masked_probs, dtype=np.float64)
    t, n = mp.shape
    mask = mp > 0
    captured = [np.flatnonzero(mask[:, i]) for i in range(n)]
    d = next(np.shape(o)[-1] for o in outputs if np.size(o))
    outs = [np.asarray(outputs[i], dtype=np.float64).reshape(len(captured[i]), d) for i in range(n)]
    return LayerStats(
        gate_logits=np.zeros((t, n)),
        probs=mp,
        route_mask=mask,
        masked_probs=mp,
        captured=captured,
        expert_outputs=outs,
        gated_outputs=[mp[c, i, None] * o for i, (c, o) in enumerate(zip(captured, outs))],
        hidden_acts=[np.zeros((1, c.size)) for c in captured],
        active_counts=mask.sum(axis=0),
        top_k=top_k,
    )


def scaled_down(layer, c):
    experts = tuple(
        ExpertWeights(e.w_gate_proj, e.w_up, np.asarray(e.w_down, dtype=np.float64) * c) for e in layer.experts
    )
    return MoELayer(layer.w_gate, experts, layer.top_k)


class TestFreq:
    def test_two_tokens_same_expert(self):
        s = hand_stats([[0.7, 0, 0], [0.5, 0, 0]], [np.ones((2, 2)), [], []])
        assert_array_equal(saliency_freq(s).scores, [1.0, 0.0, 0.0])

    def test_top_k_equals_n(self, rng):
        layer = random_layer(rng, n=4, top_k=4)
        s = collect_layer_stats(layer, rng.standard_normal((20, 6)))
        assert_array_equal(saliency_freq(s).scores, 1.0)

    def test_sums_to_top_k(self, small_stats):
        sal = saliency_freq(small_stats).scores
        # counts are integers, so the sum is exact up to one division rounding
        assert sal.sum() == pytest.approx(small_stats.top_k, abs=1e-12)
        assert np.all((sal >= 0) & (sal <= 1))


class TestReap:
    def test_single_term(self):
        s = hand_stats([[0.6, 0.0]], [[[2.0, 0.0]], []])
        assert saliency_reap(s).scores[0] == pytest.approx(1.2)
        assert saliency_reap(s).scores[1] == 0.0

    def test_two_term_mean(self):
        s = hand_stats([[0.5, 0.0], [0.25, 0.0]], [[[0.0, 1.0], [2.0, 0.0]], []])
        assert saliency_reap(s).scores[0] == pytest.approx(0.5)

    def test_zero_output(self):
        s = hand_stats([[0.6], [0.4]], [np.zeros((2, 3))])
        assert saliency_reap(s).scores[0] == 0.0

    def test_trace_oracle(self, rng):
        layer = random_layer(rng, n=5, top_k=2)
        xs = rng.standard_normal((40, 6))
        sums, counts = np.zeros(5), np.zeros(5)
        for x in xs:
            _, tr = moe_forward(layer, x)
            for i in tr.active:
                sums[i] += tr.masked_probs[i] * np.linalg.norm(tr.outputs[int(i)])
                counts[i] += 1
        expected = np.divide(sums, counts, out=np.zeros(5), where=counts > 0)
        assert_allclose(saliency_reap(collect_layer_stats(layer, xs)).scores, expected, rtol=1e-12)

    def test_token_order_invariant(self, rng):
        layer = random_layer(rng, n=4, top_k=2)
        xs = rng.standard_normal((50, 6))
        a = saliency_reap(collect_layer_stats(layer, xs)).scores
        b = saliency_reap(collect_layer_stats(layer, xs[rng.permutation(50)])).scores
        assert_allclose(a, b, rtol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from([0.25, 0.5, 2.0, 4.0]), st.integers(0, 2**31))
    def test_scaling_w_down(self, c, seed):
        r = np.random.default_rng(seed)
        layer = random_layer(r, n=4, top_k=2)
        xs = r.standard_normal((30, 6))
        base = collect_layer_stats(layer, xs)
        scaled = collect_layer_stats(scaled_down(layer, c), xs)
        # powers of two scale float32 weights exactly
        assert_allclose(saliency_reap(scaled).scores, c * saliency_reap(base).scores, rtol=1e-12)
        assert_array_equal(saliency_freq(scaled).scores, saliency_freq(base).scores)

    def test_nonnegative(self, small_stats):
        assert np.all(saliency_reap(small_stats).scores >= 0)


def test_dispatch(small_stats):
    assert compute_saliency(small_stats, "freq").kind == "freq"
    assert compute_saliency(small_stats, "reap").kind == "reap"
    with pytest.raises(ValueError, match="bogus"):
        compute_saliency(small_stats, "bogus")


def test_dense_capture_same_reap(small_model, small_calib):
    layer = small_model.layers[0]
    dense = collect_layer_stats(layer, small_calib.tokens, dense=True)
    sparse = collect_layer_stats(layer, small_calib.tokens)
    assert_allclose(saliency_reap(dense).scores, saliency_reap(sparse).scores, rtol=1e-12)
