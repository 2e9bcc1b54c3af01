import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_expert, random_layer, random_model
from ream.model import (
    MAGIC,
    ExpertWeights,
    ModelSpec,
    MoELayer,
    RedundancyPlan,
    expert_forward,
    layer_pass,
    load_model,
    model_forward,
    model_forward_batch,
    model_from_bytes,
    model_to_bytes,
    moe_forward,
    save_model,
    synth_model,
)
from ream.numeric import ShapeError, softmax


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def silu_ref(z):
    return z / (1.0 + np.exp(-z))


def expert_ref(e, x):
    gp, up, down = f32(e.w_gate_proj), f32(e.w_up), f32(e.w_down)
    return down @ (silu_ref(gp @ x) * (up @ x))


def moe_ref(layer, x):
    """Full sum over all N experts with masked probabilities."""
    probs = softmax(f32(layer.w_gate) @ x)
    keep = sorted(range(probs.size), key=lambda i: (-probs[i], i))[: layer.top_k]
    y = np.zeros_like(x)
    for i, e in enumerate(layer.experts):
        pi = probs[i] if i in keep else 0.0
        y += pi * expert_ref(e, x)
    return y


class TestExpert:
    def test_zero_weights(self):
        e = ExpertWeights(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((2, 3)))
        out, h = expert_forward(e, np.array([1.0, -2.0]))
        assert_array_equal(out, 0.0)
        assert h.shape == (3,)

    def test_scalar_case(self):
        e = ExpertWeights([[1.0]], [[1.0]], [[1.0]])
        out, h = expert_forward(e, np.array([1.0]))
        assert out[0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)))
        assert out[0] == pytest.approx(0.731059, abs=1e-6)
        assert h[0] == out[0]

    def test_permuted_clone_same_function(self, rng):
        e = random_expert(rng)
        p = rng.permutation(e.d_ff)
        clone = e.permute_hidden(p)
        xs = rng.standard_normal((100, e.d_model))
        assert_allclose(expert_forward(clone, xs)[0], expert_forward(e, xs)[0], atol=1e-12)
        # hidden activations move with the permutation
        assert_allclose(expert_forward(clone, xs)[1], expert_forward(e, xs)[1][:, p], atol=1e-12)

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            expert_forward(random_expert(rng), np.ones(3))

    def test_weights_read_only_float32(self, rng):
        e = random_expert(rng)
        assert e.w_up.dtype == np.float32
        with pytest.raises(ValueError):
            e.w_up[0, 0] = 1.0

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ExpertWeights([[np.nan]], [[1.0]], [[1.0]])

    def test_bad_perm(self, rng):
        with pytest.raises(ValueError):
            random_expert(rng).permute_hidden([0, 0, 1, 2, 3, 4, 5, 6])


class TestMoEForward:
    def test_identical_experts_linearity(self, rng):
        e = random_expert(rng)
        layer = MoELayer(rng.standard_normal((2, 6)), (e, e), top_k=2)
        x = rng.standard_normal(6)
        y, trace = moe_forward(layer, x)
        assert_allclose(y, trace.probs.sum() * expert_forward(e, x)[0], atol=1e-12)

    def test_top1_argmax(self, rng):
        layer = random_layer(rng, n=4, top_k=1)
        x = rng.standard_normal(6)
        y, trace = moe_forward(layer, x)
        best = int(np.argmax(trace.probs))
        assert trace.active.tolist() == [best]
        assert_allclose(y, trace.probs[best] * expert_forward(layer.experts[best], x)[0], atol=1e-12)

    def test_full_sum_oracle(self, rng):
        layer = random_layer(rng, n=3, top_k=2)
        for _ in range(10):
            x = rng.standard_normal(6)
            assert_allclose(moe_forward(layer, x)[0], moe_ref(layer, x), atol=1e-12)

    def test_dense_when_topk_is_n(self, rng):
        layer = random_layer(rng, n=4, top_k=4)
        x = rng.standard_normal(6)
        probs = softmax(f32(layer.w_gate) @ x)
        dense = sum(p * expert_ref(e, x) for p, e in zip(probs, layer.experts))
        assert_allclose(moe_forward(layer, x)[0], dense, atol=1e-12)

    def test_trace_contents(self, rng):
        layer = random_layer(rng, n=5, top_k=2)
        x = rng.standard_normal(6)
        _, trace = moe_forward(layer, x)
        assert trace.active.size == 2
        assert set(trace.outputs) == set(trace.active.tolist())
        assert_allclose(trace.gate_logits, f32(layer.w_gate) @ x, atol=1e-12)
        assert np.count_nonzero(trace.masked_probs) == 2

    def test_batch_matches_single(self, rng):
        layer = random_layer(rng, n=5, top_k=2)
        xs = rng.standard_normal((7, 6))
        lp = layer_pass(layer, xs)
        for t in range(7):
            assert_array_equal(lp.output[t], moe_forward(layer, xs[t])[0])
        assert_array_equal(lp.route_mask.sum(axis=1), 2)

    def test_renormalize(self, rng):
        layer = random_layer(rng, n=4, top_k=2)
        x = rng.standard_normal(6)
        _, trace = moe_forward(layer, x, renormalize=True)
        assert trace.masked_probs.sum() == pytest.approx(1.0)


class TestModelForward:
    def test_zero_model_is_identity(self):
        e = ExpertWeights(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((3, 4)))
        layer = MoELayer(np.zeros((2, 3)), (e, e), 1)
        m = ModelSpec(3, 4, 2, (layer, layer))
        x = np.array([0.5, -1.0, 2.0])
        assert_array_equal(model_forward(m, x)[0], x)

    def test_one_layer(self, rng):
        m = random_model(rng, num_layers=1)
        x = rng.standard_normal(6)
        assert_array_equal(model_forward(m, x)[0], x + moe_forward(m.layers[0], x)[0])

    def test_unrolled_three_layers(self, rng):
        m = random_model(rng, num_layers=3)
        x = rng.standard_normal(6)
        ref = x.copy()
        for layer in m.layers:
            ref = ref + moe_ref(layer, ref)
        pre, traces = model_forward(m, x)
        assert len(traces) == 3
        assert_allclose(pre, ref, atol=1e-10)

    def test_batch_matches_single(self, rng):
        m = random_model(rng, num_layers=3)
        xs = rng.standard_normal((5, 6))
        pre, inputs = model_forward_batch(m, xs)
        assert len(inputs) == 3
        for t in range(5):
            assert_array_equal(pre[t], model_forward(m, xs[t])[0])

    def test_deterministic(self, rng):
        m = random_model(rng)
        x = rng.standard_normal(6)
        assert_array_equal(model_forward(m, x)[0], model_forward(m, x)[0])

    def test_layer_shape_check(self, rng):
        with pytest.raises(ShapeError):
            ModelSpec(6, 8, 2, (random_layer(rng),))


class TestSynth:
    def test_plain_clones_bit_identical(self):
        m = synth_model(6, 8, 2, 6, 2, RedundancyPlan(3, 2), seed=1)
        for layer in m.layers:
            for b in range(3):
                assert layer.experts[2 * b].equals(layer.experts[2 * b + 1])

    def test_permuted_clones_same_outputs(self, rng):
        m = synth_model(6, 8, 1, 6, 2, RedundancyPlan(3, 2, permute_hidden=True), seed=1)
        xs = rng.standard_normal((100, 6))
        layer = m.layers[0]
        for b in range(3):
            base, clone = layer.experts[2 * b], layer.experts[2 * b + 1]
            assert not base.equals(clone)
            assert_allclose(expert_forward(clone, xs)[0], expert_forward(base, xs)[0], atol=1e-6)

    def test_same_seed_identical(self):
        plan = RedundancyPlan(4, 2, 0.02, True)
        assert synth_model(6, 8, 2, 8, 2, plan, 5).equals(synth_model(6, 8, 2, 8, 2, plan, 5))
        assert not synth_model(6, 8, 2, 8, 2, plan, 5).equals(synth_model(6, 8, 2, 8, 2, plan, 6))

    def test_inconsistent_plan(self):
        with pytest.raises(ValueError):
            synth_model(6, 8, 1, 8, 2, RedundancyPlan(3, 2), 0)

    def test_router_jitter_zero_copies_rows(self):
        m = synth_model(6, 8, 1, 4, 2, RedundancyPlan(2, 2, router_jitter=0.0), 0)
        assert_array_equal(m.layers[0].w_gate[0], m.layers[0].w_gate[1])

    def test_noise_applied(self):
        m = synth_model(6, 8, 1, 4, 2, RedundancyPlan(2, 2, noise_scale=0.1), 0)
        d = f32(m.layers[0].experts[1].w_up) - f32(m.layers[0].experts[0].w_up)
        assert 0.03 < d.std() < 0.3


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        m = synth_model(6, 8, 3, 4, 2, RedundancyPlan(2, 2, 0.01, True), seed=3)
        path = tmp_path / "m.moec"
        save_model(m, path)
        back = load_model(path)
        assert back.equals(m)
        assert model_to_bytes(back) == path.read_bytes()

    def test_header_layout(self):
        m = synth_model(6, 8, 1, 4, 2, RedundancyPlan(4), seed=9)
        data = model_to_bytes(m)
        assert data[:5] == MAGIC
        assert struct.unpack_from("<5sIIIIIq", data) == (MAGIC, 6, 8, 1, 4, 2, 9)
        floats = 4 * 6 + 4 * 3 * 6 * 8
        assert len(data) == struct.calcsize("<5sIIIIIq") + 4 * floats
        # first blob is the router, little-endian float32
        w = np.frombuffer(data, "<f4", count=24, offset=struct.calcsize("<5sIIIIIq"))
        assert_array_equal(w.reshape(4, 6), m.layers[0].w_gate)

    def test_signed_seed_field(self, rng):
        m = random_model(rng, seed=-(2**40))
        assert model_from_bytes(model_to_bytes(m)).seed == -(2**40)

    def test_bad_magic(self):
        data = bytearray(model_to_bytes(synth_model(6, 8, 1, 4, 2, RedundancyPlan(4), 0)))
        data[:5] = b"XXXXX"
        with pytest.raises(ValueError, match="magic"):
            model_from_bytes(bytes(data))

    def test_truncated_and_trailing(self):
        data = model_to_bytes(synth_model(6, 8, 1, 4, 2, RedundancyPlan(4), 0))
        with pytest.raises(ValueError, match="truncated"):
            model_from_bytes(data[:-4])
        with pytest.raises(ValueError, match="trailing"):
            model_from_bytes(data + b"\0\0\0\0")

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.moec"):
            load_model(tmp_path / "nope.moec")

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        m = synth_model(6, 8, 1, 4, 2, RedundancyPlan(4), 0)
        save_model(m, tmp_path / "a.moec")
        save_model(m, tmp_path / "a.moec")
        assert [p.name for p in tmp_path.iterdir()] == ["a.moec"]

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**40))
    def test_round_trip_property(self, layers, n, k, seed):
        k = min(k, n)
        m = synth_model(4, 5, layers, n, k, RedundancyPlan(n), seed)
        assert model_from_bytes(model_to_bytes(m)).equals(m)
