"""Attention blocks against independent per-position oracles."""

import numpy as np
import pytest

from axial_lob.attention import (
    AxialAttentionConfig,
    GatedAxialLayer,
    axial_pair,
    full_attention_2d,
    gated_axial_attention,
    multi_head_combine,
)
from axial_lob.errors import ConfigError
from axial_lob.tensor import Parameter, Tensor, backward, concat, matmul, reshape, transpose
from conftest import assert_grads_match
from oracles import naive_full_attention_2d, naive_gated_axial


def make_layer(axis, c_in, c_out, heads, span, seed=0, dtype=np.float64):
    cfg = AxialAttentionConfig(axis, c_in, c_out, heads, span)
    rng = np.random.default_rng(seed)
    return GatedAxialLayer(cfg, rng, prefix=f"{axis}_attn.", dtype=dtype)


def layer_reference(layer, x_nchw):
    """Run the naive oracle over the same slices the layer attends to."""
    cfg = layer.cfg
    n, c, h, w = x_nchw.shape
    if cfg.axis == "width":
        rows = np.transpose(x_nchw, (0, 2, 3, 1)).reshape(n * h, w, c)
    else:
        rows = np.transpose(x_nchw, (0, 3, 2, 1)).reshape(n * w, h, c)
    heads_out = naive_gated_axial(
        rows,
        layer.w_q.data, layer.w_k.data, layer.w_v.data,
        layer.r_q.data.astype(np.float64),
        layer.r_k.data.astype(np.float64),
        layer.r_v.data.astype(np.float64),
        float(layer.g_q.data), float(layer.g_k.data), float(layer.g_v.data),
    )  # [B, heads, L, d]
    b_n, n_heads, length, d = heads_out.shape
    merged = np.transpose(heads_out, (0, 2, 1, 3)).reshape(b_n, length, n_heads * d)
    merged = merged @ layer.w_o.data
    if cfg.axis == "width":
        out = merged.reshape(n, h, w, cfg.channels_out).transpose(0, 3, 1, 2)
    else:
        out = merged.reshape(n, w, h, cfg.channels_out).transpose(0, 3, 2, 1)
    return out


class TestConfig:
    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError, match="divisible"):
            AxialAttentionConfig("width", 16, 16, 3, 8)

    def test_axis_name_checked(self):
        with pytest.raises(ConfigError):
            AxialAttentionConfig("diagonal", 8, 8, 2, 8)

    def test_span_mismatch_raises(self, rng):
        layer = make_layer("width", 4, 4, 2, span=6)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)), dtype=np.float64)
        with pytest.raises(ConfigError, match="span"):
            layer(x)


class TestGatedAxialOracle:
    @pytest.mark.parametrize("axis", ["width", "height"])
    def test_matches_naive_small(self, axis, rng):
        c, h, w = 4, 6, 6
        span = w if axis == "width" else h
        layer = make_layer(axis, c, c, 2, span, seed=3)
        x = rng.standard_normal((2, c, h, w))
        got = layer(Tensor(x, dtype=np.float64)).data
        want = layer_reference(layer, x)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_many_random_instances(self):
        master = np.random.default_rng(2024)
        for trial in range(50):
            length = int(master.integers(1, 9))
            heads = int(master.integers(1, 5))
            d = int(master.integers(1, 4))
            c = heads * d
            axis = "width" if master.integers(2) else "height"
            h = length if axis == "height" else int(master.integers(1, 5))
            w = length if axis == "width" else int(master.integers(1, 5))
            layer = make_layer(axis, c, c, heads, length, seed=trial)
            x = master.standard_normal((1, c, h, w)).astype(np.float32)
            got = layer_reference(layer, x.astype(np.float64))
            out = GatedAxialLayer(layer.cfg, np.random.default_rng(trial),
                                  prefix="f32.", dtype=np.float32)
            out_val = out(Tensor(x, dtype=np.float32)).data
            # same seed, float32 parameters; compare against float64 oracle
            np.testing.assert_allclose(out_val, got, atol=1e-5, rtol=1e-4)

    def test_zero_gates_drop_positional_terms(self, rng):
        layer = make_layer("width", 4, 4, 2, span=5, seed=1)
        for g in layer.gates():
            g.tensor.data[...] = 0.0
        x = rng.standard_normal((2, 4, 3, 5))
        got = layer(Tensor(x, dtype=np.float64)).data
        bare = layer_reference(layer, x)  # oracle honors the zero gates
        np.testing.assert_allclose(got, bare, atol=1e-10)
        # against a from-scratch content-only attention (no r terms at all)
        zeroed = make_layer("width", 4, 4, 2, span=5, seed=1)
        for table in (zeroed.r_q, zeroed.r_k, zeroed.r_v):
            table.tensor.data[...] = 0.0
        np.testing.assert_allclose(got, layer_reference(zeroed, x), atol=1e-6)

    def test_span_one_returns_value_plus_positional(self, rng):
        layer = make_layer("width", 3, 3, 1, span=1, seed=2)
        layer.w_o.tensor.data[...] = np.eye(3)
        x = rng.standard_normal((2, 3, 4, 1))
        out = layer(Tensor(x, dtype=np.float64)).data
        rows = np.transpose(x, (0, 2, 3, 1)).reshape(8, 1, 3)
        v = rows[:, 0, :] @ layer.w_v.data
        want = v + float(layer.g_v.data) * layer.r_v.data[0, 0]
        got = out.transpose(0, 2, 3, 1).reshape(8, 3)
        np.testing.assert_array_equal(got, want)

    def test_axis_locality_width(self, rng):
        layer = make_layer("width", 2, 2, 1, span=6, seed=4)
        x = rng.standard_normal((1, 2, 5, 6))
        base = layer(Tensor(x, dtype=np.float64)).data
        bumped = x.copy()
        bumped[0, 0, 3, 2] += 1.0
        out = layer(Tensor(bumped, dtype=np.float64)).data
        changed_rows = np.unique(np.argwhere(np.abs(out - base) > 1e-12)[:, 2])
        np.testing.assert_array_equal(changed_rows, [3])

    def test_axis_locality_height(self, rng):
        layer = make_layer("height", 2, 2, 1, span=5, seed=4)
        x = rng.standard_normal((1, 2, 5, 6))
        base = layer(Tensor(x, dtype=np.float64)).data
        bumped = x.copy()
        bumped[0, 0, 1, 4] += 1.0
        out = layer(Tensor(bumped, dtype=np.float64)).data
        changed_cols = np.unique(np.argwhere(np.abs(out - base) > 1e-12)[:, 3])
        np.testing.assert_array_equal(changed_cols, [4])

    def test_softmax_rows_sum_to_one_inside_kernel(self, rng):
        from axial_lob import kernels

        q = rng.standard_normal((3, 2, 7, 4))
        attn, _ = kernels.axial_attention_forward(
            q, q, q,
            rng.standard_normal((2, 13, 4)),
            rng.standard_normal((2, 13, 4)),
            rng.standard_normal((2, 13, 4)),
            1.0, 1.0, 1.0,
        )
        np.testing.assert_allclose(attn.sum(axis=-1), np.ones((3, 2, 7)), atol=1e-6)

    def test_gradients_through_layer(self, rng):
        layer = make_layer("width", 3, 3, 1, span=4, seed=5)
        x = Tensor(rng.standard_normal((2, 3, 2, 4)), requires_grad=True, dtype=np.float64)
        w = rng.standard_normal((2, 3, 2, 4))
        tensors = [x] + [p.tensor for p in layer.params()]

        def loss_fn():
            return float((layer(x.detach()).data * w).sum())

        def run_backward():
            for p in layer.params():
                p.zero_grad()
            backward((layer(x) * Tensor(w, dtype=np.float64)).sum())

        assert_grads_match(loss_fn, tensors, run_backward, rng, samples_per_tensor=4)


class TestFullAttention2d:
    def test_single_position_equals_value_projection(self, rng):
        c = 3
        wq = Tensor(rng.standard_normal((c, c)), dtype=np.float64)
        wk = Tensor(rng.standard_normal((c, c)), dtype=np.float64)
        wv = Tensor(rng.standard_normal((c, c)), dtype=np.float64)
        x = rng.standard_normal((c, 1, 1))
        out = full_attention_2d(Tensor(x, dtype=np.float64), wq, wk, wv)
        want = (x.reshape(1, c) @ wv.data).reshape(c, 1, 1)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_zero_query_gives_uniform_pooling(self, rng):
        c = 2
        wq = Tensor(np.zeros((c, c)), dtype=np.float64)
        wk = Tensor(rng.standard_normal((c, c)), dtype=np.float64)
        wv = Tensor(rng.standard_normal((c, c)), dtype=np.float64)
        x = rng.standard_normal((c, 3, 4))
        out = full_attention_2d(Tensor(x, dtype=np.float64), wq, wk, wv)
        flat_v = x.reshape(c, -1).T @ wv.data
        want = np.tile(flat_v.mean(axis=0)[:, None, None], (1, 3, 4))
        np.testing.assert_allclose(out.data, want, atol=1e-10)

    def test_matches_naive_loop_oracle(self, rng):
        c = 2
        wq = rng.standard_normal((c, 4))
        wk = rng.standard_normal((c, 4))
        wv = rng.standard_normal((c, 4))
        x = rng.standard_normal((c, 3, 3))
        out = full_attention_2d(
            Tensor(x, dtype=np.float64),
            Tensor(wq, dtype=np.float64),
            Tensor(wk, dtype=np.float64),
            Tensor(wv, dtype=np.float64),
            heads=2,
        )
        want = naive_full_attention_2d(x, wq, wk, wv, heads=2)
        np.testing.assert_allclose(out.data, want, atol=1e-6)


class TestMultiHeadCombine:
    def test_identity_projection_single_head(self, rng):
        head = Tensor(rng.standard_normal((3, 2, 2)), dtype=np.float64)
        w_o = Tensor(np.eye(3), dtype=np.float64)
        out = multi_head_combine([head], w_o)
        np.testing.assert_allclose(out.data, head.data, atol=1e-12)

    def test_concatenates_channels(self, rng):
        h1 = Tensor(rng.standard_normal((2, 3, 3)), dtype=np.float64)
        h2 = Tensor(rng.standard_normal((2, 3, 3)), dtype=np.float64)
        w_o = Tensor(np.eye(4), dtype=np.float64)
        out = multi_head_combine([h1, h2], w_o)
        assert out.shape == (4, 3, 3)
        np.testing.assert_allclose(out.data[:2], h1.data, atol=1e-12)
        np.testing.assert_allclose(out.data[2:], h2.data, atol=1e-12)

    def test_equals_manual_concat_then_matmul(self, rng):
        heads = [Tensor(rng.standard_normal((2, 3, 4)), dtype=np.float64) for _ in range(3)]
        w_o = Tensor(rng.standard_normal((6, 5)), dtype=np.float64)
        got = multi_head_combine(heads, w_o)
        stacked = concat(heads, axis=0)
        manual = matmul(reshape(transpose(stacked, (1, 2, 0)), (12, 6)), w_o)
        want = transpose(reshape(manual, (3, 4, 5)), (2, 0, 1))
        np.testing.assert_allclose(got.data, want.data, atol=1e-6)


class TestAxialPair:
    def test_width_then_height_order(self, rng):
        width = make_layer("width", 2, 2, 1, span=4, seed=6)
        height = make_layer("height", 2, 2, 1, span=3, seed=7)
        x = Tensor(rng.standard_normal((1, 2, 3, 4)), requires_grad=True, dtype=np.float64)
        out = axial_pair(x, width, height)
        # walk the recorded graph; the width core must execute first
        seq_by_op = {}
        stack = [out.node]
        seen = set()
        while stack:
            node = stack.pop()
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            if node.op.startswith("gated_axial_core["):
                seq_by_op[node.op] = node.seq
            stack.extend(p.node for p in node.parents if p.node is not None)
        assert seq_by_op["gated_axial_core[width_attn]"] < seq_by_op["gated_axial_core[height_attn]"]

    def test_global_receptive_field(self, rng):
        width = make_layer("width", 2, 2, 1, span=5, seed=8)
        height = make_layer("height", 2, 2, 1, span=4, seed=9)
        x = Tensor(rng.standard_normal((1, 2, 4, 5)), requires_grad=True, dtype=np.float64)
        out = axial_pair(x, width, height)
        backward(out.reshape(2, 4, 5)[..., 0, 0].sum() if False else
                 (out * Tensor(_corner_mask((1, 2, 4, 5)), dtype=np.float64)).sum())
        corner_grad = x.grad[0, :, -1, -1]
        assert np.abs(corner_grad).max() > 0.0

    def test_output_shape_preserved(self, rng):
        width = make_layer("width", 3, 3, 1, span=6, seed=10)
        height = make_layer("height", 3, 3, 1, span=5, seed=11)
        x = Tensor(rng.standard_normal((2, 3, 5, 6)), dtype=np.float64)
        assert axial_pair(x, width, height).shape == (2, 3, 5, 6)

    def test_uniform_pooling_with_zero_gates_and_queries(self, rng):
        # zero gates and zero W_Q/W_K: logits vanish, attention averages v
        layer = make_layer("width", 2, 2, 1, span=6, seed=12)
        for g in layer.gates():
            g.tensor.data[...] = 0.0
        layer.w_q.tensor.data[...] = 0.0
        layer.w_k.tensor.data[...] = 0.0
        layer.w_o.tensor.data[...] = np.eye(2)
        x = rng.standard_normal((1, 2, 3, 6))
        out = layer(Tensor(x, dtype=np.float64)).data
        rows = np.transpose(x, (0, 2, 3, 1)).reshape(3, 6, 2)
        v = rows @ layer.w_v.data
        want = np.tile(v.mean(axis=1, keepdims=True), (1, 6, 1))
        np.testing.assert_allclose(
            out, want.reshape(1, 3, 6, 2).transpose(0, 3, 1, 2), atol=1e-10
        )


def _corner_mask(shape):
    m = np.zeros(shape)
    m[0, :, 0, 0] = 1.0
    return m


def test_gated_axial_attention_wrapper_checks_config(rng):
    layer = make_layer("width", 2, 2, 1, span=4)
    other = AxialAttentionConfig("width", 2, 2, 1, 8)
    x = Tensor(rng.standard_normal((1, 2, 3, 4)), dtype=np.float64)
    with pytest.raises(ConfigError):
        gated_axial_attention(x, layer, other)
    out = gated_axial_attention(x, layer, layer.cfg)
    assert out.shape == (1, 2, 3, 4)
