"""Layer semantics: attention oracle, encoder invariants, Adam, gradients."""

import numpy as np
import pytest

from plugrank import nn
from plugrank.errors import ConfigError, IndexOutOfRangeError, OptimizerError, ShapeError


def cfg(layers=1, heads=2, dim=8, ffn=16, max_len=10):
    return nn.EncoderConfig(num_layers=layers, num_heads=heads, model_dim=dim,
                            ffn_dim=ffn, max_seq_len=max_len)


def healthy(pset, rng):
    for p in pset:
        p.tensor.data = rng.normal(0, 0.5, size=p.tensor.data.shape).astype(p.tensor.data.dtype)


class TestEncoderConfig:
    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError, match="divisible"):
            cfg(heads=3, dim=8)

    def test_deterministic_init_independent_of_order(self):
        p1 = nn.ParamSet()
        nn.Linear(p1, "b", 4, 4, seed=3)
        nn.Linear(p1, "a", 4, 4, seed=3)
        p2 = nn.ParamSet()
        nn.Linear(p2, "a", 4, 4, seed=3)
        nn.Linear(p2, "b", 4, 4, seed=3)
        assert np.array_equal(p1["a/w"].data, p2["a/w"].data)

    def test_duplicate_parameter_name_rejected(self):
        pset = nn.ParamSet()
        nn.Linear(pset, "x", 2, 2, seed=0)
        with pytest.raises(ConfigError, match="duplicate"):
            nn.Linear(pset, "x", 2, 2, seed=0)


class TestEmbeddingLookup:
    def test_zero_table_gives_zeros(self):
        pset = nn.ParamSet()
        emb = nn.Embedding(pset, "t", 10, 4, seed=0)
        emb.param.tensor.data[:] = 0
        out = emb(np.array([3, 7]))
        assert out.shape == (2, 4) and not out.data.any()

    def test_single_row_identity(self):
        pset = nn.ParamSet()
        emb = nn.Embedding(pset, "t", 1, 4, seed=0)
        assert np.array_equal(emb(np.array([0])).data[0], emb.param.data[0])

    def test_repeated_rows_accumulate_gradient(self):
        pset = nn.ParamSet()
        emb = nn.Embedding(pset, "t", 4, 3, seed=0)
        out = emb(np.array([0, 0]))
        upstream = np.stack([np.ones(3), 2 * np.ones(3)])
        out.backward(upstream)
        assert np.allclose(emb.param.grad[0], 3 * np.ones(3))

    def test_out_of_range_names_table_and_index(self):
        pset = nn.ParamSet()
        emb = nn.Embedding(pset, "item_table", 5, 2, seed=0)
        with pytest.raises(IndexOutOfRangeError, match=r"index 9 .* 'item_table'"):
            emb(np.array([1, 9]))


class TestAttention:
    def test_single_token_is_output_of_value_projection(self):
        c = cfg(heads=1, dim=4, max_len=4)
        pset = nn.ParamSet()
        att = nn.MultiHeadAttention(pset, "a", c, seed=1)
        x = np.random.default_rng(0).normal(size=(1, 4)).astype(np.float32)
        out = att(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x), mask=np.array([True]))
        v = x @ pset["a/wv/w"].data + pset["a/wv/b"].data
        expected = v @ pset["a/wo/w"].data + pset["a/wo/b"].data
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_identical_tokens_uniform_weights(self):
        # with identical tokens, output equals the single-token output at each position
        c = cfg(heads=2, dim=8, max_len=8)
        pset = nn.ParamSet()
        att = nn.MultiHeadAttention(pset, "a", c, seed=2)
        token = np.random.default_rng(1).normal(size=8).astype(np.float32)
        x3 = np.tile(token, (3, 1))
        out3 = att(nn.Tensor(x3), nn.Tensor(x3), nn.Tensor(x3))
        out1 = att(nn.Tensor(token[None]), nn.Tensor(token[None]), nn.Tensor(token[None]))
        assert np.allclose(out3.data, np.tile(out1.data, (3, 1)), atol=1e-6)

    def test_two_token_hand_oracle(self):
        # independent numpy evaluation of one-head attention on 2 tokens
        c = cfg(heads=1, dim=2, max_len=4)
        pset = nn.ParamSet()
        att = nn.MultiHeadAttention(pset, "a", c, seed=3)
        rng = np.random.default_rng(7)
        wq, wk, wv, wo = (rng.normal(size=(2, 2)).astype(np.float32) for _ in range(4))
        bq, bv, bo = (rng.normal(size=2).astype(np.float32) for _ in range(3))
        pset["a/wq/w"].data, pset["a/wq/b"].data = wq, bq
        pset["a/wk/w"].data = wk
        pset["a/wv/w"].data, pset["a/wv/b"].data = wv, bv
        pset["a/wo/w"].data, pset["a/wo/b"].data = wo, bo
        x = rng.normal(size=(2, 2)).astype(np.float32)

        q, k, v = x @ wq + bq, x @ wk, x @ wv + bv
        scores = q @ k.T / np.sqrt(2.0)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        expected = (p @ v) @ wo + bo

        out = att(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x))
        assert np.allclose(out.data, expected, atol=1e-5)

    def test_masked_keys_get_zero_weight(self):
        c = cfg(heads=2, dim=8, max_len=8)
        pset = nn.ParamSet()
        att = nn.MultiHeadAttention(pset, "a", c, seed=4)
        rng = np.random.default_rng(2)
        healthy(pset, rng)
        x = rng.normal(size=(1, 3, 8)).astype(np.float32)
        mask = np.array([[True, True, False]])
        out = att(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x), mask=mask)
        # perturbing the masked key must not change unmasked outputs
        x2 = x.copy()
        x2[0, 2] += 10.0
        out2 = att(nn.Tensor(x2), nn.Tensor(x2), nn.Tensor(x2), mask=mask)
        assert np.allclose(out.data[0, :2], out2.data[0, :2], atol=1e-6)

    def test_shape_mismatch_reports_expected_and_actual(self):
        c = cfg()
        pset = nn.ParamSet()
        att = nn.MultiHeadAttention(pset, "a", c, seed=0)
        q = nn.Tensor(np.zeros((1, 3, 8), dtype=np.float32))
        k = nn.Tensor(np.zeros((1, 4, 8), dtype=np.float32))
        with pytest.raises(ShapeError, match="expected"):
            att(q, k, k)

    def test_sequence_longer_than_max_rejected(self):
        c = cfg(max_len=2)
        pset = nn.ParamSet()
        att = nn.MultiHeadAttention(pset, "a", c, seed=0)
        x = nn.Tensor(np.zeros((3, 8), dtype=np.float32))
        with pytest.raises(ShapeError, match="max_seq_len"):
            att(x, x, x)


class TestTransformerEncoder:
    def test_zero_layers_identity(self):
        pset = nn.ParamSet()
        enc = nn.TransformerEncoder(pset, "e", cfg(layers=0), seed=0)
        x = np.random.default_rng(0).normal(size=(2, 3, 8)).astype(np.float32)
        assert np.array_equal(enc(nn.Tensor(x)).data, x)

    def test_padding_does_not_disturb_real_positions(self):
        pset = nn.ParamSet()
        enc = nn.TransformerEncoder(pset, "e", cfg(layers=2), seed=5)
        rng = np.random.default_rng(3)
        healthy(pset, rng)
        x = rng.normal(size=(1, 4, 8)).astype(np.float32)
        out_plain = enc(nn.Tensor(x), np.ones((1, 4), bool))
        padded = np.concatenate([x, rng.normal(size=(1, 3, 8)).astype(np.float32)], axis=1)
        mask = np.array([[True] * 4 + [False] * 3])
        out_padded = enc(nn.Tensor(padded), mask)
        assert np.abs(out_padded.data[0, :4] - out_plain.data[0]).max() <= 1e-6

    def test_layer_norm_unit_stats_before_scale_shift(self):
        pset = nn.ParamSet()
        ln = nn.LayerNorm(pset, "ln", 16)  # fresh gamma=1, beta=0
        x = np.random.default_rng(4).normal(2.0, 3.0, size=(5, 16)).astype(np.float64)
        out = ln(nn.Tensor(x)).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-5
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4

    def test_zeroed_residual_branches_reduce_to_layer_norm_chain(self):
        pset = nn.ParamSet()
        enc = nn.TransformerEncoder(pset, "e", cfg(layers=2), seed=6)
        for p in pset:
            if p.name.endswith(("wo/w", "wo/b", "fc2/w", "fc2/b")):
                p.tensor.data[:] = 0
        x = np.random.default_rng(5).normal(size=(1, 3, 8)).astype(np.float32)

        def ln_ref(v, gamma, beta):
            mu = v.mean(-1, keepdims=True)
            var = ((v - mu) ** 2).mean(-1, keepdims=True)
            return (v - mu) / np.sqrt(var + 1e-5) * gamma + beta

        ref = x.copy()
        for layer in range(2):
            ref = ln_ref(ref, pset[f"e/layer{layer}/ln1/gamma"].data, pset[f"e/layer{layer}/ln1/beta"].data)
            ref = ln_ref(ref, pset[f"e/layer{layer}/ln2/gamma"].data, pset[f"e/layer{layer}/ln2/beta"].data)
        out = enc(nn.Tensor(x), np.ones((1, 3), bool))
        assert np.abs(out.data - ref).max() <= 1e-6


class TestMaskedMean:
    def test_single_position(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 4)).astype(np.float32)
        out = nn.masked_mean(nn.Tensor(x), np.array([[True]]))
        assert np.allclose(out.data[0], x[0, 0])

    def test_identical_vectors(self):
        v = np.random.default_rng(1).normal(size=4).astype(np.float32)
        x = np.tile(v, (1, 5, 1))
        out = nn.masked_mean(nn.Tensor(x), np.ones((1, 5), bool))
        assert np.allclose(out.data[0], v, atol=1e-6)

    def test_masked_positions_excluded(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 4)).astype(np.float32)
        mask = np.array([[True, True, False]])
        out = nn.masked_mean(nn.Tensor(x), mask)
        assert np.allclose(out.data[0], x[0, :2].mean(axis=0), atol=1e-6)

    def test_fully_masked_rejected(self):
        with pytest.raises(ShapeError, match="fully masked"):
            nn.masked_mean(nn.Tensor(np.zeros((1, 2, 3), dtype=np.float32)),
                           np.array([[False, False]]))


class TestAdam:
    def _param(self, name="p", value=1.0, trainable=True):
        p = nn.Parameter(name, np.full(4, value, dtype=np.float32), trainable=trainable)
        return p

    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = self._param()
        p.tensor.grad = np.zeros(4, dtype=np.float32)
        before = p.data.copy()
        nn.Adam([p]).step(lr=0.1)
        assert np.array_equal(p.data, before)

    def test_first_step_is_signed_unit_times_lr(self):
        p = self._param()
        g = np.array([0.01, -0.02, 0.5, -1.0], dtype=np.float32)
        p.tensor.grad = g
        nn.Adam([p], eps=1e-8).step(lr=0.05)
        update = p.data - 1.0
        assert np.abs(update + 0.05 * np.sign(g)).max() <= 1e-3 * 0.05

    def test_frozen_parameter_untouched(self):
        p = self._param(trainable=False)
        p.tensor.grad = np.ones(4, dtype=np.float32)
        before = p.data.copy()
        nn.Adam([p]).step(lr=0.1)
        assert np.array_equal(p.data, before)

    def test_missing_gradient_names_parameter(self):
        p = self._param(name="tower/w")
        with pytest.raises(OptimizerError, match="tower/w"):
            nn.Adam([p]).step(lr=0.1)

    def test_state_persists_across_steps(self):
        p = self._param()
        opt = nn.Adam([p])
        for _ in range(3):
            p.tensor.grad = np.ones(4, dtype=np.float32)
            opt.step(lr=0.01)
        assert opt._t[p.name] == 3


LAYER_BUILDERS = {
    "linear": lambda pset, seed: (nn.Linear(pset, "l", 6, 4, seed=seed), (2, 6)),
    "layer_norm": lambda pset, seed: (nn.LayerNorm(pset, "ln", 6), (3, 6)),
    "mlp": lambda pset, seed: (nn.MLP(pset, "m", [6, 8, 3], seed=seed), (2, 6)),
}


class TestLayerGradients:
    """Every layer type: analytic vs finite-difference gradients, 10 seeds.

    Coordinates whose analytic gradient sits below the finite-difference
    noise floor are excluded via magnitude-floor sampling; the reference
    cannot resolve them in either precision.
    """

    @pytest.mark.parametrize("kind", list(LAYER_BUILDERS))
    def test_double_precision_tight(self, kind):
        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            with nn.use_dtype(np.float64):
                pset = nn.ParamSet()
                layer, in_shape = LAYER_BUILDERS[kind](pset, seed)
                for p in pset:
                    p.tensor.data = rng.normal(0, 0.5, size=p.tensor.data.shape)
                x = nn.Tensor(rng.normal(size=in_shape))
                w = nn.Tensor(rng.normal(size=1))

                def loss_fn():
                    return (layer(x) * layer(x)).mean() * w

                err = nn.grad_check_params(loss_fn, list(pset), h=1e-5,
                                           n_coords=64, magnitude_floor=1e-3)
            worst = max(worst, err)
        assert worst <= 1e-6, f"{kind}: {worst}"

    @pytest.mark.parametrize("kind", ["attention", "encoder"])
    def test_encoder_layers_both_precisions(self, kind):
        for dtype, tol in ((np.float32, 1e-3), (np.float64, 1e-6)):
            worst = 0.0
            for seed in range(10):
                rng = np.random.default_rng(200 + seed)
                with nn.use_dtype(dtype):
                    pset = nn.ParamSet()
                    c = cfg(layers=1)
                    if kind == "attention":
                        layer = nn.MultiHeadAttention(pset, "a", c, seed=seed)
                    else:
                        layer = nn.TransformerEncoder(pset, "e", c, seed=seed)
                    for p in pset:
                        p.tensor.data = rng.normal(0, 0.5, size=p.tensor.data.shape).astype(dtype)
                    x = nn.Tensor(rng.normal(size=(2, 3, 8)).astype(dtype))
                    mask = np.array([[True, True, False], [True, True, True]])

                    def loss_fn():
                        if kind == "attention":
                            out = layer(x, x, x, mask)
                        else:
                            out = layer(x, mask)
                        return (out * out).mean()

                    err = nn.grad_check_params(loss_fn, list(pset), h=1e-4 if dtype == np.float32 else 1e-5,
                                               n_coords=48, magnitude_floor=1e-3)
                worst = max(worst, err)
            assert worst <= tol, f"{kind} {dtype}: {worst}"
