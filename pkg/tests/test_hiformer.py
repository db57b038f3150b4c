"""Composite-projection attention layer: oracles and reduction equivalences."""

import numpy as np
import numpy.testing as npt
import pytest

import hhft.autodiff as ad
import hhft.encoder as enc
import hhft.hiformer as hf
from hhft.autodiff import Tape, grad_check
from hhft.errors import ConfigError
from conftest import (
    hiformer_layer_tensors,
    make_encoder_block,
    make_hiformer_layer,
    tensor,
)


def rand_tokens(rng, batch, num_tokens, d, grad=False):
    return tensor(rng.uniform(-1, 1, (batch, num_tokens, d)), grad=grad)


def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


class TestCompositeProject:
    def test_block_diagonal_reduces_to_per_token(self):
        rng = np.random.default_rng(0)
        per_token = rng.uniform(-1, 1, (3, 2))
        w_hat = tensor(hf.block_diagonal_composite(per_token, 4))
        h = rand_tokens(rng, 2, 4, 3)
        out = hf.composite_project(h, w_hat)
        expected = h.data @ per_token
        npt.assert_allclose(out.data, expected, atol=1e-12)

    def test_zero_projection(self):
        rng = np.random.default_rng(1)
        h = rand_tokens(rng, 2, 3, 4)
        out = hf.composite_project(h, tensor(np.zeros((12, 6))))
        npt.assert_array_equal(out.data, np.zeros((2, 3, 2)))

    def test_flatten_multiply_split_by_hand(self):
        rng = np.random.default_rng(2)
        w_hat = rng.uniform(-1, 1, (4, 2))  # K=2, d=2, d_h=1
        h = rand_tokens(rng, 3, 2, 2)
        out = hf.composite_project(h, tensor(w_hat))
        flat = h.data.reshape(3, 4)
        expected = (flat @ w_hat).reshape(3, 2, 1)
        npt.assert_allclose(out.data, expected, rtol=1e-14)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(3)
        h = rand_tokens(rng, 1, 3, 4)
        with pytest.raises(ConfigError, match="composite"):
            hf.composite_project(h, tensor(np.zeros((11, 6))))

    def test_dense_projection_mixes_tokens(self):
        """With dense w_hat, slice k of the output depends on every token."""
        rng = np.random.default_rng(4)
        w_hat = tensor(rng.uniform(-1, 1, (6, 4)))
        h = rand_tokens(rng, 1, 2, 3, grad=True)
        with Tape() as tape:
            out = hf.composite_project(h, w_hat)
            loss = ad.sum_axis(ad.slice_axis(out, 1, 0, 1))  # slice for token 0
        grad = tape.gradient(loss, [h])[0].data
        assert np.abs(grad[0, 1]).max() > 0  # token 1 influences token 0's keys

    def test_block_diagonal_does_not_mix_tokens(self):
        rng = np.random.default_rng(5)
        per_token = rng.uniform(-1, 1, (3, 2))
        w_hat = tensor(hf.block_diagonal_composite(per_token, 2))
        h = rand_tokens(rng, 1, 2, 3, grad=True)
        with Tape() as tape:
            out = hf.composite_project(h, w_hat)
            loss = ad.sum_axis(ad.slice_axis(out, 1, 0, 1))
        grad = tape.gradient(loss, [h])[0].data
        npt.assert_array_equal(grad[0, 1], np.zeros(3))


class TestHiformerAttention:
    def test_zero_weights_is_identity(self):
        rng = np.random.default_rng(6)
        params = make_hiformer_layer(rng, 3, 4, 2, 2, 4, zero=True)
        h = rand_tokens(rng, 2, 3, 4)
        out = hf.hiformer_attention(h, params, hf.HiformerConfig(1, 2, 2))
        npt.assert_array_equal(out.data, h.data)

    def test_brute_force_pipeline(self):
        """K=2, d=2, d_h=1, one head, scripted step-by-step computation."""
        rng = np.random.default_rng(7)
        params = make_hiformer_layer(rng, 2, 2, 1, 1, 3)
        h = rand_tokens(rng, 1, 2, 2)
        out = hf.hiformer_attention(h, params, hf.HiformerConfig(1, 1, 1))

        x = h.data[0]
        normed = np.stack([
            np_ln(x[k], params.ln1[k].gain.data, params.ln1[k].bias.data)
            for k in range(2)
        ])
        q = np.stack([normed[k] @ params.w_q[0][k].data for k in range(2)])
        flat = normed.reshape(-1)
        k_hat = (flat @ params.w_k_hat[0].data).reshape(2, 1)
        v_hat = (flat @ params.w_v_hat[0].data).reshape(2, 1)
        scores = q @ k_hat.T / np.sqrt(1.0)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        probs = e / e.sum(axis=-1, keepdims=True)
        mixed = probs @ v_hat
        attn = np.stack([mixed[k] @ params.w_o[k].data for k in range(2)])
        mid = x + attn
        normed2 = np.stack([
            np_ln(mid[k], params.ln2[k].gain.data, params.ln2[k].bias.data)
            for k in range(2)
        ])
        ffn = np.stack([
            np.maximum(normed2[k] @ params.ffn[k].w1.data + params.ffn[k].b1.data, 0)
            @ params.ffn[k].w2.data + params.ffn[k].b2.data
            for k in range(2)
        ])
        expected = mid + ffn
        npt.assert_allclose(out.data[0], expected, rtol=1e-12)

    def test_reduces_to_shared_encoder_layer(self):
        """Block-diagonal composites + tied queries reproduce the shared layer."""
        rng = np.random.default_rng(8)
        d, num_tokens, n_h = 4, 3, 2
        d_h = d // n_h
        shared = make_encoder_block(rng, d, 6)
        params = make_hiformer_layer(rng, num_tokens, d, d_h, n_h, 6)
        for head in range(n_h):
            sl = slice(head * d_h, (head + 1) * d_h)
            for k in range(num_tokens):
                params.w_q[head][k] = tensor(shared.w_q.data[:, sl].copy())
            params.w_k_hat[head] = tensor(
                hf.block_diagonal_composite(shared.w_k.data[:, sl], num_tokens)
            )
            params.w_v_hat[head] = tensor(
                hf.block_diagonal_composite(shared.w_v.data[:, sl], num_tokens)
            )
        for k in range(num_tokens):
            params.w_o[k] = tensor(shared.w_o.data.copy())
            params.ffn[k] = enc.FfnParams(
                w1=tensor(shared.ffn.w1.data.copy()),
                b1=tensor(shared.ffn.b1.data.copy()),
                w2=tensor(shared.ffn.w2.data.copy()),
                b2=tensor(shared.ffn.b2.data.copy()),
            )
            params.ln1[k] = enc.NormParams(
                gain=tensor(shared.ln1.gain.data.copy()),
                bias=tensor(shared.ln1.bias.data.copy()),
            )
            params.ln2[k] = enc.NormParams(
                gain=tensor(shared.ln2.gain.data.copy()),
                bias=tensor(shared.ln2.bias.data.copy()),
            )
        h = rand_tokens(rng, 2, num_tokens, d)
        config = enc.EncoderConfig(1, d, 6, n_h)
        reduced = hf.hiformer_attention(h, params, hf.HiformerConfig(1, d_h, n_h))
        reference = enc.shared_encoder_layer(h, shared, config)
        assert np.abs(reduced.data - reference.data).max() <= 1e-12

    def test_attention_rows_normalized(self):
        rng = np.random.default_rng(9)
        params = make_hiformer_layer(rng, 4, 6, 3, 2, 6)
        h = rand_tokens(rng, 3, 4, 6)
        capture = {}
        hf.hiformer_attention(h, params, hf.HiformerConfig(1, 3, 2), capture)
        assert len(capture["attention_weights"]) == 2
        for w in capture["attention_weights"]:
            npt.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
            assert (w >= 0).all() and (w <= 1).all()

    def test_gradient_check(self):
        rng = np.random.default_rng(10)
        params = make_hiformer_layer(rng, 3, 4, 2, 2, 5)
        h = rand_tokens(rng, 2, 3, 4)
        c = tensor(rng.uniform(-1, 1, (2, 3, 4)), grad=False)

        def f():
            out = hf.hiformer_attention(h, params, hf.HiformerConfig(1, 2, 2))
            return ad.sum_axis(ad.mul(out, c))

        rep = grad_check(f, hiformer_layer_tensors(params), tol=1e-4)
        assert rep.passed, str(rep)

    def test_post_norm_variant(self):
        rng = np.random.default_rng(11)
        params = make_hiformer_layer(rng, 2, 4, 2, 2, 4)
        h = rand_tokens(rng, 2, 2, 4)
        pre = hf.hiformer_attention(h, params, hf.HiformerConfig(1, 2, 2))
        post = hf.hiformer_attention(
            h, params, hf.HiformerConfig(1, 2, 2), norm_placement="post"
        )
        assert pre.shape == post.shape
        assert np.abs(pre.data - post.data).max() > 1e-8


class TestHiformerForward:
    def test_zero_layers_identity(self):
        rng = np.random.default_rng(12)
        h = rand_tokens(rng, 2, 3, 4)
        out = hf.hiformer_forward(h, [], hf.HiformerConfig(0, 2, 2))
        assert out is h

    def test_single_layer_equals_attention_call(self):
        rng = np.random.default_rng(13)
        params = make_hiformer_layer(rng, 2, 4, 2, 2, 4)
        h = rand_tokens(rng, 2, 2, 4)
        config = hf.HiformerConfig(1, 2, 2)
        npt.assert_array_equal(
            hf.hiformer_forward(h, [params], config).data,
            hf.hiformer_attention(h, params, config).data,
        )

    def test_double_application(self):
        rng = np.random.default_rng(14)
        layers = [make_hiformer_layer(rng, 2, 4, 2, 2, 4) for _ in range(2)]
        h = rand_tokens(rng, 2, 2, 4)
        config = hf.HiformerConfig(2, 2, 2)
        manual = hf.hiformer_attention(
            hf.hiformer_attention(h, layers[0], config), layers[1], config
        )
        out = hf.hiformer_forward(h, layers, config)
        npt.assert_array_equal(out.data, manual.data)

    def test_composes_with_encoder_layers(self):
        """Shape contract: hiformer and encoder layers stack in any order."""
        rng = np.random.default_rng(15)
        enc_blocks = [make_encoder_block(rng, 4, 4) for _ in range(3)]
        hif = make_hiformer_layer(rng, 3, 4, 2, 2, 4)
        h = rand_tokens(rng, 2, 3, 4)
        config = enc.EncoderConfig(1, 4, 4, 2)
        out = enc.encoder_layer(h, enc_blocks, config)
        out = hf.hiformer_attention(out, hif, hf.HiformerConfig(1, 2, 2))
        out = enc.encoder_layer(out, enc_blocks, config)
        assert out.shape == (2, 3, 4)
