"""Shared parameter builders for layer and model tests."""

import numpy as np

from hhft.autodiff import Tensor
from hhft.encoder import EncoderBlockParams, EncoderConfig, FfnParams, NormParams
from hhft.hiformer import HiformerConfig, HiformerLayerParams


def tensor(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), grad_enabled=grad)


def make_encoder_block(rng, d, d_ffn, zero=False, scale=0.5):
    def mat(*shape):
        if zero:
            return tensor(np.zeros(shape))
        return tensor(rng.uniform(-scale, scale, shape))

    return EncoderBlockParams(
        w_q=mat(d, d),
        w_k=mat(d, d),
        w_v=mat(d, d),
        w_o=mat(d, d),
        ffn=FfnParams(w1=mat(d, d_ffn), b1=mat(d_ffn), w2=mat(d_ffn, d), b2=mat(d)),
        ln1=NormParams(gain=tensor(np.ones(d)), bias=tensor(np.zeros(d))),
        ln2=NormParams(gain=tensor(np.ones(d)), bias=tensor(np.zeros(d))),
    )


def make_encoder_layer(rng, num_blocks, d, d_ffn, zero=False):
    return [make_encoder_block(rng, d, d_ffn, zero=zero) for _ in range(num_blocks)]


def encoder_block_tensors(p):
    return [
        p.w_q, p.w_k, p.w_v, p.w_o,
        p.ffn.w1, p.ffn.b1, p.ffn.w2, p.ffn.b2,
        p.ln1.gain, p.ln1.bias, p.ln2.gain, p.ln2.bias,
    ]


def tie_encoder_blocks(shared, num_blocks):
    """Per-block parameter list where every block holds copies of one set."""

    def clone(t):
        return tensor(t.data.copy())

    out = []
    for _ in range(num_blocks):
        out.append(
            EncoderBlockParams(
                w_q=clone(shared.w_q),
                w_k=clone(shared.w_k),
                w_v=clone(shared.w_v),
                w_o=clone(shared.w_o),
                ffn=FfnParams(
                    w1=clone(shared.ffn.w1),
                    b1=clone(shared.ffn.b1),
                    w2=clone(shared.ffn.w2),
                    b2=clone(shared.ffn.b2),
                ),
                ln1=NormParams(gain=clone(shared.ln1.gain), bias=clone(shared.ln1.bias)),
                ln2=NormParams(gain=clone(shared.ln2.gain), bias=clone(shared.ln2.bias)),
            )
        )
    return out


def make_hiformer_layer(rng, num_blocks, d, d_h, n_h, d_ffn, zero=False, scale=0.5):
    def mat(*shape):
        if zero:
            return tensor(np.zeros(shape))
        return tensor(rng.uniform(-scale, scale, shape))

    return HiformerLayerParams(
        w_q=[[mat(d, d_h) for _ in range(num_blocks)] for _ in range(n_h)],
        w_k_hat=[mat(num_blocks * d, num_blocks * d_h) for _ in range(n_h)],
        w_v_hat=[mat(num_blocks * d, num_blocks * d_h) for _ in range(n_h)],
        w_o=[mat(n_h * d_h, d) for _ in range(num_blocks)],
        ffn=[
            FfnParams(w1=mat(d, d_ffn), b1=mat(d_ffn), w2=mat(d_ffn, d), b2=mat(d))
            for _ in range(num_blocks)
        ],
        ln1=[
            NormParams(gain=tensor(np.ones(d)), bias=tensor(np.zeros(d)))
            for _ in range(num_blocks)
        ],
        ln2=[
            NormParams(gain=tensor(np.ones(d)), bias=tensor(np.zeros(d)))
            for _ in range(num_blocks)
        ],
    )


def hiformer_layer_tensors(p):
    out = []
    for per_token in p.w_q:
        out.extend(per_token)
    out.extend(p.w_k_hat)
    out.extend(p.w_v_hat)
    out.extend(p.w_o)
    for f in p.ffn:
        out.extend([f.w1, f.b1, f.w2, f.b2])
    for n in p.ln1 + p.ln2:
        out.extend([n.gain, n.bias])
    return out


__all__ = [
    "tensor",
    "make_encoder_block",
    "make_encoder_layer",
    "encoder_block_tensors",
    "tie_encoder_blocks",
    "make_hiformer_layer",
    "hiformer_layer_tensors",
    "EncoderConfig",
    "HiformerConfig",
]
