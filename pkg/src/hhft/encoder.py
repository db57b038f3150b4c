"""Heterogeneous transformer encoder over the K block tokens.

Every block owns its QKV projections, output projection, FFN, and norm
parameters; only the attention mixing itself is shared math. A tied-weight
shared variant (one parameter set applied to all tokens) is implemented as
an independent vectorized path and doubles as the reduction oracle for the
heterogeneous one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

PRE_NORM = "pre"
POST_NORM = "post"


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class FfnParams:
    """Two-layer position-wise network: relu(x W1 + b1) W2 + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderBlockParams:
    """One block's slice of one encoder layer."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ffn: FfnParams
    ln1: NormParams
    ln2: NormParams


@dataclass(frozen=True)
class EncoderConfig:
    n1: int
    d: int
    d_ffn: int
    n_heads: int = 4
    norm_placement: str = PRE_NORM

    def validate(self) -> None:
        if self.n1 < 0 or self.d < 1 or self.d_ffn < 1 or self.n_heads < 1:
            raise ConfigError(f"encoder dims must be positive: {self}")
        if self.d % self.n_heads != 0:
            raise ConfigError(
                f"token dim {self.d} not divisible by {self.n_heads} heads"
            )
        if self.norm_placement not in (PRE_NORM, POST_NORM):
            raise ConfigError(f"unknown norm placement {self.norm_placement!r}")


def _split_tokens(h: Tensor) -> list[Tensor]:
    """[B, K, d] -> K tensors of shape [B, d]."""
    batch, num_tokens, width = h.shape
    return [
        ad.reshape(ad.slice_axis(h, 1, k, k + 1), (batch, width))
        for k in range(num_tokens)
    ]


def _join_tokens(parts: list[Tensor]) -> Tensor:
    """K tensors of [B, d] -> [B, K, d]."""
    batch, width = parts[0].shape
    return ad.concat([ad.reshape(p, (batch, 1, width)) for p in parts], axis=1)


def _blockwise_norm(tokens: list[Tensor], norms: list[NormParams]) -> list[Tensor]:
    return [ad.layer_norm(x, n.gain, n.bias) for x, n in zip(tokens, norms)]


def qkv_project(h: Tensor, blocks: list[EncoderBlockParams]) -> tuple[Tensor, Tensor, Tensor]:
    """Per-block Q/K/V: row k of each output comes from block k's matrices only."""
    num_tokens = h.shape[1]
    if len(blocks) != num_tokens:
        raise ConfigError(
            f"got {len(blocks)} block parameter sets for {num_tokens} tokens"
        )
    tokens = _split_tokens(h)
    q = _join_tokens([ad.matmul(x, p.w_q) for x, p in zip(tokens, blocks)])
    k = _join_tokens([ad.matmul(x, p.w_k) for x, p in zip(tokens, blocks)])
    v = _join_tokens([ad.matmul(x, p.w_v) for x, p in zip(tokens, blocks)])
    return q, k, v


def _attention_core(
    q: Tensor, k: Tensor, v: Tensor, n_heads: int, capture: dict | None = None
) -> Tensor:
    """Scaled dot-product attention over the token axis, concatenated heads."""
    batch, num_tokens, width = q.shape
    if width % n_heads != 0:
        raise ConfigError(f"width {width} not divisible by {n_heads} heads")
    head_dim = width // n_heads

    def heads(x: Tensor) -> Tensor:
        x = ad.reshape(x, (batch, num_tokens, n_heads, head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = ad.mul(
        ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim)
    )
    probs = ad.softmax(scores)
    if capture is not None:
        capture.setdefault("attention_weights", []).append(probs.data)
    mixed = ad.matmul(probs, vh)
    mixed = ad.transpose(mixed, (0, 2, 1, 3))
    return ad.reshape(mixed, (batch, num_tokens, width))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    w_o: "list[Tensor] | Tensor",
    capture: dict | None = None,
) -> Tensor:
    """Multi-head attention plus output projection.

    `w_o` is either one [d, d] matrix shared by every token or a list of K
    block-specific matrices applied row-wise.
    """
    mixed = _attention_core(q, k, v, n_heads, capture)
    if isinstance(w_o, Tensor):
        return ad.matmul(mixed, w_o)
    parts = _split_tokens(mixed)
    return _join_tokens([ad.matmul(x, w) for x, w in zip(parts, w_o)])


def _ffn_apply(x: Tensor, p: FfnParams) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, p.w1), p.b1))
    return ad.add(ad.matmul(hidden, p.w2), p.b2)


def block_ffn(x: Tensor, blocks: list[EncoderBlockParams]) -> Tensor:
    """Apply block k's FFN to token row k only."""
    if len(blocks) != x.shape[1]:
        raise ConfigError(
            f"got {len(blocks)} block parameter sets for {x.shape[1]} tokens"
        )
    tokens = _split_tokens(x)
    return _join_tokens([_ffn_apply(t, p.ffn) for t, p in zip(tokens, blocks)])


def encoder_layer(
    h: Tensor,
    blocks: list[EncoderBlockParams],
    config: EncoderConfig,
    capture: dict | None = None,
) -> Tensor:
    """One heterogeneous layer: attention and FFN sublayers with residuals."""
    ln1 = [p.ln1 for p in blocks]
    ln2 = [p.ln2 for p in blocks]
    w_o = [p.w_o for p in blocks]
    if config.norm_placement == PRE_NORM:
        normed = _join_tokens(_blockwise_norm(_split_tokens(h), ln1))
        attn = multi_head_attention(
            *qkv_project(normed, blocks), config.n_heads, w_o, capture
        )
        mid = ad.add(h, attn)
        normed2 = _join_tokens(_blockwise_norm(_split_tokens(mid), ln2))
        return ad.add(mid, block_ffn(normed2, blocks))
    attn = multi_head_attention(
        *qkv_project(h, blocks), config.n_heads, w_o, capture
    )
    mid = _join_tokens(_blockwise_norm(_split_tokens(ad.add(h, attn)), ln1))
    out = ad.add(mid, block_ffn(mid, blocks))
    return _join_tokens(_blockwise_norm(_split_tokens(out), ln2))


def encoder_forward(
    h: Tensor,
    layers: list[list[EncoderBlockParams]],
    config: EncoderConfig,
    capture: dict | None = None,
) -> Tensor:
    for blocks in layers:
        h = encoder_layer(h, blocks, config, capture)
    return h


# ---------------------------------------------------------------------------
# shared-parameter variant (AutoInt-style): one weight set for all tokens
# ---------------------------------------------------------------------------


def shared_encoder_layer(
    h: Tensor,
    p: EncoderBlockParams,
    config: EncoderConfig,
    capture: dict | None = None,
) -> Tensor:
    """Standard transformer layer; all tokens share one parameter set.

    Vectorized across tokens, so it is an independent computation path from
    encoder_layer rather than a K-way tiling of it.
    """

    def attend(x: Tensor) -> Tensor:
        q = ad.matmul(x, p.w_q)
        k = ad.matmul(x, p.w_k)
        v = ad.matmul(x, p.w_v)
        return multi_head_attention(q, k, v, config.n_heads, p.w_o, capture)

    if config.norm_placement == PRE_NORM:
        mid = ad.add(h, attend(ad.layer_norm(h, p.ln1.gain, p.ln1.bias)))
        normed = ad.layer_norm(mid, p.ln2.gain, p.ln2.bias)
        return ad.add(mid, _ffn_apply(normed, p.ffn))
    mid = ad.layer_norm(ad.add(h, attend(h)), p.ln1.gain, p.ln1.bias)
    out = ad.add(mid, _ffn_apply(mid, p.ffn))
    return ad.layer_norm(out, p.ln2.gain, p.ln2.bias)


def shared_encoder_forward(
    h: Tensor,
    layers: list[EncoderBlockParams],
    config: EncoderConfig,
    capture: dict | None = None,
) -> Tensor:
    for p in layers:
        h = shared_encoder_layer(h, p, config, capture)
    return h
