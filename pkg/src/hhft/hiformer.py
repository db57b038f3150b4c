"""Composite-projection attention layer over the block tokens.

Queries stay per-token and per-head, but keys and values come from a global
composite projection: the K tokens are flattened into one (K*d)-vector,
multiplied by a (K*d, K*d_h) matrix, and re-split into K per-token slices.
Each key/value can therefore depend on every token, which is what lets the
layer express interactions beyond pairwise dot products. Residuals, norms,
and the per-token FFN mirror the heterogeneous encoder layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (
    PRE_NORM,
    POST_NORM,
    FfnParams,
    NormParams,
    _blockwise_norm,
    _ffn_apply,
    _join_tokens,
    _split_tokens,
)
from .errors import ConfigError


@dataclass(frozen=True)
class HiformerConfig:
    n2: int
    d_h: int
    n_h: int

    def validate(self) -> None:
        if self.n2 < 0 or self.d_h < 1 or self.n_h < 1:
            raise ConfigError(f"hiformer dims must be positive: {self}")


@dataclass
class HiformerLayerParams:
    """One composite-attention layer.

    w_q[h][k] maps token k into head h's query space; w_k_hat[h] and
    w_v_hat[h] are the global composite projections; w_o[k] maps token k's
    concatenated head outputs back to width d.
    """

    w_q: list[list[Tensor]]
    w_k_hat: list[Tensor]
    w_v_hat: list[Tensor]
    w_o: list[Tensor]
    ffn: list[FfnParams]
    ln1: list[NormParams]
    ln2: list[NormParams]


def composite_project(h: Tensor, w_hat: Tensor) -> Tensor:
    """Flatten tokens, mix through w_hat, split back into K per-token slices.

    h: [B, K, d]; w_hat: [K*d, K*d_h]; result: [B, K, d_h] where slice k may
    depend on every input token.
    """
    batch, num_tokens, width = h.shape
    if w_hat.shape[0] != num_tokens * width or w_hat.shape[1] % num_tokens != 0:
        raise ConfigError(
            f"composite projection shape {w_hat.shape} does not fit "
            f"{num_tokens} tokens of width {width}"
        )
    head_dim = w_hat.shape[1] // num_tokens
    flat = ad.reshape(h, (batch, num_tokens * width))
    mixed = ad.matmul(flat, w_hat)
    return ad.reshape(mixed, (batch, num_tokens, head_dim))


def _composite_attention(
    h: Tensor, params: HiformerLayerParams, config: HiformerConfig,
    capture: dict | None,
) -> Tensor:
    batch, num_tokens, width = h.shape
    tokens = _split_tokens(h)
    head_outputs = []
    for head in range(config.n_h):
        q = _join_tokens(
            [ad.matmul(x, w) for x, w in zip(tokens, params.w_q[head])]
        )
        k_hat = composite_project(h, params.w_k_hat[head])
        v_hat = composite_project(h, params.w_v_hat[head])
        scores = ad.mul(
            ad.matmul(q, ad.transpose(k_hat, (0, 2, 1))),
            1.0 / np.sqrt(config.d_h),
        )
        probs = ad.softmax(scores)
        if capture is not None:
            capture.setdefault("attention_weights", []).append(probs.data)
        head_outputs.append(ad.matmul(probs, v_hat))
    stacked = head_outputs[0] if config.n_h == 1 else ad.concat(head_outputs, axis=2)
    out_tokens = _split_tokens(stacked)
    return _join_tokens(
        [ad.matmul(x, w) for x, w in zip(out_tokens, params.w_o)]
    )


def hiformer_attention(
    h: Tensor,
    params: HiformerLayerParams,
    config: HiformerConfig,
    capture: dict | None = None,
    norm_placement: str = PRE_NORM,
) -> Tensor:
    """Full composite-attention layer with residuals, norms, and per-token FFN."""
    num_tokens = h.shape[1]
    if len(params.w_o) != num_tokens:
        raise ConfigError(
            f"got parameters for {len(params.w_o)} tokens, input has {num_tokens}"
        )

    def ffn_blockwise(x: Tensor) -> Tensor:
        parts = _split_tokens(x)
        return _join_tokens(
            [_ffn_apply(t, f) for t, f in zip(parts, params.ffn)]
        )

    if norm_placement == PRE_NORM:
        normed = _join_tokens(_blockwise_norm(_split_tokens(h), params.ln1))
        mid = ad.add(h, _composite_attention(normed, params, config, capture))
        normed2 = _join_tokens(_blockwise_norm(_split_tokens(mid), params.ln2))
        return ad.add(mid, ffn_blockwise(normed2))
    if norm_placement != POST_NORM:
        raise ConfigError(f"unknown norm placement {norm_placement!r}")
    attn = _composite_attention(h, params, config, capture)
    mid = _join_tokens(_blockwise_norm(_split_tokens(ad.add(h, attn)), params.ln1))
    out = ad.add(mid, ffn_blockwise(mid))
    return _join_tokens(_blockwise_norm(_split_tokens(out), params.ln2))


def hiformer_forward(
    h: Tensor,
    layers: list[HiformerLayerParams],
    config: HiformerConfig,
    capture: dict | None = None,
    norm_placement: str = PRE_NORM,
) -> Tensor:
    for params in layers:
        h = hiformer_attention(h, params, config, capture, norm_placement)
    return h


def block_diagonal_composite(per_token: np.ndarray, num_tokens: int) -> np.ndarray:
    """Tile one [d, d_h] projection into a block-diagonal composite matrix.

    The resulting composite projection treats every token independently,
    which reduces the layer to ordinary per-token attention; useful for
    equivalence tests against the shared encoder.
    """
    d, d_h = per_token.shape
    out = np.zeros((num_tokens * d, num_tokens * d_h), dtype=per_token.dtype)
    for k in range(num_tokens):
        out[k * d : (k + 1) * d, k * d_h : (k + 1) * d_h] = per_token
    return out
