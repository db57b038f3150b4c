"""Full ranking models behind one contract, plus checkpoint serialization.

Three variants share the embedding code path so ablations isolate the
interaction backbone: a plain MLP over concatenated block embeddings, a
shared-parameter transformer over projected tokens, and the full
heterogeneous stack with composite-projection layers on top.

Every model exposes forward / predict_proba / named_params / param_count /
flops_estimate / config_echo.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import autodiff as ad
from . import features as ft
from .autodiff import Tensor
from .encoder import (
    EncoderBlockParams,
    EncoderConfig,
    FfnParams,
    NormParams,
    encoder_forward,
    shared_encoder_forward,
)
from .errors import CheckpointError, ConfigError
from .features import EncodedBatch, FeatureSchema, TokenizerParams
from .hiformer import HiformerConfig, HiformerLayerParams, hiformer_forward

MLP = "mlp"
SHARED_TRANSFORMER = "shared-transformer"
HHFT = "hhft"

_VARIANTS = (MLP, SHARED_TRANSFORMER, HHFT)


class TensorSource(Protocol):
    """Supplies parameter tensors by name; backed by an init scheme or a checkpoint."""

    def tensor(self, name: str, shape: tuple[int, ...], group: str) -> Tensor: ...


@dataclass(frozen=True)
class ModelConfig:
    """Assembly recipe shared by all variants."""

    variant: str
    schema: FeatureSchema
    encoder: EncoderConfig
    hiformer: HiformerConfig
    head_hidden: tuple[int, ...] | None = None

    def validate(self) -> None:
        if self.variant not in _VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        self.schema.validate()
        if self.encoder.d != self.schema.d:
            raise ConfigError(
                f"encoder token dim {self.encoder.d} != schema d {self.schema.d}"
            )
        self.encoder.validate()
        self.hiformer.validate()
        if self.head_hidden is not None and any(w < 1 for w in self.head_hidden):
            raise ConfigError(f"head widths must be positive: {self.head_hidden}")

    def resolved_head_hidden(self) -> tuple[int, ...]:
        if self.head_hidden is not None:
            return tuple(self.head_hidden)
        return (4 * self.schema.d, self.schema.d)

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "schema": self.schema.to_json_dict(),
            "encoder": {
                "n1": self.encoder.n1,
                "d_ffn": self.encoder.d_ffn,
                "n_heads": self.encoder.n_heads,
                "norm_placement": self.encoder.norm_placement,
            },
            "hiformer": {
                "n2": self.hiformer.n2,
                "d_h": self.hiformer.d_h,
                "n_h": self.hiformer.n_h,
            },
            "head_hidden": (
                list(self.head_hidden) if self.head_hidden is not None else None
            ),
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "ModelConfig":
        schema = FeatureSchema.from_json_dict(obj["schema"])
        e = obj.get("encoder", {})
        h = obj.get("hiformer", {})
        config = ModelConfig(
            variant=obj["variant"],
            schema=schema,
            encoder=EncoderConfig(
                n1=int(e.get("n1", 1)),
                d=schema.d,
                d_ffn=int(e.get("d_ffn", schema.d)),
                n_heads=int(e.get("n_heads", 4)),
                norm_placement=e.get("norm_placement", "pre"),
            ),
            hiformer=HiformerConfig(
                n2=int(h.get("n2", 1)),
                d_h=int(h.get("d_h", 8)),
                n_h=int(h.get("n_h", 4)),
            ),
            head_hidden=(
                tuple(int(w) for w in obj["head_hidden"])
                if obj.get("head_hidden") is not None
                else None
            ),
        )
        config.validate()
        return config


class _Recorder:
    """Wraps a TensorSource, remembering every tensor in creation order."""

    def __init__(self, source: TensorSource) -> None:
        self.source = source
        self.named: list[tuple[str, Tensor, str]] = []

    def __call__(self, name: str, shape: tuple[int, ...], group: str) -> Tensor:
        t = self.source.tensor(name, shape, group)
        self.named.append((name, t, group))
        return t


def _build_embeds(schema: FeatureSchema, make: _Recorder) -> list[ft.BlockEmbedParams]:
    embeds = []
    for spec in schema.blocks:
        prefix = f"embed.{spec.name}"
        if spec.kind == ft.CATEGORICAL:
            per = spec.e_k // spec.field_arity
            tables = [
                make(f"{prefix}.table{f}", (vocab, per), "embedding")
                for f, vocab in enumerate(spec.vocab_sizes)
            ]
            embeds.append(ft.BlockEmbedParams(tables=tables))
        elif spec.kind == ft.CONTINUOUS:
            embeds.append(
                ft.BlockEmbedParams(
                    lift_w=make(f"{prefix}.lift_w", (spec.cont_dim, spec.e_k),
                                "weight"),
                    lift_b=make(f"{prefix}.lift_b", (spec.e_k,), "bias"),
                )
            )
        else:
            embeds.append(
                ft.BlockEmbedParams(
                    tables=[
                        make(f"{prefix}.table0", (spec.vocab_sizes[0], spec.e_k),
                             "embedding")
                    ]
                )
            )
    return embeds


def _build_tokenizer(schema: FeatureSchema, make: _Recorder) -> TokenizerParams:
    embeds = _build_embeds(schema, make)
    proj_w, proj_b = [], []
    for spec in schema.blocks:
        proj_w.append(make(f"proj.{spec.name}.w", (spec.e_k, schema.d), "weight"))
        proj_b.append(make(f"proj.{spec.name}.b", (schema.d,), "bias"))
    return TokenizerParams(embeds, proj_w, proj_b)


def _build_encoder_block(prefix: str, d: int, d_ffn: int, make: _Recorder
                         ) -> EncoderBlockParams:
    return EncoderBlockParams(
        w_q=make(f"{prefix}.w_q", (d, d), "weight"),
        w_k=make(f"{prefix}.w_k", (d, d), "weight"),
        w_v=make(f"{prefix}.w_v", (d, d), "weight"),
        w_o=make(f"{prefix}.w_o", (d, d), "residual-out"),
        ffn=FfnParams(
            w1=make(f"{prefix}.ffn.w1", (d, d_ffn), "weight"),
            b1=make(f"{prefix}.ffn.b1", (d_ffn,), "bias"),
            w2=make(f"{prefix}.ffn.w2", (d_ffn, d), "residual-out"),
            b2=make(f"{prefix}.ffn.b2", (d,), "bias"),
        ),
        ln1=NormParams(
            gain=make(f"{prefix}.ln1.gain", (d,), "norm-gain"),
            bias=make(f"{prefix}.ln1.bias", (d,), "norm-bias"),
        ),
        ln2=NormParams(
            gain=make(f"{prefix}.ln2.gain", (d,), "norm-gain"),
            bias=make(f"{prefix}.ln2.bias", (d,), "norm-bias"),
        ),
    )


def _build_hiformer_layer(
    prefix: str, schema: FeatureSchema, config: HiformerConfig, d_ffn: int,
    make: _Recorder,
) -> HiformerLayerParams:
    d = schema.d
    num_tokens = schema.num_blocks
    names = [b.name for b in schema.blocks]
    w_q = [
        [
            make(f"{prefix}.h{h}.q.{name}", (d, config.d_h), "weight")
            for name in names
        ]
        for h in range(config.n_h)
    ]
    w_k_hat = [
        make(f"{prefix}.h{h}.k_hat", (num_tokens * d, num_tokens * config.d_h),
             "weight")
        for h in range(config.n_h)
    ]
    w_v_hat = [
        make(f"{prefix}.h{h}.v_hat", (num_tokens * d, num_tokens * config.d_h),
             "weight")
        for h in range(config.n_h)
    ]
    w_o = [
        make(f"{prefix}.{name}.w_o", (config.n_h * config.d_h, d), "residual-out")
        for name in names
    ]
    ffn, ln1, ln2 = [], [], []
    for name in names:
        ffn.append(
            FfnParams(
                w1=make(f"{prefix}.{name}.ffn.w1", (d, d_ffn), "weight"),
                b1=make(f"{prefix}.{name}.ffn.b1", (d_ffn,), "bias"),
                w2=make(f"{prefix}.{name}.ffn.w2", (d_ffn, d), "residual-out"),
                b2=make(f"{prefix}.{name}.ffn.b2", (d,), "bias"),
            )
        )
        ln1.append(
            NormParams(
                gain=make(f"{prefix}.{name}.ln1.gain", (d,), "norm-gain"),
                bias=make(f"{prefix}.{name}.ln1.bias", (d,), "norm-bias"),
            )
        )
        ln2.append(
            NormParams(
                gain=make(f"{prefix}.{name}.ln2.gain", (d,), "norm-gain"),
                bias=make(f"{prefix}.{name}.ln2.bias", (d,), "norm-bias"),
            )
        )
    return HiformerLayerParams(w_q, w_k_hat, w_v_hat, w_o, ffn, ln1, ln2)


@dataclass
class HeadParams:
    weights: list[Tensor]
    biases: list[Tensor]


def _build_head(in_width: int, hidden: tuple[int, ...], make: _Recorder) -> HeadParams:
    widths = [in_width, *hidden, 1]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        group = "head-out" if i == len(widths) - 2 else "weight"
        weights.append(make(f"head.{i}.w", (widths[i], widths[i + 1]), group))
        biases.append(make(f"head.{i}.b", (widths[i + 1],), "bias"))
    return HeadParams(weights, biases)


def _head_forward(x: Tensor, head: HeadParams) -> Tensor:
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        x = ad.add(ad.matmul(x, w), b)
        if i != last:
            x = ad.relu(x)
    return ad.reshape(x, (x.shape[0],))


class RankingModel:
    """Common contract: logits out of raw records or an encoded batch."""

    variant = "?"

    def __init__(self, config: ModelConfig, source: TensorSource) -> None:
        config.validate()
        self.config = config
        self.schema = config.schema
        make = _Recorder(source)
        self._build(make)
        self._named = make.named
        self.dtype = self._named[0][1].dtype

    def _build(self, make: _Recorder) -> None:
        raise NotImplementedError

    def _forward_encoded(self, batch: EncodedBatch, capture: dict | None) -> Tensor:
        raise NotImplementedError

    def ensure_encoded(self, batch) -> EncodedBatch:
        if isinstance(batch, EncodedBatch):
            return batch
        return ft.encode_records(batch, self.schema, dtype=self.dtype)

    def forward(self, batch, capture: dict | None = None) -> Tensor:
        """Pre-sigmoid logit per record, shape [B]."""
        return self._forward_encoded(self.ensure_encoded(batch), capture)

    def predict_proba(self, batch) -> Tensor:
        return ad.sigmoid(self.forward(batch))

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [(name, t) for name, t, _ in self._named]

    def param_tensors(self) -> list[Tensor]:
        return [t for _, t, _ in self._named]

    def param_count(self) -> dict[str, int]:
        """Exact parameter counts by enumeration, split dense vs embedding tables."""
        counts = {"dense": 0, "embedding": 0}
        for _, t, group in self._named:
            key = "embedding" if group == "embedding" else "dense"
            counts[key] += t.size
        return counts

    def flops_estimate(self, batch_size: int = 1) -> int:
        raise NotImplementedError

    def config_echo(self) -> dict:
        return self.config.to_json_dict()


class MlpBaseline(RankingModel):
    """Concatenated block embeddings straight into the head MLP."""

    variant = MLP

    def _build(self, make: _Recorder) -> None:
        self.embeds = _build_embeds(self.schema, make)
        in_width = sum(b.e_k for b in self.schema.blocks)
        self.head = _build_head(in_width, self.config.resolved_head_hidden(), make)

    def _forward_encoded(self, batch: EncodedBatch, capture: dict | None) -> Tensor:
        parts = ft.block_embeddings(batch, self.schema, self.embeds)
        return _head_forward(ad.concat(parts, axis=1), self.head)

    def flops_estimate(self, batch_size: int = 1) -> int:
        total = _flops_embed(self.schema, batch_size)
        in_width = sum(b.e_k for b in self.schema.blocks)
        return total + _flops_head(
            in_width, self.config.resolved_head_hidden(), batch_size
        )


class SharedTransformerBaseline(RankingModel):
    """Projected tokens through n1 shared-parameter transformer layers."""

    variant = SHARED_TRANSFORMER

    def _build(self, make: _Recorder) -> None:
        cfg = self.config
        self.tokenizer = _build_tokenizer(self.schema, make)
        self.encoder_layers = [
            _build_encoder_block(f"encoder.{i}.shared", cfg.encoder.d,
                                 cfg.encoder.d_ffn, make)
            for i in range(cfg.encoder.n1)
        ]
        self.head = _build_head(
            self.schema.num_blocks * self.schema.d, cfg.resolved_head_hidden(), make
        )

    def _forward_encoded(self, batch: EncodedBatch, capture: dict | None) -> Tensor:
        h = ft.tokenize_encoded(batch, self.schema, self.tokenizer)
        h = shared_encoder_forward(h, self.encoder_layers, self.config.encoder,
                                   capture)
        flat = ad.reshape(h, (batch.size, self.schema.num_blocks * self.schema.d))
        return _head_forward(flat, self.head)

    def flops_estimate(self, batch_size: int = 1) -> int:
        cfg = self.config
        total = _flops_embed(self.schema, batch_size)
        total += _flops_projection(self.schema, batch_size)
        total += cfg.encoder.n1 * _flops_encoder_layer(
            batch_size, self.schema.num_blocks, self.schema.d,
            cfg.encoder.d_ffn, cfg.encoder.n_heads,
        )
        return total + _flops_head(
            self.schema.num_blocks * self.schema.d,
            cfg.resolved_head_hidden(), batch_size,
        )


class HHFTModel(RankingModel):
    """Heterogeneous encoder layers followed by composite-projection layers."""

    variant = HHFT

    def _build(self, make: _Recorder) -> None:
        cfg = self.config
        names = [b.name for b in self.schema.blocks]
        self.tokenizer = _build_tokenizer(self.schema, make)
        self.encoder_layers = [
            [
                _build_encoder_block(f"encoder.{i}.{name}", cfg.encoder.d,
                                     cfg.encoder.d_ffn, make)
                for name in names
            ]
            for i in range(cfg.encoder.n1)
        ]
        self.hiformer_layers = [
            _build_hiformer_layer(f"hiformer.{i}", self.schema, cfg.hiformer,
                                  cfg.encoder.d_ffn, make)
            for i in range(cfg.hiformer.n2)
        ]
        self.head = _build_head(
            self.schema.num_blocks * self.schema.d, cfg.resolved_head_hidden(), make
        )

    def _forward_encoded(self, batch: EncodedBatch, capture: dict | None) -> Tensor:
        cfg = self.config
        h = ft.tokenize_encoded(batch, self.schema, self.tokenizer)
        h = encoder_forward(h, self.encoder_layers, cfg.encoder, capture)
        h = hiformer_forward(
            h, self.hiformer_layers, cfg.hiformer, capture,
            norm_placement=cfg.encoder.norm_placement,
        )
        flat = ad.reshape(h, (batch.size, self.schema.num_blocks * self.schema.d))
        return _head_forward(flat, self.head)

    def flops_estimate(self, batch_size: int = 1) -> int:
        cfg = self.config
        num_tokens = self.schema.num_blocks
        total = _flops_embed(self.schema, batch_size)
        total += _flops_projection(self.schema, batch_size)
        total += cfg.encoder.n1 * _flops_encoder_layer(
            batch_size, num_tokens, self.schema.d, cfg.encoder.d_ffn,
            cfg.encoder.n_heads,
        )
        total += cfg.hiformer.n2 * _flops_hiformer_layer(
            batch_size, num_tokens, self.schema.d, cfg.hiformer.d_h,
            cfg.hiformer.n_h, cfg.encoder.d_ffn,
        )
        return total + _flops_head(
            num_tokens * self.schema.d, cfg.resolved_head_hidden(), batch_size
        )


_MODEL_CLASSES = {
    MLP: MlpBaseline,
    SHARED_TRANSFORMER: SharedTransformerBaseline,
    HHFT: HHFTModel,
}


def build_from_source(config: ModelConfig, source: TensorSource) -> RankingModel:
    return _MODEL_CLASSES[config.variant](config, source)


# ---------------------------------------------------------------------------
# analytic MAC counts (mirror the op-level accounting of FlopCounter)
# ---------------------------------------------------------------------------


def _flops_embed(schema: FeatureSchema, batch: int) -> int:
    """Embedding stage: lookups are free, lifts and pooling multiply."""
    total = 0
    for spec in schema.blocks:
        if spec.kind == ft.CONTINUOUS:
            total += batch * spec.cont_dim * spec.e_k
        elif spec.kind == ft.SEQUENCE:
            total += batch * spec.max_seq_len * spec.e_k
    return total


def _flops_projection(schema: FeatureSchema, batch: int) -> int:
    return sum(batch * spec.e_k * schema.d for spec in schema.blocks)


def _flops_layer_norm(batch: int, d: int) -> int:
    return 3 * batch * d + batch


def _flops_attention_core(batch: int, num_tokens: int, head_dim: int,
                          n_heads: int) -> int:
    scores = batch * n_heads * num_tokens * num_tokens * head_dim
    scale = batch * n_heads * num_tokens * num_tokens
    softmax = batch * n_heads * num_tokens * num_tokens
    mix = batch * n_heads * num_tokens * num_tokens * head_dim
    return scores + scale + softmax + mix


def _flops_encoder_layer(batch: int, num_tokens: int, d: int, d_ffn: int,
                         n_heads: int) -> int:
    norms = 2 * num_tokens * _flops_layer_norm(batch, d)
    qkv = 3 * num_tokens * batch * d * d
    core = _flops_attention_core(batch, num_tokens, d // n_heads, n_heads)
    out_proj = num_tokens * batch * d * d
    ffn = 2 * num_tokens * batch * d * d_ffn
    return norms + qkv + core + out_proj + ffn


def _flops_hiformer_layer(batch: int, num_tokens: int, d: int, d_h: int,
                          n_h: int, d_ffn: int) -> int:
    norms = 2 * num_tokens * _flops_layer_norm(batch, d)
    queries = n_h * num_tokens * batch * d * d_h
    composites = 2 * n_h * batch * (num_tokens * d) * (num_tokens * d_h)
    core = _flops_attention_core(batch, num_tokens, d_h, n_h)
    out_proj = num_tokens * batch * (n_h * d_h) * d
    ffn = 2 * num_tokens * batch * d * d_ffn
    return norms + queries + composites + core + out_proj + ffn


def _flops_head(in_width: int, hidden: tuple[int, ...], batch: int) -> int:
    widths = [in_width, *hidden, 1]
    return sum(batch * widths[i] * widths[i + 1] for i in range(len(widths) - 1))


def dense_param_formula(config: ModelConfig) -> int:
    """Closed-form dense (non-table) parameter count; must equal enumeration."""
    schema = config.schema
    d = schema.d
    num_tokens = schema.num_blocks
    hidden = config.resolved_head_hidden()
    lifts = sum(
        spec.cont_dim * spec.e_k + spec.e_k
        for spec in schema.blocks
        if spec.kind == ft.CONTINUOUS
    )

    def head_terms(in_width: int) -> int:
        widths = [in_width, *hidden, 1]
        return sum(
            widths[i] * widths[i + 1] + widths[i + 1]
            for i in range(len(widths) - 1)
        )

    if config.variant == MLP:
        return lifts + head_terms(sum(b.e_k for b in schema.blocks))

    proj = sum(spec.e_k * d + d for spec in schema.blocks)
    d_ffn = config.encoder.d_ffn
    encoder_block = 4 * d * d + 2 * d * d_ffn + d_ffn + d + 4 * d
    if config.variant == SHARED_TRANSFORMER:
        return (
            lifts + proj + config.encoder.n1 * encoder_block
            + head_terms(num_tokens * d)
        )

    d_h, n_h = config.hiformer.d_h, config.hiformer.n_h
    hiformer_layer = (
        n_h * num_tokens * d * d_h
        + 2 * n_h * (num_tokens * d) * (num_tokens * d_h)
        + num_tokens * n_h * d_h * d
        + num_tokens * (2 * d * d_ffn + d_ffn + d + 4 * d)
    )
    return (
        lifts
        + proj
        + config.encoder.n1 * num_tokens * encoder_block
        + config.hiformer.n2 * hiformer_layer
        + head_terms(num_tokens * d)
    )


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config echo, raw little-endian tensors
# ---------------------------------------------------------------------------

_MAGIC = b"HHFTCKPT"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(model: RankingModel, path) -> None:
    """Write every parameter in declaration order; round-trips bit-exactly."""
    blob = json.dumps(model.config_echo(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        named = model.named_params()
        fh.write(struct.pack("<I", len(named)))
        for name, t in named:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", _DTYPE_CODES[t.dtype]))
            fh.write(struct.pack("<B", t.ndim))
            for dim in t.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(t.data, dtype=t.dtype).astype(
                t.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


class _CheckpointSource:
    """TensorSource replaying saved tensors; validates names and shapes."""

    def __init__(self, tensors: dict[str, np.ndarray]) -> None:
        self.tensors = tensors
        self.used: set[str] = set()

    def tensor(self, name: str, shape: tuple[int, ...], group: str) -> Tensor:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = self.tensors[name]
        if arr.shape != tuple(shape):
            raise CheckpointError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, "
                f"config expects {tuple(shape)}"
            )
        self.used.add(name)
        return Tensor(arr, grad_enabled=True)


def load_checkpoint(path) -> RankingModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC), "magic") != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version}"
            )
        (json_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            echo = json.loads(_read_exact(fh, json_len, "config").decode("utf-8"))
            config = ModelConfig.from_json_dict(echo)
        except (json.JSONDecodeError, KeyError, ConfigError) as exc:
            raise CheckpointError(f"{path}: bad config header: {exc}") from None
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (code,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dim"))[0]
                for _ in range(ndim)
            )
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, nbytes, f"tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    source = _CheckpointSource(tensors)
    model = build_from_source(config, source)
    unused = set(tensors) - source.used
    if unused:
        raise CheckpointError(
            f"{path}: checkpoint carries unexpected tensors: {sorted(unused)[:3]}"
        )
    return model
