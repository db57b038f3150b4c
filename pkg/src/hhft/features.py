"""Semantic feature blocks and their tokenization into an aligned matrix.

Raw inputs are grouped into K named blocks (user, item, query, behavior
sequence, ...). Each block is embedded into its own width e_k, sequence
blocks are mean-pooled over their true length, and a per-block affine map
projects every block to the shared token width d. The result is a [B, K, d]
token matrix whose row order follows the schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SchemaError, ShapeError

CATEGORICAL = "categorical-set"
CONTINUOUS = "continuous-vector"
SEQUENCE = "sequence"

_KINDS = (CATEGORICAL, CONTINUOUS, SEQUENCE)


@dataclass(frozen=True)
class BlockSpec:
    """One semantic feature block.

    kind selects which raw fields apply: categorical-set blocks carry
    `vocab_sizes` (one per field), continuous-vector blocks carry
    `cont_dim`, sequence blocks carry a single item vocabulary plus
    `max_seq_len`. `e_k` is the total embedding width of the block.
    """

    name: str
    kind: str
    e_k: int
    vocab_sizes: tuple[int, ...] = ()
    cont_dim: int = 0
    max_seq_len: int = 0

    @property
    def field_arity(self) -> int:
        """Number of raw fields carried by one record for this block."""
        if self.kind == CATEGORICAL:
            return len(self.vocab_sizes)
        if self.kind == CONTINUOUS:
            return self.cont_dim
        return 1

    def validate(self) -> None:
        if self.kind not in _KINDS:
            raise SchemaError(f"block {self.name!r}: unknown kind {self.kind!r}")
        if self.e_k < 1:
            raise SchemaError(f"block {self.name!r}: e_k must be >= 1")
        if self.kind == CATEGORICAL:
            if not self.vocab_sizes:
                raise SchemaError(f"block {self.name!r}: needs vocab_sizes")
            if any(v < 1 for v in self.vocab_sizes):
                raise SchemaError(f"block {self.name!r}: vocab sizes must be >= 1")
            if self.e_k % len(self.vocab_sizes) != 0:
                raise SchemaError(
                    f"block {self.name!r}: e_k={self.e_k} must divide evenly over "
                    f"{len(self.vocab_sizes)} categorical fields"
                )
        elif self.kind == CONTINUOUS:
            if self.cont_dim < 1:
                raise SchemaError(f"block {self.name!r}: cont_dim must be >= 1")
        else:
            if len(self.vocab_sizes) != 1 or self.vocab_sizes[0] < 1:
                raise SchemaError(
                    f"block {self.name!r}: sequence blocks need one item vocab"
                )
            if self.max_seq_len < 1:
                raise SchemaError(f"block {self.name!r}: max_seq_len must be >= 1")

    def to_json_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "e_k": self.e_k}
        if self.kind in (CATEGORICAL, SEQUENCE):
            out["vocab_sizes"] = list(self.vocab_sizes)
        if self.kind == CONTINUOUS:
            out["cont_dim"] = self.cont_dim
        if self.kind == SEQUENCE:
            out["max_seq_len"] = self.max_seq_len
        return out

    @staticmethod
    def from_json_dict(obj: dict) -> "BlockSpec":
        spec = BlockSpec(
            name=obj["name"],
            kind=obj["kind"],
            e_k=int(obj["e_k"]),
            vocab_sizes=tuple(int(v) for v in obj.get("vocab_sizes", ())),
            cont_dim=int(obj.get("cont_dim", 0)),
            max_seq_len=int(obj.get("max_seq_len", 0)),
        )
        spec.validate()
        return spec


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered block declarations plus the unified token width d."""

    blocks: tuple[BlockSpec, ...]
    d: int

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def validate(self) -> None:
        if len(self.blocks) < 2:
            raise SchemaError("a schema needs at least 2 blocks")
        if self.d < 1:
            raise SchemaError("token dimension d must be >= 1")
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate block names in {names}")
        for b in self.blocks:
            b.validate()

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks:
            if b.name == name:
                return b
        raise SchemaError(f"no block named {name!r}")

    def to_json_dict(self) -> dict:
        return {"d": self.d, "blocks": [b.to_json_dict() for b in self.blocks]}

    @staticmethod
    def from_json_dict(obj: dict) -> "FeatureSchema":
        schema = FeatureSchema(
            blocks=tuple(BlockSpec.from_json_dict(b) for b in obj["blocks"]),
            d=int(obj["d"]),
        )
        schema.validate()
        return schema


@dataclass
class ExampleRecord:
    """One labeled example: per-block raw values keyed by block name.

    Categorical blocks map to a list of ids (one per field), continuous
    blocks to a list of floats, sequence blocks to the list of item ids
    actually observed (length is implicit, padding is never stored).
    """

    blocks: dict[str, list]
    label: int


def validate_record(record: ExampleRecord, schema: FeatureSchema) -> None:
    if record.label not in (0, 1):
        raise SchemaError(f"label must be 0 or 1, got {record.label!r}")
    for spec in schema.blocks:
        if spec.name not in record.blocks:
            raise SchemaError(f"record missing block {spec.name!r}")
        values = record.blocks[spec.name]
        if spec.kind == CATEGORICAL:
            if len(values) != spec.field_arity:
                raise SchemaError(
                    f"block {spec.name!r}: expected {spec.field_arity} ids, "
                    f"got {len(values)}"
                )
            for fid, (v, vocab) in enumerate(zip(values, spec.vocab_sizes)):
                if not (0 <= int(v) < vocab):
                    raise IndexError(
                        f"block {spec.name!r} field {fid}: id {v} out of "
                        f"range [0, {vocab})"
                    )
        elif spec.kind == CONTINUOUS:
            if len(values) != spec.cont_dim:
                raise SchemaError(
                    f"block {spec.name!r}: expected {spec.cont_dim} values, "
                    f"got {len(values)}"
                )
            if not np.isfinite(values).all():
                raise SchemaError(f"block {spec.name!r}: non-finite value")
        else:
            if len(values) > spec.max_seq_len:
                raise SchemaError(
                    f"block {spec.name!r}: sequence length {len(values)} exceeds "
                    f"max {spec.max_seq_len}"
                )
            vocab = spec.vocab_sizes[0]
            for v in values:
                if not (0 <= int(v) < vocab):
                    raise IndexError(
                        f"block {spec.name!r}: item id {v} out of range [0, {vocab})"
                    )


@dataclass
class EncodedBatch:
    """Records packed into dense per-block numpy arrays for vectorized use.

    arrays[name] holds, per block kind: "ids" [B, F] for categorical,
    "values" [B, cont_dim] for continuous, "ids" [B, L] zero-padded plus
    "lengths" [B] for sequences.
    """

    arrays: dict[str, dict[str, np.ndarray]]
    labels: np.ndarray
    size: int

    def select(self, indices: np.ndarray) -> "EncodedBatch":
        sub = {
            name: {key: arr[indices] for key, arr in group.items()}
            for name, group in self.arrays.items()
        }
        return EncodedBatch(sub, self.labels[indices], int(len(indices)))


def encode_records(
    records: list[ExampleRecord], schema: FeatureSchema, dtype=np.float64
) -> EncodedBatch:
    """Validate records and pack them into an EncodedBatch.

    Errors carry the index of the offending record.
    """
    n = len(records)
    arrays: dict[str, dict[str, np.ndarray]] = {}
    for spec in schema.blocks:
        if spec.kind == CATEGORICAL:
            arrays[spec.name] = {
                "ids": np.zeros((n, spec.field_arity), dtype=np.int64)
            }
        elif spec.kind == CONTINUOUS:
            arrays[spec.name] = {"values": np.zeros((n, spec.cont_dim), dtype=dtype)}
        else:
            arrays[spec.name] = {
                "ids": np.zeros((n, spec.max_seq_len), dtype=np.int64),
                "lengths": np.zeros(n, dtype=np.int64),
            }
    labels = np.zeros(n, dtype=dtype)
    for i, record in enumerate(records):
        try:
            validate_record(record, schema)
        except (SchemaError, IndexError) as exc:
            raise type(exc)(f"record {i}: {exc}") from None
        labels[i] = record.label
        for spec in schema.blocks:
            values = record.blocks[spec.name]
            group = arrays[spec.name]
            if spec.kind == CATEGORICAL:
                group["ids"][i] = values
            elif spec.kind == CONTINUOUS:
                group["values"][i] = values
            else:
                group["lengths"][i] = len(values)
                if values:
                    group["ids"][i, : len(values)] = values
    return EncodedBatch(arrays, labels, n)


# ---------------------------------------------------------------------------
# learnable parameters
# ---------------------------------------------------------------------------


@dataclass
class BlockEmbedParams:
    """Embedding-stage parameters of one block."""

    tables: list[Tensor] = field(default_factory=list)
    lift_w: Tensor | None = None
    lift_b: Tensor | None = None


@dataclass
class TokenizerParams:
    """Embedding plus unified-dimension projection for every block."""

    embeds: list[BlockEmbedParams]
    proj_w: list[Tensor]
    proj_b: list[Tensor]


# ---------------------------------------------------------------------------
# single-record reference path
# ---------------------------------------------------------------------------


def embed_block(spec: BlockSpec, raw: list, params: BlockEmbedParams) -> Tensor:
    """Embed one record's raw values for one block into a length-e_k vector."""
    if spec.kind == CATEGORICAL:
        if len(raw) != spec.field_arity:
            raise SchemaError(
                f"block {spec.name!r}: expected {spec.field_arity} ids, got {len(raw)}"
            )
        parts = [
            ad.embedding_lookup(params.tables[f], [int(raw[f])],
                                name=f"{spec.name}[{f}]")
            for f in range(spec.field_arity)
        ]
        return ad.reshape(ad.concat(parts, axis=1), (spec.e_k,))
    if spec.kind == CONTINUOUS:
        if len(raw) != spec.cont_dim:
            raise SchemaError(
                f"block {spec.name!r}: expected {spec.cont_dim} values, got {len(raw)}"
            )
        x = Tensor(np.asarray(raw, dtype=params.lift_w.dtype).reshape(1, -1))
        lifted = ad.add(ad.matmul(x, params.lift_w), params.lift_b)
        return ad.reshape(lifted, (spec.e_k,))
    if len(raw) > spec.max_seq_len:
        raise SchemaError(
            f"block {spec.name!r}: sequence length {len(raw)} exceeds "
            f"max {spec.max_seq_len}"
        )
    if not raw:
        return Tensor(np.zeros(spec.e_k, dtype=params.tables[0].dtype))
    items = ad.embedding_lookup(params.tables[0], [int(v) for v in raw],
                                name=spec.name)
    return pool_sequence(items, len(raw))


def pool_sequence(seq_embeds: Tensor, true_len: int) -> Tensor:
    """Masked mean over the first true_len rows; an empty sequence pools to zero."""
    rows, width = seq_embeds.shape
    if true_len > rows:
        raise SchemaError(f"true_len {true_len} exceeds {rows} pooled rows")
    weights = np.zeros((1, rows), dtype=seq_embeds.dtype)
    if true_len > 0:
        weights[0, :true_len] = 1.0 / true_len
    pooled = ad.matmul(Tensor(weights), seq_embeds)
    return ad.reshape(pooled, (width,))


def pool_last_item(seq_embeds: Tensor, true_len: int) -> Tensor:
    """Alternative reduction: take the embedding of the last real item."""
    rows, width = seq_embeds.shape
    if true_len > rows:
        raise SchemaError(f"true_len {true_len} exceeds {rows} pooled rows")
    if true_len == 0:
        return Tensor(np.zeros(width, dtype=seq_embeds.dtype))
    picked = ad.slice_axis(seq_embeds, 0, true_len - 1, true_len)
    return ad.reshape(picked, (width,))


def project_block(e_vec: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map e_k -> d in row-vector convention: E @ W + b."""
    if e_vec.ndim != 1 or w.ndim != 2 or e_vec.shape[0] != w.shape[0]:
        raise ShapeError(
            f"project_block shapes disagree: {e_vec.shape} @ {w.shape}"
        )
    out = ad.add(ad.matmul(ad.reshape(e_vec, (1, -1)), w), b)
    return ad.reshape(out, (w.shape[1],))


# ---------------------------------------------------------------------------
# batched path
# ---------------------------------------------------------------------------


def embed_block_batch(
    spec: BlockSpec, group: dict[str, np.ndarray], params: BlockEmbedParams
) -> Tensor:
    """Vectorized embed_block over an encoded batch; returns [B, e_k]."""
    if spec.kind == CATEGORICAL:
        ids = group["ids"]
        parts = [
            ad.embedding_lookup(params.tables[f], ids[:, f],
                                name=f"{spec.name}[{f}]")
            for f in range(spec.field_arity)
        ]
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    if spec.kind == CONTINUOUS:
        x = Tensor(group["values"].astype(params.lift_w.dtype, copy=False))
        return ad.add(ad.matmul(x, params.lift_w), params.lift_b)
    ids = group["ids"]
    lengths = group["lengths"]
    batch, max_len = ids.shape
    items = ad.embedding_lookup(params.tables[0], ids.reshape(-1), name=spec.name)
    items = ad.reshape(items, (batch, max_len, spec.e_k))
    # one constant weight row per record: 1/len on real positions, 0 on padding
    weights = np.zeros((batch, 1, max_len), dtype=params.tables[0].dtype)
    pos = np.arange(max_len)[None, :]
    mask = pos < lengths[:, None]
    safe = np.maximum(lengths, 1).astype(weights.dtype)
    weights[:, 0, :] = mask / safe[:, None]
    pooled = ad.matmul(Tensor(weights), items)
    return ad.reshape(pooled, (batch, spec.e_k))


def block_embeddings(
    batch: EncodedBatch, schema: FeatureSchema, embeds: list[BlockEmbedParams]
) -> list[Tensor]:
    """Per-block [B, e_k] embeddings in schema order."""
    return [
        embed_block_batch(spec, batch.arrays[spec.name], params)
        for spec, params in zip(schema.blocks, embeds)
    ]


def tokenize_encoded(
    batch: EncodedBatch, schema: FeatureSchema, params: TokenizerParams
) -> Tensor:
    """Embed and project an encoded batch into the [B, K, d] token matrix."""
    tokens = []
    for k, (spec, embedded) in enumerate(
        zip(schema.blocks, block_embeddings(batch, schema, params.embeds))
    ):
        projected = ad.add(
            ad.matmul(embedded, params.proj_w[k]), params.proj_b[k]
        )
        tokens.append(ad.reshape(projected, (batch.size, 1, schema.d)))
    return ad.concat(tokens, axis=1)


def tokenize(
    records: "list[ExampleRecord] | EncodedBatch",
    schema: FeatureSchema,
    params: TokenizerParams,
) -> Tensor:
    """Tokenize records (validating and encoding them first if needed)."""
    if isinstance(records, EncodedBatch):
        batch = records
    else:
        dtype = params.proj_w[0].dtype
        batch = encode_records(records, schema, dtype=dtype)
    return tokenize_encoded(batch, schema, params)
