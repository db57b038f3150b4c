"""Synthetic CTR data with planted cross-block interactions.

Each interaction assigns every involved block a deterministic sign in
{-1, +1} (a hash parity of the block's leading raw value) and contributes
strength * product-of-signs to the record's logit. Pure 3-way interactions
built this way are XOR-like: no single block carries marginal signal, so
they separate architectures that can form high-order feature crossings
from ones that cannot. The exact click probability of every record is
available in closed form, which gives every experiment a known AUC ceiling.

Per-record randomness derives from (seed, record index), so generation can
be sharded or replayed without changing a single byte of output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as ft
from .errors import ConfigError, OracleError
from .features import ExampleRecord, FeatureSchema

HEADER_NAME = "header.json"
RECORDS_NAME = "records.jsonl"
_FORMAT = "hhft-dataset"
_VERSION = 1


def _balanced_signs(name: str, salt: int, vocab: int) -> np.ndarray:
    """Deterministic +/-1 table over a vocabulary with an exact half split.

    A seeded permutation assigns each id a distinct slot in [0, vocab); even
    slots map to +1, so exactly ceil(vocab/2) ids are positive. Balance
    matters: a lopsided sign table would leak marginal (single-feature)
    signal out of a supposedly pure high-order interaction.
    """
    digest = hashlib.blake2b(f"sign:{name}:{salt}".encode("utf-8"),
                             digest_size=16).digest()
    rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
    slots = rng.permutation(vocab)
    return np.where(slots % 2 == 0, 1, -1).astype(np.int64)


@dataclass(frozen=True)
class InteractionSpec:
    """A planted 1-, 2-, or 3-way multiplicative sign interaction.

    `salt` namespaces the sign tables, so several interactions over the
    same blocks with distinct salts plant independent components; a set of
    R salted 2-way entries between two blocks is a rank-R bilinear cross.
    """

    blocks: tuple[str, ...]
    strength: float
    salt: int = 0

    def to_json_dict(self) -> dict:
        return {"blocks": list(self.blocks), "strength": self.strength,
                "salt": self.salt}


@dataclass(frozen=True)
class GeneratorConfig:
    schema: FeatureSchema
    seed: int
    n_records: int
    interactions: tuple[InteractionSpec, ...]
    base_logit: float = 0.0
    noise: float = 0.0
    seq_len_low: int = 1
    seq_len_high: int | None = None

    def validate(self) -> None:
        self.schema.validate()
        if self.n_records < 1:
            raise ConfigError("n_records must be >= 1")
        if not 0.0 <= self.noise < 0.5:
            raise ConfigError(f"noise flip probability {self.noise} not in [0, 0.5)")
        names = {b.name for b in self.schema.blocks}
        if "label" in names:
            raise ConfigError("'label' is reserved and cannot name a block")
        for spec in self.interactions:
            if not 1 <= len(spec.blocks) <= 3:
                raise ConfigError(
                    f"interactions must involve 1-3 blocks, got {spec.blocks}"
                )
            if len(set(spec.blocks)) != len(spec.blocks):
                raise ConfigError(f"repeated block in interaction {spec.blocks}")
            missing = set(spec.blocks) - names
            if missing:
                raise ConfigError(
                    f"interaction references unknown blocks {sorted(missing)}"
                )
        for spec in self.schema.blocks:
            if spec.kind == ft.SEQUENCE:
                low, high = self._seq_bounds(spec)
                if not 0 <= low <= high <= spec.max_seq_len:
                    raise ConfigError(
                        f"sequence length bounds [{low}, {high}] invalid for "
                        f"block {spec.name!r} (max {spec.max_seq_len})"
                    )

    def _seq_bounds(self, spec: ft.BlockSpec) -> tuple[int, int]:
        high = self.seq_len_high if self.seq_len_high is not None \
            else spec.max_seq_len
        return self.seq_len_low, min(high, spec.max_seq_len)

    def to_json_dict(self) -> dict:
        return {
            "schema": self.schema.to_json_dict(),
            "seed": self.seed,
            "n_records": self.n_records,
            "interactions": [i.to_json_dict() for i in self.interactions],
            "base_logit": self.base_logit,
            "noise": self.noise,
            "seq_len_low": self.seq_len_low,
            "seq_len_high": self.seq_len_high,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "GeneratorConfig":
        config = GeneratorConfig(
            schema=FeatureSchema.from_json_dict(obj["schema"]),
            seed=int(obj["seed"]),
            n_records=int(obj["n_records"]),
            interactions=tuple(
                InteractionSpec(tuple(i["blocks"]), float(i["strength"]))
                for i in obj.get("interactions", [])
            ),
            base_logit=float(obj.get("base_logit", 0.0)),
            noise=float(obj.get("noise", 0.0)),
            seq_len_low=int(obj.get("seq_len_low", 1)),
            seq_len_high=(
                int(obj["seq_len_high"])
                if obj.get("seq_len_high") is not None
                else None
            ),
        )
        config.validate()
        return config


class GroundTruth:
    """Closed-form click probability implied by a GeneratorConfig."""

    def __init__(self, config: GeneratorConfig) -> None:
        config.validate()
        self.config = config
        self.schema = config.schema
        self._signs: dict[tuple[str, int], np.ndarray] = {}
        salts = {spec.salt for spec in config.interactions} | {0}
        for block in self.schema.blocks:
            if block.kind in (ft.CATEGORICAL, ft.SEQUENCE):
                for salt in salts:
                    self._signs[(block.name, salt)] = _balanced_signs(
                        block.name, salt, block.vocab_sizes[0]
                    )

    def block_sign(self, name: str, record: ExampleRecord, salt: int = 0) -> int:
        """Sign of one block's leading raw value under one salt.

        Continuous blocks use the sign of their first coordinate and ignore
        the salt; empty sequences are +1 by convention.
        """
        spec = self.schema.block(name)
        values = record.blocks[name]
        if spec.kind == ft.CONTINUOUS:
            return 1 if values[0] >= 0 else -1
        if spec.kind == ft.SEQUENCE and not values:
            return 1
        return int(self._signs[(name, salt)][int(values[0])])

    def logit(self, record: ExampleRecord) -> float:
        total = self.config.base_logit
        for spec in self.config.interactions:
            product = 1
            for name in spec.blocks:
                product *= self.block_sign(name, record, spec.salt)
            total += spec.strength * product
        return total

    def p_star(self, record: ExampleRecord) -> float:
        """Pre-noise click probability in (0, 1)."""
        z = self.logit(record)
        if z >= 0:
            return 1.0 / (1.0 + np.exp(-z))
        e = np.exp(z)
        return float(e / (1.0 + e))

    def p_observed(self, record: ExampleRecord) -> float:
        """Click probability after label flipping."""
        noise = self.config.noise
        return noise + (1.0 - 2.0 * noise) * self.p_star(record)

    def _sign_patterns(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Joint distribution of one block's signs across all interactions.

        Returns (patterns, weights): patterns[i, j] is the block's sign under
        interaction j at support point i, weights[i] its probability. Support
        points with equal sign vectors are merged, so the grid enumerated by
        mean_p_star stays small even for large vocabularies.
        """
        spec = self.schema.block(name)
        interactions = self.config.interactions
        k = len(interactions)
        if spec.kind == ft.CONTINUOUS:
            patterns = np.array([[1] * k, [-1] * k], dtype=np.int64)
            return patterns, np.array([0.5, 0.5])
        vocab = spec.vocab_sizes[0]
        rows = np.ones((vocab, k), dtype=np.int64)
        for j, inter in enumerate(interactions):
            if name in inter.blocks:
                rows[:, j] = self._signs[(name, inter.salt)]
        weights = np.full(vocab, 1.0 / vocab)
        if spec.kind == ft.SEQUENCE:
            low, high = self.config._seq_bounds(spec)
            if low == 0:
                p_empty = 1.0 / (high - low + 1)
                rows = np.vstack([rows, np.ones((1, k), dtype=np.int64)])
                weights = np.concatenate(
                    [weights * (1.0 - p_empty), [p_empty]]
                )
        patterns, inverse = np.unique(rows, axis=0, return_inverse=True)
        merged = np.zeros(len(patterns))
        np.add.at(merged, inverse, weights)
        return patterns, merged

    def mean_p_star(self) -> float:
        """E[p*] by exact enumeration over merged per-block sign patterns."""
        names = sorted({n for i in self.config.interactions for n in i.blocks})
        if not names:
            return float(1.0 / (1.0 + np.exp(-self.config.base_logit)))
        per_block = {n: self._sign_patterns(n) for n in names}
        m = len(names)
        grid_shape = [len(per_block[n][1]) for n in names]
        z = np.full(grid_shape, float(self.config.base_logit))
        for j, inter in enumerate(self.config.interactions):
            term = np.asarray(inter.strength, dtype=np.float64)
            for axis, name in enumerate(names):
                if name not in inter.blocks:
                    continue
                col = per_block[name][0][:, j].astype(np.float64)
                shape = [1] * m
                shape[axis] = len(col)
                term = term * col.reshape(shape)
            z = z + term
        weight = np.ones(grid_shape)
        for axis, name in enumerate(names):
            w = per_block[name][1]
            shape = [1] * m
            shape[axis] = len(w)
            weight = weight * w.reshape(shape)
        return float((weight / (1.0 + np.exp(-z))).sum())

    def mean_p_observed(self) -> float:
        noise = self.config.noise
        return noise + (1.0 - 2.0 * noise) * self.mean_p_star()


def _sample_record(config: GeneratorConfig, index: int,
                   gt: GroundTruth) -> ExampleRecord:
    rng = np.random.default_rng([config.seed, index])
    blocks: dict[str, list] = {}
    for spec in config.schema.blocks:
        if spec.kind == ft.CATEGORICAL:
            blocks[spec.name] = [int(rng.integers(0, v)) for v in spec.vocab_sizes]
        elif spec.kind == ft.CONTINUOUS:
            blocks[spec.name] = [
                float(x) for x in rng.standard_normal(spec.cont_dim)
            ]
        else:
            low, high = config._seq_bounds(spec)
            length = int(rng.integers(low, high + 1))
            blocks[spec.name] = [
                int(rng.integers(0, spec.vocab_sizes[0])) for _ in range(length)
            ]
    record = ExampleRecord(blocks=blocks, label=0)
    label = int(rng.uniform() < gt.p_star(record))
    if rng.uniform() < config.noise:
        label = 1 - label
    record.label = label
    return record


def _is_eval_index(index: int) -> bool:
    digest = hashlib.blake2b(
        index.to_bytes(8, "little", signed=False), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") % 10 == 0


@dataclass
class Dataset:
    """Generated or loaded records plus their 90/10 index-hash split."""

    schema: FeatureSchema
    records: list[ExampleRecord]
    generator: GeneratorConfig
    ground_truth: GroundTruth
    train_indices: np.ndarray = field(repr=False, default=None)
    eval_indices: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        if self.train_indices is None:
            flags = np.fromiter(
                (_is_eval_index(i) for i in range(len(self.records))),
                dtype=bool, count=len(self.records),
            )
            self.eval_indices = np.nonzero(flags)[0]
            self.train_indices = np.nonzero(~flags)[0]

    @property
    def train_records(self) -> list[ExampleRecord]:
        return [self.records[i] for i in self.train_indices]

    @property
    def eval_records(self) -> list[ExampleRecord]:
        return [self.records[i] for i in self.eval_indices]


def generate_dataset(config: GeneratorConfig) -> Dataset:
    """Draw the full dataset in memory; deterministic per seed."""
    config.validate()
    gt = GroundTruth(config)
    records = [
        _sample_record(config, i, gt) for i in range(config.n_records)
    ]
    return Dataset(config.schema, records, config, gt)


def _record_to_json(record: ExampleRecord) -> str:
    payload = dict(sorted(record.blocks.items()))
    payload["label"] = record.label
    return json.dumps(payload, separators=(",", ":"))


def _record_from_json(line: str, schema: FeatureSchema) -> ExampleRecord:
    obj = json.loads(line)
    label = obj.pop("label")
    return ExampleRecord(blocks={b.name: obj[b.name] for b in schema.blocks},
                         label=int(label))


def write_dataset(dataset: Dataset, out_dir) -> tuple[Path, Path]:
    """Emit header.json + records.jsonl (UTF-8, LF); byte-stable per config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "format": _FORMAT,
        "version": _VERSION,
        "generator": dataset.generator.to_json_dict(),
        "counts": {
            "total": len(dataset.records),
            "train": int(len(dataset.train_indices)),
            "eval": int(len(dataset.eval_indices)),
        },
    }
    header_path = out / HEADER_NAME
    with open(header_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    records_path = out / RECORDS_NAME
    with open(records_path, "w", encoding="utf-8", newline="\n") as fh:
        for record in dataset.records:
            fh.write(_record_to_json(record))
            fh.write("\n")
    return header_path, records_path


def generate(config: GeneratorConfig, out_dir) -> Dataset:
    dataset = generate_dataset(config)
    write_dataset(dataset, out_dir)
    return dataset


def load_dataset(path) -> Dataset:
    """Read a dataset directory back; the header echo rebuilds the oracle."""
    root = Path(path)
    header_path = root / HEADER_NAME
    if not header_path.exists():
        raise ConfigError(f"no dataset header at {header_path}")
    with open(header_path, encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("format") != _FORMAT or header.get("version") != _VERSION:
        raise ConfigError(f"{header_path}: not a {_FORMAT} v{_VERSION} header")
    config = GeneratorConfig.from_json_dict(header["generator"])
    records = []
    with open(root / RECORDS_NAME, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(_record_from_json(line, config.schema))
    if len(records) != header["counts"]["total"]:
        raise ConfigError(
            f"{root}: header promises {header['counts']['total']} records, "
            f"file holds {len(records)}"
        )
    return Dataset(config.schema, records, config, GroundTruth(config))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def bayes_auc(ground_truth: GroundTruth, eval_records: list[ExampleRecord]) -> float:
    """AUC of scoring records by their exact pre-noise click probability.

    In expectation this upper-bounds any learned model evaluated on the
    same records, because the flipped label is still monotone in p*.
    """
    from .training import auc  # local import keeps module layers acyclic

    scores = np.empty(len(eval_records))
    labels = np.empty(len(eval_records), dtype=np.int64)
    for i, record in enumerate(eval_records):
        try:
            ft.validate_record(record, ground_truth.schema)
        except (Exception,) as exc:
            raise OracleError(
                f"record {i} does not conform to the oracle's schema: {exc}"
            ) from None
        scores[i] = ground_truth.p_star(record)
        labels[i] = record.label
    return auc(scores, labels)


def single_feature_auc(
    block_name: str,
    train_records: list[ExampleRecord],
    eval_records: list[ExampleRecord],
    schema: FeatureSchema,
) -> float:
    """AUC of the best single-block scorer: empirical rate per leading value.

    Used to demonstrate that a pure high-order interaction leaves no
    marginal signal in any one block.
    """
    from .training import auc

    spec = schema.block(block_name)

    def key(record: ExampleRecord):
        values = record.blocks[block_name]
        if spec.kind == ft.CONTINUOUS:
            return values[0] >= 0
        if spec.kind == ft.SEQUENCE:
            return int(values[0]) if values else -1
        return int(values[0])

    sums: dict = {}
    counts: dict = {}
    total = 0.0
    for record in train_records:
        k = key(record)
        sums[k] = sums.get(k, 0.0) + record.label
        counts[k] = counts.get(k, 0) + 1
        total += record.label
    global_rate = total / max(len(train_records), 1)
    scores = np.array(
        [
            sums[k] / counts[k] if (k := key(r)) in counts else global_rate
            for r in eval_records
        ]
    )
    labels = np.array([r.label for r in eval_records], dtype=np.int64)
    return auc(scores, labels)
