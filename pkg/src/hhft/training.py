"""Initialization schemes, loss, optimizer, metrics, and the training loop.

Everything is deterministic given (seed, config, dataset): initialization
draws from one seeded generator in parameter declaration order, shuffling
uses its own seeded generator, and evaluation metrics are pure functions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import features as ft
from .autodiff import Tape, Tensor, _sigmoid_stable
from .errors import ConfigError, ContractError, DataError, MetricError
from .models import ModelConfig, RankingModel, build_from_source, save_checkpoint

XAVIER_UNIFORM = "xavier-uniform"
XAVIER_NORMAL = "xavier-normal"
TRUNCATED_NORMAL = "truncated-normal"
ZEROS_RESIDUAL_OUT = "zeros-residual-out"

_SCHEME_KINDS = (XAVIER_UNIFORM, XAVIER_NORMAL, TRUNCATED_NORMAL, ZEROS_RESIDUAL_OUT)


@dataclass(frozen=True)
class InitScheme:
    """Weight initialization recipe, fully determined by (kind, seed).

    `overrides` maps a parameter group name (weight, residual-out, head-out,
    embedding) to a different kind for that group. Norm gains are always 1,
    biases always 0, embedding tables default to truncated-normal(emb_sigma).
    """

    kind: str = XAVIER_UNIFORM
    seed: int = 0
    sigma: float = 0.02
    emb_sigma: float = 0.1
    overrides: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in _SCHEME_KINDS:
            raise ConfigError(f"unknown init scheme {self.kind!r}")
        for group, kind in self.overrides.items():
            if kind not in (*_SCHEME_KINDS, "zeros"):
                raise ConfigError(f"unknown override {kind!r} for group {group!r}")

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "sigma": self.sigma,
            "emb_sigma": self.emb_sigma,
            "overrides": dict(self.overrides),
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "InitScheme":
        scheme = InitScheme(
            kind=obj.get("kind", XAVIER_UNIFORM),
            seed=int(obj.get("seed", 0)),
            sigma=float(obj.get("sigma", 0.02)),
            emb_sigma=float(obj.get("emb_sigma", 0.1)),
            overrides=dict(obj.get("overrides", {})),
        )
        scheme.validate()
        return scheme


def _truncated_normal(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Normal draw, resampling anything beyond two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * sigma


class SchemeInitializer:
    """TensorSource drawing parameters from a seeded generator in call order."""

    def __init__(self, scheme: InitScheme, dtype=np.float64) -> None:
        scheme.validate()
        self.scheme = scheme
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(scheme.seed)

    def _draw(self, kind: str, shape: tuple[int, ...], sigma: float) -> np.ndarray:
        if kind == "zeros":
            return np.zeros(shape)
        if kind == TRUNCATED_NORMAL:
            return _truncated_normal(self.rng, shape, sigma)
        fan_in, fan_out = shape[0], shape[-1]
        if kind == XAVIER_UNIFORM:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            return self.rng.uniform(-bound, bound, shape)
        if kind == XAVIER_NORMAL:
            return self.rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), shape)
        raise ConfigError(f"unknown init kind {kind!r}")

    def tensor(self, name: str, shape: tuple[int, ...], group: str) -> Tensor:
        if group == "norm-gain":
            arr = np.ones(shape)
        elif group in ("bias", "norm-bias"):
            arr = np.zeros(shape)
        elif group == "embedding":
            kind = self.scheme.overrides.get(group, TRUNCATED_NORMAL)
            arr = self._draw(kind, shape, self.scheme.emb_sigma)
        else:
            kind = self.scheme.overrides.get(group)
            if kind is None:
                if self.scheme.kind == ZEROS_RESIDUAL_OUT:
                    kind = "zeros" if group in ("residual-out", "head-out") \
                        else XAVIER_UNIFORM
                else:
                    kind = self.scheme.kind
            arr = self._draw(kind, shape, self.scheme.sigma)
        return Tensor(arr.astype(self.dtype), grad_enabled=True)


def build_model(config: ModelConfig, scheme: InitScheme,
                dtype=np.float64) -> RankingModel:
    """Construct and initialize a model; bit-identical for identical inputs."""
    return build_from_source(config, SchemeInitializer(scheme, dtype))


def init_params(config: ModelConfig, scheme: InitScheme,
                dtype=np.float64) -> dict[str, Tensor]:
    """Initialized parameter set keyed by name, in declaration order."""
    return dict(build_model(config, scheme, dtype).named_params())


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on logits via the softplus identity.

    loss_i = softplus(z_i) - y_i * z_i, safe for |z| up to hundreds.
    """
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if y.shape != logits.shape:
        raise ContractError(f"labels shape {y.shape} != logits {logits.shape}")
    if not np.isin(y, (0, 1)).all():
        bad = y[~np.isin(y, (0, 1))][0]
        raise DataError(f"labels must be 0 or 1, found {bad!r}")
    y = Tensor(y.astype(logits.dtype))
    return ad.mean_axis(ad.sub(ad.softplus(logits), ad.mul(logits, y)))


@dataclass
class OptimizerState:
    """Adam moments mirroring the parameter list, plus hyperparameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "OptimizerState":
        return OptimizerState(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            step=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state: OptimizerState,
              lr_t: float | None = None) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if len(params) != len(state.m):
        raise ContractError("optimizer state does not match parameter list")
    lr = state.lr if lr_t is None else lr_t
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        gd = g.data if isinstance(g, Tensor) else np.asarray(g)
        if gd.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {gd.shape} != parameter shape {p.data.shape}"
            )
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * gd
        v *= b2
        v += (1.0 - b2) * gd * gd
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.data.dtype, copy=False
        )


def lr_at(config: "TrainConfig", step: int, total_steps: int) -> float:
    """Learning rate for a 0-based step index."""
    if config.schedule == "constant":
        return config.lr
    warmup = max(1, round(config.warmup_frac * total_steps))
    if step < warmup:
        return config.lr * (step + 1) / warmup
    decay_span = max(1, total_steps - warmup)
    return config.lr * max(0.0, (total_steps - step) / decay_span)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties at 1/2.

    Computed with average tie ranks (Mann-Whitney), O(N log N).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ContractError(f"scores {s.shape} and labels {y.shape} must be 1-d")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives"
        )
    order = np.argsort(s, kind="mergesort")
    ordered = s[order]
    n = len(s)
    change = np.nonzero(np.diff(ordered) != 0)[0] + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [n]))
    # tie group occupying sorted slots [s, e) gets the average rank (s+1+e)/2
    group_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(group_rank, ends - starts)
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(probs, labels, clip: float = 1e-12) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), clip, 1.0 - clip)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 3
    lr: float = 3e-3
    schedule: str = "warmup-linear-decay"
    warmup_frac: float = 0.05
    seed: int = 0
    precision: str = "f64"
    eval_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigError(f"sizes must be positive: {self}")
        if self.schedule not in ("constant", "warmup-linear-decay"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac out of range: {self.warmup_frac}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64: {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_json_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "lr": self.lr,
            "schedule": self.schedule,
            "warmup_frac": self.warmup_frac,
            "seed": self.seed,
            "precision": self.precision,
            "eval_every": self.eval_every,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "TrainConfig":
        config = TrainConfig(**{
            key: obj[key] for key in TrainConfig.__dataclass_fields__
            if key in obj
        })
        config.validate()
        return config


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    eval_auc: float | None
    eval_logloss: float | None
    seconds: float


@dataclass
class RunReport:
    """Metrics of one training run; timing fields are serialized separately."""

    config_echo: dict
    seed: int
    epochs: list[EpochRow]
    final_auc: float
    final_logloss: float
    best_auc: float
    best_epoch: int
    optimizer_steps: int
    dense_params: int
    embedding_params: int
    flops_per_record: int
    wall_seconds: float

    def to_json_dict(self) -> dict:
        """Deterministic report body: no wall-clock fields."""
        return {
            "config": self.config_echo,
            "seed": self.seed,
            "epochs": [
                {
                    "epoch": row.epoch,
                    "train_loss": row.train_loss,
                    "eval_auc": row.eval_auc,
                    "eval_logloss": row.eval_logloss,
                }
                for row in self.epochs
            ],
            "final_auc": self.final_auc,
            "final_logloss": self.final_logloss,
            "best_auc": self.best_auc,
            "best_epoch": self.best_epoch,
            "optimizer_steps": self.optimizer_steps,
            "dense_params": self.dense_params,
            "embedding_params": self.embedding_params,
            "flops_per_record": self.flops_per_record,
        }

    def timing_json_dict(self) -> dict:
        return {
            "wall_seconds": self.wall_seconds,
            "epoch_seconds": [row.seconds for row in self.epochs],
        }


def predict_scores(model: RankingModel, encoded: ft.EncodedBatch,
                   batch_size: int = 4096) -> np.ndarray:
    """Untracked batched forward; returns click probabilities as numpy."""
    out = np.empty(encoded.size, dtype=np.float64)
    for start in range(0, encoded.size, batch_size):
        idx = np.arange(start, min(start + batch_size, encoded.size))
        logits = model.forward(encoded.select(idx)).data
        out[idx] = _sigmoid_stable(logits.astype(np.float64))
    return out


def train(
    model: RankingModel,
    dataset,
    config: TrainConfig,
    checkpoint_path=None,
    extra_echo: dict | None = None,
) -> RunReport:
    """Full training run over `dataset.train_records` / `dataset.eval_records`.

    Shuffling is fixed by config.seed. Evaluates AUC/logloss on the eval
    split every `eval_every` epochs and always on the last one; tracks the
    best eval AUC and optionally checkpoints that model.
    """
    config.validate()
    start_time = time.perf_counter()
    train_enc = ft.encode_records(dataset.train_records, model.schema,
                                  dtype=model.dtype)
    eval_enc = ft.encode_records(dataset.eval_records, model.schema,
                                 dtype=model.dtype)
    params = model.param_tensors()
    state = OptimizerState.for_params(
        params, config.lr, config.beta1, config.beta2, config.adam_eps
    )
    rng = np.random.default_rng(config.seed)
    n = train_enc.size
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs

    rows: list[EpochRow] = []
    best_auc = -1.0
    best_epoch = -1
    final_auc = float("nan")
    final_logloss = float("nan")
    for epoch in range(config.epochs):
        epoch_start = time.perf_counter()
        perm = rng.permutation(n)
        loss_sum = 0.0
        for step in range(steps_per_epoch):
            idx = perm[step * config.batch_size : (step + 1) * config.batch_size]
            batch = train_enc.select(idx)
            with Tape() as tape:
                logits = model.forward(batch)
                loss = bce_loss(logits, batch.labels)
            grads = tape.gradient(loss, params)
            adam_step(params, grads, state,
                      lr_at(config, state.step, total_steps))
            loss_sum += float(loss.data) * len(idx)
        train_loss = loss_sum / n

        is_last = epoch == config.epochs - 1
        if (epoch + 1) % config.eval_every == 0 or is_last:
            scores = predict_scores(model, eval_enc)
            eval_auc = auc(scores, eval_enc.labels.astype(np.int64))
            eval_ll = logloss(scores, eval_enc.labels)
            if eval_auc > best_auc:
                best_auc = eval_auc
                best_epoch = epoch
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
            if is_last:
                final_auc, final_logloss = eval_auc, eval_ll
        else:
            eval_auc = None
            eval_ll = None
        rows.append(
            EpochRow(epoch, train_loss, eval_auc, eval_ll,
                     time.perf_counter() - epoch_start)
        )

    counts = model.param_count()
    echo = {"model": model.config_echo(), "train": config.to_json_dict()}
    if extra_echo:
        echo.update(extra_echo)
    return RunReport(
        config_echo=echo,
        seed=config.seed,
        epochs=rows,
        final_auc=final_auc,
        final_logloss=final_logloss,
        best_auc=best_auc,
        best_epoch=best_epoch,
        optimizer_steps=state.step,
        dense_params=counts["dense"],
        embedding_params=counts["embedding"],
        flops_per_record=model.flops_estimate(batch_size=1),
        wall_seconds=time.perf_counter() - start_time,
    )
