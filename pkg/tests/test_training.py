"""Initialization, loss, optimizer, AUC, and training-loop behavior."""

import math
import types

import numpy as np
import numpy.testing as npt
import pytest

import hhft.autodiff as ad
import hhft.features as ft
import hhft.training as tr
from hhft.autodiff import Tensor, grad_check
from hhft.errors import ConfigError, DataError, MetricError
from test_models import make_config, make_records, make_schema


class TestInitSchemes:
    def test_same_seed_bit_identical(self):
        config = make_config()
        a = tr.init_params(config, tr.InitScheme(seed=5))
        b = tr.init_params(config, tr.InitScheme(seed=5))
        for name in a:
            npt.assert_array_equal(a[name].data, b[name].data)

    def test_different_seed_differs(self):
        config = make_config()
        a = tr.init_params(config, tr.InitScheme(seed=5))
        b = tr.init_params(config, tr.InitScheme(seed=6))
        assert any(
            np.any(a[name].data != b[name].data)
            for name in a
            if a[name].data.std() > 0
        )

    def test_xavier_uniform_bound(self):
        # fan_in = fan_out = 4: bound is sqrt(6/8)
        bound = math.sqrt(6.0 / 8.0)
        init = tr.SchemeInitializer(tr.InitScheme(kind="xavier-uniform", seed=0))
        draws = np.concatenate(
            [init.tensor(f"w{i}", (4, 4), "weight").data.ravel()
             for i in range(200)]
        )
        assert np.abs(draws).max() <= bound
        assert np.abs(draws).max() > 0.95 * bound

    def test_xavier_normal_scale(self):
        init = tr.SchemeInitializer(tr.InitScheme(kind="xavier-normal", seed=0))
        draws = np.concatenate(
            [init.tensor(f"w{i}", (16, 16), "weight").data.ravel()
             for i in range(50)]
        )
        npt.assert_allclose(draws.std(), math.sqrt(2.0 / 32.0), rtol=0.05)

    def test_truncated_normal_clipped(self):
        sigma = 0.3
        init = tr.SchemeInitializer(
            tr.InitScheme(kind="truncated-normal", sigma=sigma, seed=0)
        )
        draws = init.tensor("w", (64, 64), "weight").data
        assert np.abs(draws).max() <= 2.0 * sigma
        npt.assert_allclose(draws.std(), sigma, rtol=0.2)

    def test_norm_and_bias_defaults(self):
        init = tr.SchemeInitializer(tr.InitScheme(seed=0))
        npt.assert_array_equal(init.tensor("g", (4,), "norm-gain").data, np.ones(4))
        npt.assert_array_equal(init.tensor("b", (4,), "bias").data, np.zeros(4))

    def test_zeros_residual_out_silences_backbone(self):
        scheme = tr.InitScheme(kind="zeros-residual-out", seed=3)
        for variant, n1, n2 in [("hhft", 1, 1), ("hhft", 2, 0),
                                ("shared-transformer", 2, 0)]:
            model = tr.build_model(make_config(variant, n1=n1, n2=n2), scheme)
            rng = np.random.default_rng(7)
            records = make_records(rng, model.schema, 4)
            npt.assert_array_equal(model.forward(records).data, np.zeros(4))

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ConfigError, match="unknown init scheme"):
            tr.InitScheme(kind="glorp").validate()


class TestBceLoss:
    def test_zero_logit_label_one(self):
        loss = tr.bce_loss(Tensor([0.0], grad_enabled=True), np.array([1]))
        npt.assert_allclose(loss.data, math.log(2.0), rtol=1e-14)

    def test_saturated_logit_no_overflow(self):
        loss = tr.bce_loss(Tensor([100.0]), np.array([1]))
        assert 0.0 <= float(loss.data) < 1e-40

    def test_closed_form_pair(self):
        loss = tr.bce_loss(Tensor([1.0, -1.0]), np.array([1, 0]))
        expected = math.log(1.0 + math.exp(-1.0))
        npt.assert_allclose(float(loss.data), expected, rtol=1e-14)

    def test_non_binary_label_rejected(self):
        with pytest.raises(DataError, match="0 or 1"):
            tr.bce_loss(Tensor([0.0]), np.array([2]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.uniform(-3, 3, 8), grad_enabled=True)
        labels = rng.integers(0, 2, 8)

        def f():
            return tr.bce_loss(logits, labels)

        rep = grad_check(f, [logits], step=1e-6, tol=1e-6)
        assert rep.passed, str(rep)


class TestAdam:
    def params(self, rng):
        return [Tensor(rng.standard_normal((3, 2)), grad_enabled=True),
                Tensor(rng.standard_normal(4), grad_enabled=True)]

    def test_zero_gradient_keeps_params(self):
        rng = np.random.default_rng(1)
        params = self.params(rng)
        before = [p.data.copy() for p in params]
        state = tr.OptimizerState.for_params(params, lr=0.1)
        grads = [Tensor(np.zeros_like(p.data)) for p in params]
        tr.adam_step(params, grads, state)
        assert state.step == 1
        for p, b in zip(params, before):
            npt.assert_array_equal(p.data, b)

    def test_first_step_closed_form_beta_zero(self):
        rng = np.random.default_rng(2)
        params = self.params(rng)
        before = [p.data.copy() for p in params]
        grads = [Tensor(rng.standard_normal(p.shape)) for p in params]
        state = tr.OptimizerState.for_params(params, lr=0.05, beta1=0.0, beta2=0.0)
        tr.adam_step(params, grads, state)
        for p, b, g in zip(params, before, grads):
            expected = b - 0.05 * g.data / (np.abs(g.data) + state.eps)
            npt.assert_allclose(p.data, expected, rtol=1e-12)

    def test_trajectory_determinism(self):
        def run():
            rng = np.random.default_rng(3)
            params = self.params(rng)
            state = tr.OptimizerState.for_params(params, lr=0.01)
            for step in range(5):
                grads = [Tensor(rng.standard_normal(p.shape)) for p in params]
                tr.adam_step(params, grads, state)
            return [p.data.copy() for p in params]

        for a, b in zip(run(), run()):
            npt.assert_array_equal(a, b)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        params = self.params(rng)
        state = tr.OptimizerState.for_params(params, lr=0.1)
        grads = [Tensor(np.zeros((2, 3))), Tensor(np.zeros(4))]
        with pytest.raises(Exception, match="shape"):
            tr.adam_step(params, grads, state)


class TestLrSchedule:
    def test_constant(self):
        config = tr.TrainConfig(lr=0.5, schedule="constant")
        assert tr.lr_at(config, 0, 100) == 0.5
        assert tr.lr_at(config, 99, 100) == 0.5

    def test_warmup_then_decay(self):
        config = tr.TrainConfig(lr=1.0, schedule="warmup-linear-decay",
                                warmup_frac=0.1)
        total = 100
        lrs = [tr.lr_at(config, s, total) for s in range(total)]
        assert lrs[0] == pytest.approx(0.1)
        assert lrs[9] == pytest.approx(1.0)
        assert max(lrs) == pytest.approx(1.0)
        assert lrs[-1] < 0.02
        assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))  # monotone decay


def pairwise_auc(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = float((pos[:, None] > neg[None, :]).sum())
    ties = float((pos[:, None] == neg[None, :]).sum())
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


class TestAuc:
    def test_worked_example(self):
        assert tr.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_ordering(self):
        assert tr.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert tr.auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(MetricError, match="undefined"):
            tr.auc([0.1, 0.2], [1, 1])

    def test_matches_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(5)
        for trial in range(50):
            n = int(rng.integers(2, 400))
            # coarse grid forces plenty of ties
            scores = rng.integers(0, 7, n) / 7.0
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert tr.auc(scores, labels) == pairwise_auc(scores, labels), trial

    def test_invariant_under_increasing_transforms(self):
        rng = np.random.default_rng(6)
        scores = rng.standard_normal(200)
        labels = rng.integers(0, 2, 200)
        labels[0], labels[1] = 0, 1
        base = tr.auc(scores, labels)
        assert tr.auc(np.exp(scores), labels) == base
        assert tr.auc(3.0 * scores + 11.0, labels) == base


def toy_dataset(schema, rng, n_train, n_eval=None, separable=True):
    """Labels follow one categorical field when separable."""
    records = make_records(rng, schema, n_train + (n_eval or 0))
    if separable:
        vocab = schema.blocks[0].vocab_sizes[0]
        for r in records:
            r.label = int(r.blocks[schema.blocks[0].name][0] >= vocab // 2)
    train = records[:n_train]
    evals = records[n_train:] if n_eval else list(train)
    return types.SimpleNamespace(schema=schema, train_records=train,
                                 eval_records=evals)


class TestTrainLoop:
    def test_zero_lr_leaves_params_and_auc(self):
        config = make_config("mlp")
        model = tr.build_model(config, tr.InitScheme(seed=0))
        rng = np.random.default_rng(7)
        data = toy_dataset(config.schema, rng, 20)
        before = [p.data.copy() for p in model.param_tensors()]
        eval_enc = ft.encode_records(data.eval_records, model.schema)
        init_auc = tr.auc(tr.predict_scores(model, eval_enc),
                          eval_enc.labels.astype(int))
        report = tr.train(model, data,
                          tr.TrainConfig(batch_size=8, epochs=2, lr=0.0, seed=0))
        for p, b in zip(model.param_tensors(), before):
            npt.assert_array_equal(p.data, b)
        assert report.final_auc == init_auc

    def test_step_bookkeeping(self):
        config = make_config("mlp")
        model = tr.build_model(config, tr.InitScheme(seed=1))
        rng = np.random.default_rng(8)
        data = toy_dataset(config.schema, rng, 10)
        report = tr.train(model, data,
                          tr.TrainConfig(batch_size=4, epochs=1, lr=1e-3, seed=0))
        assert report.optimizer_steps == math.ceil(10 / 4)
        assert len(report.epochs) == 1

    def test_separable_toy_reaches_perfect_auc(self):
        schema = make_schema(seq=False)
        config = make_config("mlp", schema=schema, head=(8,))
        model = tr.build_model(config, tr.InitScheme(seed=2))
        rng = np.random.default_rng(9)
        data = toy_dataset(schema, rng, 48)
        report = tr.train(
            model, data,
            tr.TrainConfig(batch_size=16, epochs=50, lr=0.02,
                           schedule="constant", seed=0),
        )
        assert report.best_auc == 1.0
        assert report.best_epoch < 50

    def test_bit_reproducible_reports(self):
        config = make_config("hhft")
        rng = np.random.default_rng(10)
        data = toy_dataset(config.schema, rng, 24, separable=False)
        tc = tr.TrainConfig(batch_size=8, epochs=2, lr=3e-3, seed=4)

        def run():
            model = tr.build_model(config, tr.InitScheme(seed=4))
            return tr.train(model, data, tc).to_json_dict()

        assert run() == run()

    def test_best_checkpoint_written(self, tmp_path):
        config = make_config("mlp")
        model = tr.build_model(config, tr.InitScheme(seed=3))
        rng = np.random.default_rng(11)
        data = toy_dataset(config.schema, rng, 20)
        path = tmp_path / "best.ckpt"
        tr.train(model, data,
                 tr.TrainConfig(batch_size=8, epochs=2, lr=1e-2, seed=0),
                 checkpoint_path=path)
        assert path.exists()

    def test_eval_cadence(self):
        config = make_config("mlp")
        model = tr.build_model(config, tr.InitScheme(seed=5))
        rng = np.random.default_rng(12)
        data = toy_dataset(config.schema, rng, 12)
        report = tr.train(
            model, data,
            tr.TrainConfig(batch_size=6, epochs=3, lr=1e-3, seed=0, eval_every=2),
        )
        assert report.epochs[0].eval_auc is None
        assert report.epochs[1].eval_auc is not None
        assert report.epochs[2].eval_auc is not None  # final epoch always evals

    def test_f32_precision_mode(self):
        config = make_config("mlp")
        tc = tr.TrainConfig(batch_size=8, epochs=1, lr=1e-3, seed=0,
                            precision="f32")
        model = tr.build_model(config, tr.InitScheme(seed=6), dtype=tc.dtype)
        assert model.dtype == np.float32
        rng = np.random.default_rng(13)
        data = toy_dataset(config.schema, rng, 16)
        report = tr.train(model, data, tc)
        assert np.isfinite(report.final_auc)
