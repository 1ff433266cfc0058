"""Metrics, the optimizer, the training loop, and the sweep drivers.
Optimizer steps are checked against an independent reference update."""

import csv
import io

import numpy as np
import pytest

from trifuse.data import synth_generate
from trifuse.fusion import FusionConfig
from trifuse.model import Model, ModelConfig
from trifuse.tensor import Tensor
from trifuse.train import (
    COMPARISON_STRATEGIES,
    REPORT_COLUMNS,
    Adam,
    Metrics,
    MissingGradientError,
    TrainConfig,
    all_ablation_toggles,
    compare_fusions,
    evaluate,
    render_csv,
    render_table,
    run_ablation,
    train,
)


def tiny_dataset(n=60, seed=0, separation=3.0, weight=0.3):
    return synth_generate(
        n, class_separation=separation, cross_modal_weight=weight, seed=seed
    )


def tiny_config(**overrides):
    defaults = dict(epochs=2, batch_size=16, seed=0)
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestMetrics:
    def test_hand_computed_counts(self):
        m = Metrics.from_counts(tp=3, fp=1, tn=4, fn=2)
        assert m.accuracy == pytest.approx(0.7)
        assert m.fake_precision == pytest.approx(0.75)
        assert m.fake_recall == pytest.approx(0.6)
        assert m.fake_f1 == pytest.approx(2 / 3)
        assert m.real_precision == pytest.approx(2 / 3)
        assert m.real_recall == pytest.approx(0.8)
        assert m.real_f1 == pytest.approx(8 / 11)

    def test_zero_denominators_score_zero(self):
        m = Metrics.from_counts(tp=0, fp=0, tn=5, fn=0)
        assert m.fake_precision == 0.0
        assert m.fake_recall == 0.0
        assert m.fake_f1 == 0.0
        assert m.real_f1 == 1.0
        assert m.accuracy == 1.0

    def test_no_samples_rejected(self):
        with pytest.raises(ValueError):
            Metrics.from_counts(0, 0, 0, 0)

    def test_from_predictions_matches_loop(self):
        rng = np.random.default_rng(0)
        predicted = rng.integers(0, 2, size=1000)
        labels = rng.integers(0, 2, size=1000)
        m = Metrics.from_predictions(predicted, labels)
        tp = fp = tn = fn = 0
        for p, y in zip(predicted, labels):
            if p == 1 and y == 1:
                tp += 1
            elif p == 1 and y == 0:
                fp += 1
            elif p == 0 and y == 0:
                tn += 1
            else:
                fn += 1
        assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
        assert m.accuracy == pytest.approx((tp + tn) / 1000)

    def test_from_predictions_shape_mismatch(self):
        with pytest.raises(ValueError):
            Metrics.from_predictions(np.zeros(3), np.zeros(4))


def reference_adam(weights, grads_per_step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Straight transcription of bias-corrected Adam on plain floats."""
    w = dict(weights)
    m = {k: np.zeros_like(v) for k, v in w.items()}
    v = {k: np.zeros_like(val) for k, val in w.items()}
    for t, grads in enumerate(grads_per_step, start=1):
        for k in w:
            g = grads[k]
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v[k] = beta2 * v[k] + (1 - beta2) * g * g
            m_hat = m[k] / (1 - beta1 ** t)
            v_hat = v[k] / (1 - beta2 ** t)
            w[k] = w[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return w


class TestAdam:
    def test_multi_step_against_reference(self):
        rng = np.random.default_rng(1)
        start = {
            "a": rng.standard_normal((3, 2)),
            "b": rng.standard_normal(4),
        }
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in start.items()}
        optimizer = Adam(params, lr=0.05)
        grads_per_step = [
            {k: rng.standard_normal(v.shape) for k, v in start.items()}
            for _ in range(10)
        ]
        for grads in grads_per_step:
            for k, p in params.items():
                p.grad = grads[k].copy()
            optimizer.step()
            optimizer.zero_grad()
        expected = reference_adam(start, grads_per_step, lr=0.05)
        for k in start:
            np.testing.assert_allclose(params[k].data, expected[k], rtol=1e-12, atol=1e-12)

    def test_first_step_size_is_about_lr(self):
        # bias correction makes the first update g/|g| scaled by lr
        p = Tensor(np.array([1.0]), requires_grad=True)
        optimizer = Adam({"w": p}, lr=0.1)
        p.grad = np.array([0.5])
        optimizer.step()
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_zero_gradient_is_noop(self):
        p = Tensor(np.array([2.0, -3.0]), requires_grad=True)
        optimizer = Adam({"w": p}, lr=0.1)
        p.grad = np.zeros(2)
        optimizer.step()
        np.testing.assert_array_equal(p.data, [2.0, -3.0])

    def test_missing_gradient_names_parameter(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        optimizer = Adam({"a": a, "b": b})
        a.grad = np.array([1.0])
        with pytest.raises(MissingGradientError, match="'b'"):
            optimizer.step()
        # the failed step must not have touched anything
        np.testing.assert_array_equal(a.data, [1.0])
        assert optimizer.t == 0

    def test_registration_order_does_not_matter(self):
        rng = np.random.default_rng(2)
        data = {k: rng.standard_normal(3) for k in ("x", "y")}
        grads = [{k: rng.standard_normal(3) for k in data} for _ in range(5)]

        def run(order):
            params = {k: Tensor(data[k].copy(), requires_grad=True) for k in order}
            optimizer = Adam(params, lr=0.02)
            for step_grads in grads:
                for k, p in params.items():
                    p.grad = step_grads[k].copy()
                optimizer.step()
            return {k: p.data.copy() for k, p in params.items()}

        forward = run(("x", "y"))
        backward_order = run(("y", "x"))
        for k in data:
            np.testing.assert_array_equal(forward[k], backward_order[k])

    def test_zero_grad_clears(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        optimizer = Adam({"w": p})
        p.grad = np.array([1.0])
        optimizer.zero_grad()
        assert p.grad is None


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(epochs=0),
            dict(batch_size=1),
            dict(lr=-0.1),
            dict(test_fraction=1.0),
            dict(hidden1=0),
            dict(hidden2=0),
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_defaults_are_valid(self):
        config = TrainConfig()
        assert config.epochs == 30
        assert config.batch_size == 64
        assert config.fusion.strategy == "tri_transformer"


class TestTrainLoop:
    def test_loss_decreases_on_separable_data(self):
        dataset = tiny_dataset(n=80, separation=4.0, weight=0.0)
        result = train(dataset, tiny_config(epochs=5))
        assert result.epochs[-1].train_loss < result.epochs[0].train_loss

    def test_same_seed_reproduces_logs_and_parameters(self):
        dataset = tiny_dataset()
        a = train(dataset, tiny_config())
        b = train(dataset, tiny_config())
        assert a.epochs == b.epochs
        assert a.split == b.split
        for name, p in a.model.parameters().items():
            assert p.data.tobytes() == b.model.parameters()[name].data.tobytes()

    def test_different_seeds_differ(self):
        dataset = tiny_dataset()
        a = train(dataset, tiny_config(seed=0))
        b = train(dataset, tiny_config(seed=1))
        assert any(
            p.data.tobytes() != b.model.parameters()[name].data.tobytes()
            for name, p in a.model.parameters().items()
        )

    def test_zero_lr_never_moves_parameters(self):
        # with lr=0 every learned parameter must stay at its init bytes;
        # normalization running statistics still drift in train mode, so
        # metric parity needs the fresh model's stats synced first
        header, records = tiny_dataset(n=40)
        config = tiny_config(lr=0.0, epochs=3)
        result = train((header, records), config)
        fresh = Model(
            ModelConfig(
                fusion=config.fusion,
                dims=header.dims(),
                hidden1=config.hidden1,
                hidden2=config.hidden2,
                precision=config.precision,
            ),
            seed=config.seed,
        )
        trained_params = result.model.parameters()
        for name, p in fresh.parameters().items():
            assert p.data.tobytes() == trained_params[name].data.tobytes(), name
        for name, state in result.model.states().items():
            target = fresh.states()[name]
            target.mean[...] = state.mean
            target.var[...] = state.var
        assert evaluate(fresh, records) == evaluate(result.model, records)

    def test_epoch_log_count_matches_epochs(self):
        dataset = tiny_dataset(n=40)
        result = train(dataset, tiny_config(epochs=4))
        assert [log.epoch for log in result.epochs] == [0, 1, 2, 3]

    def test_no_test_split_falls_back_to_train_metrics(self):
        dataset = tiny_dataset(n=40)
        result = train(dataset, tiny_config(test_fraction=0.0))
        assert result.epochs[-1].test_metrics is None
        assert result.final_metrics == result.epochs[-1].train_metrics

    def test_final_metrics_prefers_test(self):
        dataset = tiny_dataset(n=40)
        result = train(dataset, tiny_config())
        assert result.final_metrics == result.epochs[-1].test_metrics

    def test_split_respects_test_fraction(self):
        # each label group rounds its share, so totals can be off by one
        # per group from the exact fraction
        header, records = tiny_dataset(n=100)
        result = train((header, records), tiny_config(test_fraction=0.25))
        by_id = {r.id: r.label for r in records}
        for label in (0, 1):
            group = sum(1 for v in by_id.values() if v == label)
            in_test = sum(1 for i in result.split.test_ids if by_id[i] == label)
            assert abs(in_test - 0.25 * group) <= 1
        assert len(result.split.test_ids) + len(result.split.train_ids) == 100


class TestEvaluate:
    def test_matches_single_batch_predictions(self):
        header, records = tiny_dataset(n=50)
        result = train((header, records), tiny_config())
        chunked = evaluate(result.model, records, batch_size=16)
        from trifuse.data import stack_features

        feats, labels = stack_features(records)
        probs = result.model.predict_proba(feats, training=False).data
        whole = Metrics.from_predictions((probs >= 0.5).astype(np.int64), labels)
        assert chunked == whole

    def test_half_probability_counts_as_fake(self):
        header, records = tiny_dataset(n=20)
        result = train((header, records), tiny_config(epochs=1))
        params = result.model.parameters()
        params["head.main.w3"].data[...] = 0.0
        params["head.main.b3"].data[...] = 0.0
        metrics = evaluate(result.model, records)
        assert metrics.fake_recall == 1.0
        assert metrics.real_recall == 0.0

    def test_empty_records_rejected(self):
        header, records = tiny_dataset(n=20)
        result = train((header, records), tiny_config(epochs=1))
        with pytest.raises(ValueError):
            evaluate(result.model, [])


class TestCompareFusions:
    def test_reports_all_strategies_in_order(self):
        dataset = tiny_dataset(n=40)
        rows = compare_fusions(dataset, tiny_config(epochs=1))
        assert [row.name for row in rows] == list(COMPARISON_STRATEGIES)
        for row in rows:
            assert row.error is None
            assert row.metrics is not None

    def test_bad_strategy_becomes_error_row(self):
        dataset = tiny_dataset(n=40)
        rows = compare_fusions(
            dataset, tiny_config(epochs=1), strategies=("early", "bogus")
        )
        assert rows[0].metrics is not None
        assert rows[1].metrics is None
        assert "bogus" in rows[1].error

    def test_thread_pool_matches_serial(self, monkeypatch):
        dataset = tiny_dataset(n=40)
        config = tiny_config(epochs=1)
        monkeypatch.delenv("TRIFUSE_THREADS", raising=False)
        serial = compare_fusions(dataset, config)
        monkeypatch.setenv("TRIFUSE_THREADS", "4")
        threaded = compare_fusions(dataset, config)
        assert [r.name for r in serial] == [r.name for r in threaded]
        for a, b in zip(serial, threaded):
            assert a.metrics == b.metrics


class TestAblation:
    def test_toggle_grid_is_complete(self):
        toggles = all_ablation_toggles()
        assert len(toggles) == 14
        masks = {mask for mask, _ in toggles}
        assert (False, False, False) not in masks
        assert len(masks) == 7
        for mask in masks:
            flags = [fusion for m, fusion in toggles if m == mask]
            assert sorted(flags) == [False, True]

    def test_rows_label_and_audit_attention(self):
        dataset = tiny_dataset(n=24)
        rows = run_ablation(dataset, tiny_config(epochs=1, batch_size=8))
        assert len(rows) == 14
        by_label = {row.label: row for row in rows}
        assert "text+image+imgtext|fusion=on" in by_label
        assert "imgtext|fusion=off" in by_label
        for row in rows:
            assert row.error is None, row.label
            if row.fusion_on:
                assert row.attention_parameters > 0, row.label
            else:
                assert row.attention_parameters == 0, row.label

    def test_concat_only_config_still_gets_attention_on_rows(self):
        dataset = tiny_dataset(n=24)
        config = tiny_config(
            epochs=1, batch_size=8, fusion=FusionConfig(strategy="concat_only")
        )
        toggles = [((True, True, True), True)]
        rows = run_ablation(dataset, config, toggles)
        assert rows[0].attention_parameters > 0


class TestReports:
    def sample_rows(self):
        metrics = Metrics.from_counts(tp=3, fp=1, tn=4, fn=2)
        return [("good", metrics, None), ("bad", None, "ValueError: nope")]

    def test_csv_round_trips(self):
        text = render_csv(self.sample_rows())
        parsed = list(csv.reader(io.StringIO(text)))
        assert parsed[0] == list(REPORT_COLUMNS)
        assert parsed[1][0] == "good"
        assert parsed[1][1] == "0.700000"
        assert float(parsed[1][4]) == pytest.approx(2 / 3, abs=1e-6)
        assert parsed[2][0] == "bad"
        assert parsed[2][-1] == "error: ValueError: nope"

    def test_table_is_aligned(self):
        text = render_table(self.sample_rows())
        lines = text.splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("config")
        assert set(lines[1]) <= {"-", " "}
        assert "0.700000" in lines[2]
