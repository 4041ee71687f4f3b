import dataclasses

import numpy as np
import pytest

from conftest import REDUCED, fake_index
from demenscan.data import DatasetIndex, Sample, stratified_split
from demenscan.model import ModelSpec, init_parameters
from demenscan.tensor import ParameterError, make_rng
from demenscan.training import AdamState, EpochMetrics, KFoldReport, Metrics, TrainConfig, \
    adam_step, confusion_matrix, evaluate, kfold_run, train
from oracles import sample_std

# Two constant-intensity classes; a threshold on mean intensity separates them.
SYNTH_SPEC = REDUCED
SYNTH_CONFIG = TrainConfig(epochs=20, batch_size=8, seed=0, spec=SYNTH_SPEC)


def synthetic_index():
    return DatasetIndex([Sample(f"synthetic/{i:02d}", 0 if i < 32 else 1) for i in range(64)])


def synthetic_loader(samples):
    return np.stack([np.full((3, 16, 16), 0.2 + 0.6 * (s.label > 0), np.float32)
                     for s in samples])


class TestAdam:
    def test_zero_grads_leave_params(self):
        params = init_parameters(REDUCED, make_rng(0))
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        new, state = adam_step(params, grads, AdamState.zeros_like(params), TrainConfig())
        for k in params:
            np.testing.assert_array_equal(new[k], params[k])
        assert state.t == 1

    @pytest.mark.parametrize("c", [0.5, -3.0, 1e-3])
    def test_first_step_closed_form(self, c):
        # m1 = (1-b1) c, v1 = (1-b2) c^2 -> m_hat = c, v_hat = c^2 -> step = lr c / (|c| + eps)
        cfg = TrainConfig(learning_rate=1e-3)
        p = {"w": np.zeros(5, np.float64)}
        g = {"w": np.full(5, c)}
        new, _ = adam_step(p, g, AdamState.zeros_like(p), cfg)
        expected = -cfg.learning_rate * c / (abs(c) + cfg.eps)
        np.testing.assert_allclose(new["w"], expected, rtol=1e-12)

    def test_second_step_reference(self):
        # plain textbook Adam, written out
        cfg = TrainConfig(learning_rate=0.01)
        p = {"w": np.array([1.0, -2.0])}
        state = AdamState.zeros_like(p)
        ref, m, v = p["w"].copy(), np.zeros(2), np.zeros(2)
        for t, g in enumerate((np.array([0.3, -0.1]), np.array([-0.2, 0.4])), start=1):
            p, state = adam_step(p, {"w": g}, state, cfg)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            ref = ref - cfg.learning_rate * (m / (1 - cfg.beta1 ** t)) / (
                np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps)
        np.testing.assert_allclose(p["w"], ref, rtol=1e-12)

    def test_inputs_untouched(self):
        p = {"w": np.ones(3)}
        g = {"w": np.full(3, 2.0)}
        state = AdamState.zeros_like(p)
        adam_step(p, g, state, TrainConfig())
        np.testing.assert_array_equal(p["w"], 1.0)
        assert not state.m["w"].any() and state.t == 0

    def test_shape_mismatch(self):
        from demenscan.tensor import ShapeError
        p = {"w": np.ones(3)}
        with pytest.raises(ShapeError):
            adam_step(p, {"w": np.ones(4)}, AdamState.zeros_like(p), TrainConfig())


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0},
                                        {"learning_rate": 0.0}])
    def test_rejected(self, kwargs):
        with pytest.raises(ParameterError):
            TrainConfig(**kwargs)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.learning_rate) == (20, 32, 1e-3)
        assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)

    def test_dict_round_trip(self):
        cfg = TrainConfig(epochs=3, seed=5, spec=ModelSpec(input_size=(32, 32, 3)))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestEvaluate:
    def test_confusion_identity(self):
        labels = np.array([0, 1, 2, 3, 3, 1])
        cm = confusion_matrix(labels, labels)
        np.testing.assert_array_equal(cm, np.diag([1, 2, 1, 2]))
        assert np.trace(cm) / cm.sum() == 1.0

    def test_all_class_zero_on_reference_val(self):
        _, val = stratified_split(fake_index([3200, 2240, 896, 64]), 0.8)
        cm = confusion_matrix(val.labels, np.zeros(len(val), dtype=int))
        np.testing.assert_array_equal(cm.sum(axis=1), [640, 448, 180, 13])
        assert np.trace(cm) / cm.sum() == pytest.approx(640 / 1281)
        assert 640 / 1281 == pytest.approx(0.4996, abs=1e-4)

    def test_stub_model_predicts_class_zero(self):
        params = init_parameters(REDUCED, make_rng(0))
        params["out.weight"][:] = 0
        params["out.bias"][:] = [5, 0, 0, 0]
        index = DatasetIndex([Sample(f"s{i}", i % 4) for i in range(8)])
        result = evaluate(REDUCED, params, index, synthetic_loader, batch_size=3)
        np.testing.assert_array_equal(result.confusion[:, 0], [2, 2, 2, 2])
        assert result.accuracy == 0.25
        assert result.per_class_accuracy() == [1.0, 0.0, 0.0, 0.0]

    def test_tie_breaks_to_lowest_class(self):
        params = init_parameters(REDUCED, make_rng(0))
        params["out.weight"][:] = 0
        params["out.bias"][:] = [0, 1, 1, 0]
        index = DatasetIndex([Sample("a", 2)])
        result = evaluate(REDUCED, params, index, synthetic_loader)
        assert result.confusion[2, 1] == 1

    def test_trace_matches_accuracy(self):
        params = init_parameters(REDUCED, make_rng(1))
        index = DatasetIndex([Sample(f"s{i}", i % 4) for i in range(20)])
        loader = lambda b: np.stack([make_rng(hash(s.path) % 1000).random((3, 16, 16))
                                     .astype(np.float32) for s in b])
        r = evaluate(REDUCED, params, index, loader, batch_size=6)
        assert np.trace(r.confusion) / r.confusion.sum() == r.accuracy
        np.testing.assert_array_equal(r.confusion.sum(axis=1), index.per_class_counts)

    def test_empty(self):
        with pytest.raises(ParameterError):
            evaluate(REDUCED, init_parameters(REDUCED, make_rng(0)), DatasetIndex([]))


@pytest.fixture(scope="module")
def synthetic_run():
    return train(SYNTH_CONFIG, synthetic_index(), synthetic_index(), synthetic_loader)


class TestTrain:
    def test_separable_corpus(self, synthetic_run):
        _, metrics = synthetic_run
        assert len(metrics.epochs) == 20
        assert metrics.final.train_acc == 1.0
        assert metrics.final.train_loss < 0.05

    def test_loss_non_increasing_after_epoch_2(self, synthetic_run):
        losses = [e.train_loss for e in synthetic_run[1].epochs]
        assert all(b <= a for a, b in zip(losses[1:], losses[2:]))

    def test_metric_ranges(self, synthetic_run):
        for e in synthetic_run[1].epochs:
            assert 0 <= e.train_acc <= 1 and 0 <= e.val_acc <= 1
            assert e.train_loss >= 0 and e.val_loss >= 0

    def test_bit_identical_reruns(self, synthetic_run):
        cfg = dataclasses.replace(SYNTH_CONFIG, epochs=3)
        p1, m1 = train(cfg, synthetic_index(), synthetic_index(), synthetic_loader)
        p2, m2 = train(cfg, synthetic_index(), synthetic_index(), synthetic_loader)
        assert m1 == m2
        for k in p1:
            assert p1[k].tobytes() == p2[k].tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self):
        from demenscan.training import TrainingDiverged
        bad = lambda b: np.full((len(b), 3, 16, 16), np.inf, np.float32)
        with pytest.raises(TrainingDiverged, match="epoch 1, batch 1"):
            train(dataclasses.replace(SYNTH_CONFIG, epochs=1), synthetic_index(),
                  synthetic_index(), bad)


class TestKFold:
    def _stub(self, accs):
        calls = []

        def trainer(config, tr, va, loader=None):
            calls.append((config.seed, len(tr), len(va)))
            m = Metrics([EpochMetrics(1, 0.0, 1.0, 0.0, accs[len(calls) - 1])])
            return None, m
        return trainer, calls

    def test_constant_accuracy(self):
        trainer, calls = self._stub([0.8] * 5)
        report = kfold_run(TrainConfig(seed=6), fake_index([10, 10, 10, 10]), 5, trainer=trainer)
        assert report.mean == pytest.approx(0.8) and report.std == pytest.approx(0.0, abs=1e-15)
        assert [c[0] for c in calls] == [6 ^ f for f in range(5)]
        assert all(c[1] + c[2] == 40 for c in calls)

    def test_mean_std_formula(self):
        accs = [0.75, 0.99, 0.62, 0.91, 0.88]
        trainer, _ = self._stub(accs)
        report = kfold_run(TrainConfig(), fake_index([10, 10, 10, 10]), 5, trainer=trainer)
        assert report.fold_accuracies == accs
        assert report.mean == pytest.approx(sum(accs) / 5, abs=1e-12)
        assert report.std == pytest.approx(sample_std(accs), abs=1e-12)

    def test_real_training_small(self):
        index = DatasetIndex([Sample(f"s{i:02d}", i % 4) for i in range(16)])
        cfg = TrainConfig(epochs=2, batch_size=4, spec=SYNTH_SPEC)
        report = kfold_run(cfg, index, 2, loader=synthetic_loader)
        assert len(report.fold_accuracies) == 2
        assert isinstance(report, KFoldReport)
