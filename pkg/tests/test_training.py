"""Optimizer, scheduler state machines, epochs, and the two-phase protocol."""

import math

import numpy as np
import pytest

from cbamnet.backbone import build_model, count_parameters, get_preset
from cbamnet.data import AugmentConfig, SyntheticSpec, stratified_split, synthesize_dataset
from cbamnet.tensor import ParameterSet, Tensor
from cbamnet.training import (
    AdamState,
    ArrayDataset,
    EarlyStopState,
    PlateauState,
    PhaseConfig,
    RunStreams,
    TrainingFault,
    adam_step,
    default_phases,
    evaluate_dataset,
    history_csv,
    load_records,
    run_multi_seed,
    run_two_phase,
    train_epoch,
)


def early_stop_trace_oracle(values, patience=5, min_delta=1e-4):
    """Reference trace: index (1-based) where training stops, or None."""
    best, since = math.inf, 0
    for i, v in enumerate(values, start=1):
        if v < best - min_delta:
            best, since = v, 0
        else:
            since += 1
            if since >= patience:
                return i
    return None


def plateau_trace_oracle(values, lr0, factor=0.5, patience=3, min_lr=1e-7, min_delta=1e-4):
    """Reference trace: lr in effect after each monitored value."""
    best, since, lr = math.inf, 0, lr0
    trace = []
    for v in values:
        if v < best - min_delta:
            best, since = v, 0
        else:
            since += 1
            if since >= patience:
                lr, since = max(lr * factor, min_lr), 0
        trace.append(lr)
    return trace


def scalar_adam_oracle(theta, lr, grads, beta1=0.9, beta2=0.999, eps=1e-7):
    """Hand-rolled scalar Adam trace for a fixed gradient sequence."""
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace


class TestAdam:
    def make_params(self, value):
        params = ParameterSet()
        params.add("theta", Tensor(np.array([value])))
        return params

    def test_zero_gradient_no_change(self):
        params = self.make_params(1.5)
        adam_step(params, {"theta": np.zeros(1)}, AdamState(), lr=0.1)
        assert params["theta"].data[0] == 1.5

    def test_first_step_bounded_by_lr(self):
        for g in (1e-8, 1e-3, 1.0, 1e6):
            params = self.make_params(0.0)
            adam_step(params, {"theta": np.array([g])}, AdamState(), lr=0.1)
            assert 0 < abs(params["theta"].data[0]) < 0.1

    def test_three_steps_match_scalar_oracle(self):
        # f(theta) = theta^2 from theta = 1, lr = 0.1: gradient is 2*theta.
        params = self.make_params(1.0)
        state = AdamState()
        seen = []
        grads = []
        for _ in range(3):
            g = 2.0 * params["theta"].data[0]
            grads.append(g)
            adam_step(params, {"theta": np.array([g])}, state, lr=0.1)
            seen.append(params["theta"].data[0])
        expected = scalar_adam_oracle(1.0, 0.1, grads)
        np.testing.assert_allclose(seen, expected, atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        params = self.make_params(1.0)
        with pytest.raises(Exception, match="shape"):
            adam_step(params, {"theta": np.zeros((2, 2))}, AdamState(), lr=0.1)


class TestEarlyStopping:
    def run_machine(self, values, **kwargs):
        state = EarlyStopState(**kwargs)
        for i, v in enumerate(values, start=1):
            if state.update(v):
                return i
        return None

    def test_strict_descent_never_stops(self):
        values = [1.0 - 0.01 * i for i in range(50)]
        assert self.run_machine(values) is None

    def test_stop_after_epoch_six_with_epoch_one_best(self):
        values = [1.0, 1.1, 1.1, 1.1, 1.1, 1.1]
        assert self.run_machine(values) == 6

    def test_stagnation_after_epoch_two_best(self):
        values = [1.0, 0.9, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95]
        assert self.run_machine(values) == 7

    def test_sub_delta_improvements_do_not_reset(self):
        values = [1.0] + [1.0 - 1e-5 * i for i in range(1, 6)]
        assert self.run_machine(values) == 6

    def test_matches_trace_oracle_on_random_sequences(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            values = np.round(rng.uniform(0.0, 1.0, n), int(rng.integers(1, 5)))
            assert self.run_machine(values) == early_stop_trace_oracle(values)

    def test_counter_never_exceeds_patience(self):
        state = EarlyStopState()
        for v in [1.0] * 20:
            state.update(v)
            assert state.epochs_since_improvement <= state.patience


class TestPlateau:
    def run_machine(self, values, lr0, **kwargs):
        state = PlateauState(lr=lr0, **kwargs)
        return [state.update(v) for v in values]

    def test_improving_keeps_lr(self):
        values = [1.0 - 0.01 * i for i in range(10)]
        assert self.run_machine(values, 1e-3) == [1e-3] * 10

    def test_clamps_at_min_lr(self):
        trace = self.run_machine([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 2e-7)
        assert trace[3] == 1e-7  # 2e-7 * 0.5 clamps to the floor
        assert all(lr >= 1e-7 for lr in trace)
        assert trace[-1] == 1e-7

    def test_halves_at_fifth_epoch(self):
        trace = self.run_machine([1.0, 0.99, 0.99, 0.99, 0.99], 1e-3)
        assert trace == [1e-3, 1e-3, 1e-3, 1e-3, 5e-4]

    def test_matches_trace_oracle_on_random_sequences(self):
        rng = np.random.default_rng(88)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            values = np.round(rng.uniform(0.0, 1.0, n), int(rng.integers(1, 4)))
            lr0 = float(rng.choice([1e-3, 1e-5, 4e-7]))
            assert self.run_machine(values, lr0) == plateau_trace_oracle(values, lr0)

    def test_monotone_non_increasing(self):
        rng = np.random.default_rng(89)
        trace = self.run_machine(rng.uniform(0, 1, 40), 1e-3)
        assert all(b <= a for a, b in zip(trace, trace[1:]))


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    index = synthesize_dataset(SyntheticSpec(per_class=8, side=16, seed=0), root)
    train_records, val_records = stratified_split(index.subset("train"), seed=5)
    return {
        "train": load_records(train_records, 16),
        "val": load_records(val_records, 16),
        "test": load_records(index.subset("test"), 16),
    }


def make_model(seed=0):
    return build_model(get_preset("dense-tiny", input_side=16), seed=seed)


WEIGHTS = np.ones(3)
NO_AUG = AugmentConfig.disabled()


class TestTrainEpoch:
    def test_zero_lr_leaves_parameters_unchanged(self, tiny_corpus):
        model = make_model()
        before = {n: t.data.copy() for n, t in model.params.items()}
        train_epoch(model, tiny_corpus["train"], WEIGHTS, AdamState(), lr=0.0,
                    batch_size=8, streams=RunStreams.from_seed(1), augment_cfg=NO_AUG)
        for name, t in model.params.items():
            np.testing.assert_array_equal(t.data, before[name])

    def test_loss_decreases_on_single_repeated_batch(self):
        # One batch of identical class-0 samples: three epochs of Adam at 1e-3
        # must reduce the training loss.
        image = np.random.default_rng(0).uniform(0, 1, size=(16, 16, 3))
        data = ArrayDataset(images=np.stack([image] * 8), labels=np.zeros(8, dtype=np.int64),
                            records=[])
        model = make_model(seed=3)
        adam = AdamState()
        streams = RunStreams.from_seed(2)
        losses = [train_epoch(model, data, WEIGHTS, adam, 1e-3, 8, streams, NO_AUG)[0]
                  for _ in range(3)]
        assert losses[2] < losses[0]

    def test_rerun_bit_identical(self, tiny_corpus):
        metrics = []
        for _ in range(2):
            model = make_model(seed=4)
            stats = train_epoch(model, tiny_corpus["train"], WEIGHTS, AdamState(), 1e-3,
                                batch_size=8, streams=RunStreams.from_seed(9),
                                augment_cfg=AugmentConfig())
            metrics.append(stats)
        assert metrics[0] == metrics[1]

    def test_non_finite_loss_raises_training_fault(self, tiny_corpus):
        model = make_model()
        model.params["head.out.w"].data[:] = np.inf
        with np.errstate(invalid="ignore", over="ignore"):
            with pytest.raises(TrainingFault, match="epoch 1, batch 0"):
                train_epoch(model, tiny_corpus["train"], WEIGHTS, AdamState(), 1e-3,
                            batch_size=8, streams=RunStreams.from_seed(0),
                            augment_cfg=NO_AUG, epoch_index=1)


class TestTwoPhase:
    def phases(self, e1=1, e2=1, n2=2):
        return (PhaseConfig(epochs=e1, lr=1e-3, unfreeze_last_n=0, phase_id=1),
                PhaseConfig(epochs=e2, lr=1e-5, unfreeze_last_n=n2, phase_id=2))

    def test_budget_one_one_gives_two_epochs(self, tiny_corpus, tmp_path):
        model = make_model(seed=1)
        result = run_two_phase(model, tiny_corpus["train"], tiny_corpus["val"],
                               self.phases(), WEIGHTS, tmp_path / "best.ckpt",
                               seed=1, batch_size=8, augment_cfg=NO_AUG)
        assert [len(h.epochs) for h in result.histories] == [1, 1]
        assert [h.phase for h in result.histories] == [1, 2]

    def test_best_checkpoint_is_max_val_accuracy(self, tiny_corpus, tmp_path):
        model = make_model(seed=2)
        result = run_two_phase(model, tiny_corpus["train"], tiny_corpus["val"],
                               self.phases(e1=2, e2=2), WEIGHTS, tmp_path / "best.ckpt",
                               seed=2, batch_size=8, augment_cfg=NO_AUG)
        recorded = [s.val_accuracy for h in result.histories for s in h.epochs]
        assert result.best_val_accuracy == max(recorded)
        _, best_acc, _ = evaluate_dataset(result.load_best(), tiny_corpus["val"], 8)
        assert best_acc == result.best_val_accuracy

    def test_phase_two_resumes_from_phase_one_weights(self, tiny_corpus, tmp_path):
        model = make_model(seed=3)
        result = run_two_phase(model, tiny_corpus["train"], tiny_corpus["val"],
                               self.phases(e1=2, e2=1), WEIGHTS, tmp_path / "best.ckpt",
                               seed=3, batch_size=8, augment_cfg=NO_AUG)
        phase1, phase2 = result.histories
        # Nothing may change at the boundary: the pre-training evaluation of
        # phase 2 sees exactly the state phase 1 finished with.
        assert phase2.initial_val_accuracy == phase1.epochs[-1].val_accuracy

    def test_phase_one_frozen_backbone_bit_identical(self, tiny_corpus, tmp_path):
        model = make_model(seed=4)
        model.set_trainable(0)
        frozen_before = {n: model.params[n].data.copy()
                         for e in model.backbone_layers() for n in e.param_names}
        run_two_phase(model, tiny_corpus["train"], tiny_corpus["val"],
                      (PhaseConfig(2, 1e-3, 0, 1),), WEIGHTS, tmp_path / "best.ckpt",
                      seed=4, batch_size=8, augment_cfg=NO_AUG)
        for name, before in frozen_before.items():
            np.testing.assert_array_equal(model.params[name].data, before)

    def test_early_stop_fires_within_budget(self, tiny_corpus, tmp_path):
        model = make_model(seed=5)
        result = run_two_phase(model, tiny_corpus["train"], tiny_corpus["val"],
                               (PhaseConfig(30, 1e-5, 0, 1),), WEIGHTS,
                               tmp_path / "best.ckpt", seed=5, batch_size=8,
                               augment_cfg=NO_AUG)
        history = result.histories[0]
        assert len(history.epochs) <= 30
        if history.stop_reason == "early_stop":
            assert len(history.epochs) < 30

    def test_empty_validation_rejected(self, tiny_corpus, tmp_path):
        model = make_model()
        empty = ArrayDataset(images=np.zeros((0, 16, 16, 3)), labels=np.zeros(0, dtype=np.int64),
                             records=[])
        with pytest.raises(ValueError, match="validation"):
            run_two_phase(model, tiny_corpus["train"], empty, self.phases(), WEIGHTS,
                          tmp_path / "best.ckpt", seed=0)

    def test_lr_trace_non_increasing_within_phase(self, tiny_corpus, tmp_path):
        model = make_model(seed=6)
        result = run_two_phase(model, tiny_corpus["train"], tiny_corpus["val"],
                               self.phases(e1=6, e2=3), WEIGHTS, tmp_path / "best.ckpt",
                               seed=6, batch_size=8, augment_cfg=NO_AUG)
        for history in result.histories:
            lrs = [s.lr for s in history.epochs]
            assert all(b <= a for a, b in zip(lrs, lrs[1:]))
            assert all(lr >= 1e-7 for lr in lrs)

    def test_history_csv_layout(self, tiny_corpus, tmp_path):
        model = make_model(seed=7)
        result = run_two_phase(model, tiny_corpus["train"], tiny_corpus["val"],
                               self.phases(), WEIGHTS, tmp_path / "best.ckpt",
                               seed=7, batch_size=8, augment_cfg=NO_AUG)
        text = history_csv(result.histories)
        lines = text.strip().splitlines()
        assert lines[0] == "epoch,phase,train_loss,train_acc,val_loss,val_acc,lr"
        assert len(lines) == 3
        assert lines[1].startswith("1,1,") and lines[2].startswith("2,2,")


class TestMultiSeed:
    def test_repeated_seed_zero_std(self, tiny_corpus, tmp_path):
        result = run_multi_seed(tiny_corpus["train"], tiny_corpus["val"], "dense-tiny", 16,
                                WEIGHTS, tmp_path, seeds=(5, 5), batch_size=8,
                                phases=(PhaseConfig(1, 1e-3, 0, 1),),
                                augment_cfg=NO_AUG)
        assert result.val_accuracy_std == 0.0
        assert result.seeds == [5, 5]

    def test_seeds_recorded_verbatim(self, tiny_corpus, tmp_path):
        result = run_multi_seed(tiny_corpus["train"], tiny_corpus["val"], "dense-tiny", 16,
                                WEIGHTS, tmp_path, seeds=(42, 7, 123), batch_size=8,
                                phases=(PhaseConfig(1, 1e-3, 0, 1),),
                                augment_cfg=NO_AUG)
        assert result.seeds == [42, 7, 123]
        for seed in (42, 7, 123):
            assert (tmp_path / f"best_seed{seed}.ckpt").exists()
            assert (tmp_path / f"history_seed{seed}.csv").exists()

    def test_failed_run_names_seed(self, tiny_corpus, tmp_path):
        empty = ArrayDataset(images=np.zeros((0, 16, 16, 3)), labels=np.zeros(0, dtype=np.int64),
                             records=[])
        with pytest.raises(TrainingFault, match="seed 42"):
            run_multi_seed(tiny_corpus["train"], empty, "dense-tiny", 16, WEIGHTS,
                           tmp_path, seeds=(42, 7), batch_size=8,
                           phases=(PhaseConfig(1, 1e-3, 0, 1),))

    def test_single_seed_rejected(self, tiny_corpus, tmp_path):
        with pytest.raises(ValueError, match="at least 2"):
            run_multi_seed(tiny_corpus["train"], tiny_corpus["val"], "dense-tiny", 16,
                           WEIGHTS, tmp_path, seeds=(42,))


class TestDefaults:
    def test_default_phases_tiny(self):
        model = make_model()
        phase1, phase2 = default_phases(model)
        assert (phase1.epochs, phase1.lr, phase1.unfreeze_last_n) == (15, 1e-3, 0)
        assert (phase2.epochs, phase2.lr) == (20, 1e-5)
        assert phase2.unfreeze_last_n == len(model.backbone_layers()) // 2 == 7

    def test_frozen_params_excluded_from_step(self, tiny_corpus):
        model = make_model(seed=8)
        model.set_trainable(0)
        frozen_names = [n for e in model.backbone_layers() for n in e.param_names]
        before = {n: model.params[n].data.copy() for n in frozen_names}
        train_epoch(model, tiny_corpus["train"], WEIGHTS, AdamState(), 1e-2,
                    batch_size=8, streams=RunStreams.from_seed(3), augment_cfg=NO_AUG)
        for name in frozen_names:
            np.testing.assert_array_equal(model.params[name].data, before[name])
        total, trainable = count_parameters(model)
        assert trainable < total
