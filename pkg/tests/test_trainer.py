import json

import numpy as np
import pytest

from conftest import tiny_config
from quag.model import QuagParams, predict
from quag.tensor import Tensor, sum_all
from quag.trainer import (
    AdamW,
    CheckpointError,
    NonFiniteLossError,
    TaskLoaders,
    TrainSchedule,
    load_checkpoint,
    load_params_for_eval,
    round_robin_epoch,
    save_checkpoint,
    train,
)


class TestAdamW:
    def test_zero_gradients_no_decay_leave_params_unchanged(self):
        p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        p.grad = np.zeros(2, dtype=np.float32)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_hand_trace(self):
        # f(x) = x^2/2 at x=1: g=1, bias-corrected m=g and v=g^2, so the
        # update is lr * 1/(1 + eps)
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step()
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_decoupled_decay_with_zero_gradients(self):
        p = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
        factor = 1.0 - 0.1 * 0.5
        for step in range(3):
            p.grad = np.zeros(1, dtype=np.float32)
            opt.step()
            assert p.data[0] == pytest.approx(2.0 * factor ** (step + 1), rel=1e-6)

    def test_matches_reference_adam_when_decay_is_zero(self):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal(5).astype(np.float32)
        p = Tensor(x0.copy(), requires_grad=True)
        opt = AdamW({"p": p}, lr=0.05, weight_decay=0.0)

        # independent Adam implementation on the same quadratic
        theta = x0.astype(np.float64).copy()
        m = np.zeros(5)
        v = np.zeros(5)
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
        for t in range(1, 21):
            p.grad = None
            loss = sum_all(p * p) * 0.5
            loss.backward()
            opt.step()

            g = theta.copy()
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            np.testing.assert_allclose(p.data, theta, atol=1e-7)

    def test_nan_gradient_aborts_with_parameter_name(self):
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        opt = AdamW({"heads.start.weight": p}, lr=0.1)
        p.grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(NonFiniteLossError, match="heads.start.weight"):
            opt.step()

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            AdamW({}, lr=-1.0)


class TestSchedule:
    def test_cycle_order(self):
        schedule = TrainSchedule(iterations_per_epoch=6, epochs=1, lam=0.1,
                                 batch_size=4, seed=0)
        assert [schedule.task_at(i) for i in range(6)] == \
            ["ret", "seg", "cap", "ret", "seg", "cap"]

    def test_every_window_of_three_touches_each_task_once(self):
        schedule = TrainSchedule(iterations_per_epoch=12, epochs=1, lam=0.1,
                                 batch_size=4, seed=0)
        tasks = [schedule.task_at(i) for i in range(12)]
        for i in range(0, 12, 3):
            assert sorted(tasks[i:i + 3]) == ["cap", "ret", "seg"]

    def test_loader_batches_are_deterministic_and_wrap(self, tiny_corpus):
        episodes = tiny_corpus.load_episodes()
        loaders = TaskLoaders(episodes, batch_size=3, seed=5)
        a = loaders.epoch_batches("ret", epoch=2)
        b = loaders.epoch_batches("ret", epoch=2)
        assert [[e.id for e in batch] for batch in a] == \
            [[e.id for e in batch] for batch in b]
        c = loaders.epoch_batches("ret", epoch=3)
        assert [[e.id for e in batch] for batch in a] != \
            [[e.id for e in batch] for batch in c]
        assert sum(len(batch) for batch in a) == len(episodes)

    def test_empty_loader_rejected(self):
        with pytest.raises(ValueError):
            TaskLoaders([], batch_size=2, seed=0)


class TestRoundRobin:
    def test_frozen_optimizer_leaves_params_bit_identical(self, tiny_corpus):
        config = tiny_config(tiny_corpus, lr=0.0, epochs=1)
        episodes = tiny_corpus.load_episodes()
        model = QuagParams(config)
        before = {n: p.data.copy() for n, p in model.named_parameters().items()}
        schedule = TrainSchedule.for_dataset(config, len(episodes))
        loaders = TaskLoaders(episodes, config.batch_size, config.seed)
        optimizer = AdamW.for_model(model)
        round_robin_epoch(model, loaders, schedule, optimizer, epoch=0)
        for name, p in model.named_parameters().items():
            np.testing.assert_array_equal(p.data, before[name])

    def test_losses_decrease_under_training(self, tiny_corpus):
        config = tiny_config(tiny_corpus, epochs=25, lam=0.1)
        episodes = tiny_corpus.load_episodes()
        model = QuagParams(config)
        schedule = TrainSchedule.for_dataset(config, len(episodes))
        loaders = TaskLoaders(episodes, config.batch_size, config.seed)
        optimizer = AdamW.for_model(model)
        first = round_robin_epoch(model, loaders, schedule, optimizer, epoch=0)
        last = {}
        for epoch in range(1, config.epochs):
            last = round_robin_epoch(model, loaders, schedule, optimizer, epoch)
        for task in ("ret", "seg", "cap"):
            assert last[task] < first[task], f"{task} did not improve"


class TestCheckpointIO:
    def test_roundtrip_restores_exact_state(self, tiny_corpus, tmp_path):
        config = tiny_config(tiny_corpus)
        model = QuagParams(config)
        optimizer = AdamW.for_model(model)
        for p in model.named_parameters().values():
            p.grad = np.ones_like(p.data)
        optimizer.step()
        path = tmp_path / "ckpt.qgck"
        save_checkpoint(path, config, model, optimizer, epoch=3)

        restored = QuagParams(config)
        opt2 = AdamW.for_model(restored)
        epoch = load_checkpoint(path, config, restored, opt2)
        assert epoch == 3
        assert opt2.t == 1
        for name, p in model.named_parameters().items():
            np.testing.assert_array_equal(p.data, restored.named_parameters()[name].data)
            np.testing.assert_array_equal(optimizer.m[name], opt2.m[name])
            np.testing.assert_array_equal(optimizer.v[name], opt2.v[name])

    def test_digest_mismatch_rejected(self, tiny_corpus, tmp_path):
        config = tiny_config(tiny_corpus)
        model = QuagParams(config)
        path = tmp_path / "ckpt.qgck"
        save_checkpoint(path, config, model, AdamW.for_model(model), epoch=0)
        other = config.replace(lam=0.9)
        with pytest.raises(CheckpointError, match="different config"):
            load_checkpoint(path, other, QuagParams(other))

    def test_truncated_checkpoint_rejected(self, tiny_corpus, tmp_path):
        config = tiny_config(tiny_corpus)
        model = QuagParams(config)
        path = tmp_path / "ckpt.qgck"
        save_checkpoint(path, config, model, AdamW.for_model(model), epoch=0)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path, config, QuagParams(config))


class TestTrainEntryPoint:
    def test_identical_seeds_give_bit_identical_checkpoints(self, tiny_corpus, tmp_path):
        config = tiny_config(tiny_corpus, epochs=3)
        r1 = train(config, tiny_corpus, tmp_path / "run1")
        r2 = train(config, tiny_corpus, tmp_path / "run2")
        assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()

    def test_metrics_log_shape(self, tiny_corpus, tmp_path):
        config = tiny_config(tiny_corpus, epochs=3)
        result = train(config, tiny_corpus, tmp_path / "run")
        lines = result.log_path.read_text().splitlines()
        schedule = TrainSchedule.for_dataset(config, 4)
        assert len(lines) == config.epochs * schedule.iterations_per_epoch
        for line in lines:
            entry = json.loads(line)
            assert set(entry) == {"iteration", "epoch", "task", "task_loss",
                                  "msp_loss", "total"}
            assert entry["total"] == pytest.approx(
                entry["task_loss"] + config.lam * entry["msp_loss"], abs=1e-5
            )

    def test_resume_matches_uninterrupted_run(self, tiny_corpus, tmp_path):
        config = tiny_config(tiny_corpus, epochs=4)
        full = train(config, tiny_corpus, tmp_path / "full")

        half_config = config.replace(epochs=2)
        half = train(half_config, tiny_corpus, tmp_path / "half")
        resumed = train(config, tiny_corpus, tmp_path / "resumed",
                        resume_from=half.checkpoint_path)
        assert resumed.epochs_run == 2
        assert full.checkpoint_path.read_bytes() == resumed.checkpoint_path.read_bytes()

        full_lines = [json.loads(l) for l in full.log_path.read_text().splitlines()]
        resumed_lines = [json.loads(l) for l in resumed.log_path.read_text().splitlines()]
        tail = [l for l in full_lines if l["epoch"] >= 2]
        assert len(resumed_lines) == len(tail)
        for a, b in zip(tail, resumed_lines):
            assert a["total"] == pytest.approx(b["total"], abs=1e-7)

    def test_eval_params_load_from_training_output(self, tiny_corpus, tmp_path):
        config = tiny_config(tiny_corpus, epochs=2)
        result = train(config, tiny_corpus, tmp_path / "run")
        model = load_params_for_eval(result.checkpoint_path, config)
        pred = predict(tiny_corpus.load_episodes()[0], model)
        assert pred.steps[-1] == pred.moment[1]
