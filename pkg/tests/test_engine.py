import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from bimae.data import TaskStream, synthetic_shapes
from bimae.engine import (
    ReplaySet,
    TrainConfig,
    _sample_batch_indices,
    cosine_lr,
    evaluate,
    load_checkpoint,
    reconstruct_old_samples,
    restore_model,
    run_experiment,
    save_checkpoint,
    train_task,
)
from bimae.losses import NonFiniteLossError
from bimae.metrics import MetricsLedger
from bimae.model import BilateralMAE, ModelConfig
from bimae.patches import dequantize, full_image_bytes, patchify
from bimae.store import ExemplarStore

TINY_MODEL = dict(image_side=16, patch_side=4, embed_dim=32, heads=2,
                  detailed_mlp_hidden=64)


def tiny_model(seed=0, **overrides):
    torch.manual_seed(seed)
    return BilateralMAE(ModelConfig(**{**TINY_MODEL, **overrides}))


def tiny_stream(classes_per_task=2, n_per_class=8, n_tasks=2, seed=0):
    classes = list(range(classes_per_task * n_tasks))
    train_x, train_y = synthetic_shapes(n_per_class, image_side=16, seed=seed,
                                        classes=classes)
    test_x, test_y = synthetic_shapes(4, image_side=16, seed=seed + 100,
                                      classes=classes)
    return TaskStream(train_x, train_y, test_x, test_y, n_tasks=n_tasks,
                      class_order_seed=0)


def quick_config(**overrides):
    base = dict(epochs=1, batch_size=8, base_lr=1e-3, augment=False)
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.mask_ratio, cfg.r1, cfg.r2) == (0.75, 0.75, 0.4)
        assert cfg.base_lr == 1e-4
        assert cfg.weights.lambda_cls == 0.01

    def test_mask_ordering_enforced(self):
        with pytest.raises(ValueError):
            TrainConfig(r1=0.4, r2=0.75)
        with pytest.raises(ValueError):
            TrainConfig(r1=0.75, r2=0.75)
        with pytest.raises(ValueError):
            TrainConfig(mask_ratio=1.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(base_lr=0.0)


class TestCosineSchedule:
    def test_matches_closed_form(self):
        total, base = 40, 1e-4
        for step in range(total):
            expected = base * 0.5 * (1.0 + math.cos(math.pi * step / total))
            assert abs(cosine_lr(step, total, base) - expected) <= 1e-9

    def test_endpoints(self):
        assert cosine_lr(0, 100, 2e-3) == 2e-3
        assert cosine_lr(50, 100, 2e-3) == pytest.approx(1e-3)
        assert cosine_lr(99, 100, 2e-3) < 1e-6

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            cosine_lr(100, 100, 1e-4)
        with pytest.raises(ValueError):
            cosine_lr(-1, 100, 1e-4)


class TestBatchSampling:
    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            _sample_batch_indices(0, 0, 8, False, np.random.default_rng(0))

    def test_pure_current_when_no_replay(self):
        idx = _sample_batch_indices(50, 50, 64, False, np.random.default_rng(0))
        assert idx.max() < 50

    def test_uniform_replay_frequency(self):
        # 240 replay and 5000 current: replay share of each draw is 240/5240
        rng = np.random.default_rng(0)
        idx = _sample_batch_indices(5000, 5240, 10_000, False, rng)
        frac = float((idx >= 5000).mean())
        p = 240 / 5240
        sigma = math.sqrt(p * (1 - p) / 10_000)
        assert abs(frac - p) <= 3 * sigma

    def test_balanced_split(self):
        idx = _sample_batch_indices(100, 400, 63, True, np.random.default_rng(0))
        assert int((idx >= 100).sum()) == 31
        assert int((idx < 100).sum()) == 32

    def test_balanced_flag_inert_without_replay(self):
        idx = _sample_batch_indices(100, 100, 64, True, np.random.default_rng(0))
        assert idx.max() < 100

    def test_deterministic(self):
        a = _sample_batch_indices(30, 60, 16, False, np.random.default_rng(4))
        b = _sample_batch_indices(30, 60, 16, False, np.random.default_rng(4))
        assert np.array_equal(a, b)


class TestReplayReconstruction:
    def build_store(self, seed=0, ratio=0.75):
        store = ExemplarStore(2 * 2 * full_image_bytes(16, 3), 16, 4, seed=seed)
        for cls in range(2):
            images, _ = synthetic_shapes(12, image_side=16, seed=cls, classes=[cls])
            store.admit_class(cls, list(images), ratio)
        return store

    def test_empty_store_gives_empty_replay(self):
        model = tiny_model()
        store = ExemplarStore(1000, 16, 4)
        replay = reconstruct_old_samples(model, store, 0.25)
        assert len(replay) == 0
        assert replay.images.shape == (0, 3, 16, 16)

    def test_count_and_labels(self):
        model = tiny_model()
        store = self.build_store()
        replay = reconstruct_old_samples(model, store, 0.25)
        assert len(replay) == store.n_entries
        assert replay.images.shape == (store.n_entries, 3, 16, 16)
        expected = [rec.label for rec in store.all_records()]
        assert replay.labels.tolist() == expected

    def test_stored_positions_are_exact(self):
        model = tiny_model()
        store = self.build_store()
        replay = reconstruct_old_samples(model, store, 0.25)
        for img, rec in zip(replay.images, replay.records):
            grid = rec.grid_side
            flat = rec.kept[:, 0] * grid + rec.kept[:, 1]
            got = patchify(img, rec.patch_side).patches[flat]
            expected = dequantize(rec.patch_bytes).astype(np.float32)
            assert np.array_equal(got.astype(np.float32), expected)

    def test_mixed_mask_ratios(self):
        model = tiny_model()
        store = ExemplarStore(4 * full_image_bytes(16, 3), 16, 4)
        images, _ = synthetic_shapes(6, image_side=16, seed=0, classes=[0])
        store.admit_class(0, list(images), 0.75)
        images, _ = synthetic_shapes(6, image_side=16, seed=1, classes=[1])
        store.admit_class(1, list(images), 0.5)
        replay = reconstruct_old_samples(model, store, 0.25, batch_size=3)
        assert len(replay) == store.n_entries

    def test_geometry_mismatch_rejected(self):
        model = tiny_model(image_side=32)
        store = self.build_store()
        with pytest.raises(ValueError, match="geometry"):
            reconstruct_old_samples(model, store, 0.25)

    def test_training_mode_restored(self):
        model = tiny_model()
        model.train()
        reconstruct_old_samples(model, self.build_store(), 0.25)
        assert model.training

    def test_uses_inherited_weights(self):
        store = self.build_store()
        a = reconstruct_old_samples(tiny_model(seed=0), store, 0.25)
        b = reconstruct_old_samples(tiny_model(seed=1), store, 0.25)
        assert not np.array_equal(a.images, b.images)


class TestMaskAndReconstructLimits:
    def test_fine_ratio_zero_masks_nothing(self):
        model = tiny_model()
        x = torch.rand(2, 3, 16, 16)
        _, x2_a = model.mask_and_reconstruct(x, 0.75, 0.0, np.random.default_rng(0))
        _, x2_b = model.mask_and_reconstruct(x, 0.75, 0.0, np.random.default_rng(9))
        assert torch.equal(x2_a, x2_b)


class TestTrainTask:
    def test_single_task_step_accounting(self):
        model = tiny_model()
        store = ExemplarStore(2 * full_image_bytes(16, 3), 16, 4)
        stream = tiny_stream(n_per_class=8, n_tasks=1)
        cfg = quick_config(epochs=3, batch_size=8)
        empty = ReplaySet(np.zeros((0, 3, 16, 16), np.float32),
                          np.zeros(0, np.int64), [])
        rows, pairs = train_task(model, store, stream.tasks[0], cfg, empty)
        assert len(rows) == 3 * 2  # epochs * ceil(16 / 8)
        assert all(len(r) == 6 for r in rows)
        assert model.head.n_classes == 2
        assert sorted(store.entries) == [0, 1]
        assert store.used_bytes <= store.budget_bytes

    def test_exemplar_pairs_match_store_contents(self):
        model = tiny_model()
        store = ExemplarStore(4 * full_image_bytes(16, 3), 16, 4)
        stream = tiny_stream(n_per_class=10, n_tasks=1)
        empty = ReplaySet(np.zeros((0, 3, 16, 16), np.float32),
                          np.zeros(0, np.int64), [])
        _, pairs = train_task(model, store, stream.tasks[0], quick_config(), empty)
        assert len(pairs) == store.n_entries
        for rec, source in pairs:
            grid = rec.grid_side
            flat = rec.kept[:, 0] * grid + rec.kept[:, 1]
            from bimae.patches import quantize
            expected = quantize(patchify(np.asarray(source, np.float64), 4).patches[flat])
            assert np.array_equal(rec.patch_bytes, expected)

    def test_non_finite_loss_aborts_with_dump(self, tmp_path):
        model = tiny_model()
        with torch.no_grad():
            model.patch_embed.weight[0, 0] = float("nan")
        store = ExemplarStore(1000, 16, 4)
        stream = tiny_stream(n_per_class=4, n_tasks=1)
        empty = ReplaySet(np.zeros((0, 3, 16, 16), np.float32),
                          np.zeros(0, np.int64), [])
        dump = tmp_path / "abort.pt"
        with pytest.raises(NonFiniteLossError):
            train_task(model, store, stream.tasks[0], quick_config(), empty,
                       abort_dump=dump)
        assert dump.exists()
        saved = torch.load(dump, weights_only=False)
        assert saved["task"] == 1
        assert "model_state" in saved

    def test_two_class_toy_accuracy(self):
        # classes 0 and 5: same shape, opposite palettes, cleanly separable
        torch.manual_seed(0)
        model = tiny_model()
        store = ExemplarStore(0, 16, 4)
        train_x, train_y = synthetic_shapes(20, image_side=16, seed=0, classes=[0, 5])
        stream = TaskStream(train_x, train_y, train_x, train_y, n_tasks=1)
        cfg = quick_config(epochs=50, batch_size=16, base_lr=3e-3)
        empty = ReplaySet(np.zeros((0, 3, 16, 16), np.float32),
                          np.zeros(0, np.int64), [])
        train_task(model, store, stream.tasks[0], cfg, empty)
        task = stream.tasks[0]
        acc = evaluate(model, task.train_images, task.train_labels)
        assert acc > 0.9


class TestEvaluate:
    def test_empty_rejected(self):
        model = tiny_model()
        model.grow_head(2)
        with pytest.raises(ValueError):
            evaluate(model, np.zeros((0, 3, 16, 16), np.float32), np.zeros(0, np.int64))

    def test_mode_restored_and_batching_irrelevant(self):
        model = tiny_model()
        model.grow_head(3)
        model.train()
        images, labels = synthetic_shapes(3, image_side=16, seed=0, classes=[0, 1, 2])
        labels = labels.copy() % 3
        a = evaluate(model, images, labels, batch_size=2)
        b = evaluate(model, images, labels, batch_size=64)
        assert a == b
        assert model.training


class TestCheckpointing:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = tiny_model()
        model.grow_head(4)
        store = ExemplarStore(2 * full_image_bytes(16, 3), 16, 4, seed=7)
        images, _ = synthetic_shapes(5, image_side=16, seed=0, classes=[0])
        store.admit_class(0, list(images), 0.75)
        ledger = MetricsLedger()
        ledger.add_task_row([0.5], [10], wall_clock=1.25)
        ledger.replay_mse = [0.01, 0.02]

        path = tmp_path / "ck.pt"
        save_checkpoint(path, 1, model, store, ledger)
        ckpt = load_checkpoint(path)
        assert ckpt["task"] == 1
        assert ckpt["head_classes"] == 4

        back = restore_model(ckpt)
        for key, tensor in model.state_dict().items():
            assert torch.equal(ckpt["model_state"][key], tensor)
            assert torch.equal(back.state_dict()[key], tensor)
        restored = ExemplarStore.from_bytes(ckpt["store_bytes"], 16, 4,
                                            seed=ckpt["store_seed"])
        assert restored.to_bytes() == store.to_bytes()
        assert restored.seed == 7


class TestRunExperiment:
    def test_deterministic_accuracy_matrix(self):
        stream = tiny_stream(n_per_class=10)
        mc = ModelConfig(**TINY_MODEL)
        tc = quick_config()
        budget = 2 * 2 * full_image_bytes(16, 3)
        a = run_experiment(stream, mc, tc, budget)
        b = run_experiment(stream, mc, tc, budget)
        assert a.acc == b.acc
        assert a.replay_mse == b.replay_mse
        assert len(a.acc) == 2 and [len(r) for r in a.acc] == [1, 2]

    def test_artifacts_and_replay_tracking(self, tmp_path):
        stream = tiny_stream(n_per_class=10)
        mc = ModelConfig(**TINY_MODEL)
        tc = quick_config()
        budget = 2 * 2 * full_image_bytes(16, 3)
        ledger = run_experiment(stream, mc, tc, budget, out_dir=tmp_path)
        assert (tmp_path / "checkpoints" / "task_01.pt").exists()
        assert (tmp_path / "checkpoints" / "task_02.pt").exists()
        assert (tmp_path / "store.bmst").exists()
        lines = (tmp_path / "loss_log.csv").read_text().strip().splitlines()
        assert lines[0] == "step,task,cls,rec,det,total"
        # task 1: ceil(20/8) = 3 steps; task 2 adds 16 replay: ceil(36/8) = 5
        assert len(lines) - 1 == 3 + 5
        final = load_checkpoint(tmp_path / "checkpoints" / "task_02.pt")
        assert final["head_classes"] == 4
        store = ExemplarStore.from_bytes(
            (tmp_path / "store.bmst").read_bytes(), 16, 4)
        assert store.used_bytes <= store.budget_bytes == budget
        # task 1 admits 8 records per class (budget split two ways during
        # task 1), all replayed once at the start of task 2
        assert len(ledger.replay_mse) == 16
        assert all(m >= 0 for m in ledger.replay_mse)

    def test_resume_matches_straight_run(self, tmp_path):
        mc = ModelConfig(**TINY_MODEL)
        tc = quick_config(epochs=2)
        budget = 2 * 2 * full_image_bytes(16, 3)

        full_dir = tmp_path / "full"
        stream = tiny_stream(n_per_class=10)
        full = run_experiment(stream, mc, tc, budget, out_dir=full_dir)

        resumed_dir = tmp_path / "resumed"
        stream_a = tiny_stream(n_per_class=10)
        partial = SimpleNamespace(tasks=stream_a.tasks[:1])
        run_experiment(partial, mc, tc, budget, out_dir=resumed_dir)
        stream_b = tiny_stream(n_per_class=10)
        resumed = run_experiment(stream_b, mc, tc, budget, out_dir=resumed_dir,
                                 resume=True)

        assert resumed.acc == full.acc
        assert resumed.test_sizes == full.test_sizes
        assert ((resumed_dir / "loss_log.csv").read_bytes()
                == (full_dir / "loss_log.csv").read_bytes())
        final_a = load_checkpoint(full_dir / "checkpoints" / "task_02.pt")
        final_b = load_checkpoint(resumed_dir / "checkpoints" / "task_02.pt")
        for key, tensor in final_a["model_state"].items():
            assert torch.equal(final_b["model_state"][key], tensor)
        assert final_a["store_bytes"] == final_b["store_bytes"]

    def test_zero_budget_runs_without_replay(self):
        stream = tiny_stream(n_per_class=4)
        ledger = run_experiment(stream, ModelConfig(**TINY_MODEL), quick_config(), 0)
        assert len(ledger.acc) == 2
        assert ledger.replay_mse == []
