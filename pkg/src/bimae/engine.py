"""Task-sequential training loop.

Each task: rebuild replay images once from the stored patch records using
the weights inherited from the previous task, train on the union of current
and replay data with per-step cosine learning-rate decay, then admit the new
classes' exemplars into the store.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import (
    LossReport,
    LossWeights,
    NonFiniteLossError,
    loss_cls,
    loss_det,
    loss_rec,
    total_loss,
)
from .metrics import MetricsLedger
from .model import BilateralMAE, ModelConfig
from .patches import dequantize, paste_patches
from .store import ExemplarStore, candidate_selection, payload_bytes_per_record

# rng stream tags so per-task and per-class generators never collide
_TRAIN_TAG = 17
_SELECT_TAG = 23


@dataclass
class TrainConfig:
    mask_ratio: float = 0.75     # r, training mask
    r1: float = 0.75             # coarse reconstruction mask
    r2: float = 0.4              # fine reconstruction mask
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1e-4
    seed: int = 0
    cutoff_fraction: float = 0.25
    weights: LossWeights = field(default_factory=LossWeights)
    balanced_batches: bool = False
    augment: bool = True         # horizontal flip + random crop with padding
    crop_padding: int = 4

    def __post_init__(self):
        if not 0.0 <= self.r2 < self.r1 < 1.0:
            raise ValueError(f"need 0 <= r2 < r1 < 1, got r1={self.r1}, r2={self.r2}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must be in [0, 1), got {self.mask_ratio}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr toward zero over ``total_steps``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class ReplaySet:
    """Reconstructed old-task images paired with their stored labels."""

    images: np.ndarray   # (M, C, S, S) float32
    labels: np.ndarray   # (M,) int64
    records: list        # the PatchSet each image came from, same order

    def __len__(self) -> int:
        return len(self.records)


def reconstruct_old_samples(model: BilateralMAE, store: ExemplarStore,
                            cutoff_fraction: float, batch_size: int = 64) -> ReplaySet:
    """Decode every stored record to a full image, then paste the stored
    patches back so pixels at stored positions are exact."""
    records = store.all_records()
    cfg = model.config
    if not records:
        empty = np.zeros((0, cfg.channels, cfg.image_side, cfg.image_side), dtype=np.float32)
        return ReplaySet(images=empty, labels=np.zeros(0, dtype=np.int64), records=[])

    was_training = model.training
    model.eval()
    try:
        images = np.empty((len(records), cfg.channels, cfg.image_side, cfg.image_side),
                          dtype=np.float32)
        # batches need equal token counts, so group records by kept-patch count
        by_count: dict[int, list[int]] = {}
        for idx, rec in enumerate(records):
            if (rec.image_side, rec.patch_side) != (cfg.image_side, cfg.patch_side):
                raise ValueError(
                    f"record geometry {rec.image_side}/{rec.patch_side} does not match "
                    f"model {cfg.image_side}/{cfg.patch_side}")
            by_count.setdefault(rec.n_kept, []).append(idx)
        for indices in by_count.values():
            for off in range(0, len(indices), batch_size):
                chunk = indices[off:off + batch_size]
                patches = torch.from_numpy(np.stack(
                    [dequantize(records[i].patch_bytes) for i in chunk]).astype(np.float32))
                kept = torch.from_numpy(np.stack(
                    [records[i].kept[:, 0] * records[i].grid_side + records[i].kept[:, 1]
                     for i in chunk]).astype(np.int64))
                decoded = model.reconstruct_from_patches(patches, kept, cutoff_fraction).numpy()
                for row, i in enumerate(chunk):
                    images[i] = paste_patches(decoded[row], records[i]).astype(np.float32)
    finally:
        model.train(was_training)
    labels = np.array([rec.label for rec in records], dtype=np.int64)
    return ReplaySet(images=images, labels=labels, records=records)


def _sample_batch_indices(n_current: int, n_pool: int, batch_size: int,
                          balanced: bool, rng: np.random.Generator) -> np.ndarray:
    if n_pool == 0:
        raise ValueError("nothing to sample: both current and replay data are empty")
    n_replay = n_pool - n_current
    if balanced and n_replay > 0 and n_current > 0:
        half = batch_size // 2
        return np.concatenate([
            rng.integers(0, n_current, size=batch_size - half),
            rng.integers(n_current, n_pool, size=half),
        ])
    return rng.integers(0, n_pool, size=batch_size)


def _augment_batch(images: np.ndarray, rng: np.random.Generator, padding: int) -> np.ndarray:
    out = images.copy()
    b, _, s, _ = out.shape
    flip = rng.random(b) < 0.5
    out[flip] = out[flip][..., ::-1]
    if padding > 0:
        padded = np.pad(out, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        offsets = rng.integers(0, 2 * padding + 1, size=(b, 2))
        for i in range(b):
            oy, ox = offsets[i]
            out[i] = padded[i, :, oy:oy + s, ox:ox + s]
    return out


def train_task(model: BilateralMAE, store: ExemplarStore, task, cfg: TrainConfig,
               replay: ReplaySet, abort_dump=None):
    """Train one task over current-task data plus the given replay set, then
    admit the task's classes into the store.

    Returns (loss csv rows, list of (stored record, original image) pairs).
    A non-finite loss aborts, dumping model state to ``abort_dump`` if given.
    """
    model.grow_head(len(task.classes))
    if len(replay):
        pool_images = np.concatenate([task.train_images, replay.images])
        pool_labels = np.concatenate([task.train_labels, replay.labels])
    else:
        pool_images = task.train_images
        pool_labels = task.train_labels

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TRAIN_TAG, task.index]))
    steps_per_epoch = max(1, math.ceil(len(pool_images) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
    bilateral = model.config.bilateral

    model.train()
    rows = []
    try:
        for step in range(total_steps):
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = _sample_batch_indices(len(task.train_images), len(pool_images),
                                        cfg.batch_size, cfg.balanced_batches, rng)
            batch = pool_images[idx]
            if cfg.augment:
                batch = _augment_batch(batch, rng, cfg.crop_padding)
            x = torch.from_numpy(np.ascontiguousarray(batch))
            y = torch.from_numpy(pool_labels[idx])

            out = model.forward_train(x, cfg.mask_ratio, rng, cfg.cutoff_fraction)
            x1_hat, x2_hat = model.mask_and_reconstruct(x, cfg.r1, cfg.r2, rng)
            l_cls = loss_cls(out.logits, y)
            l_rec = loss_rec(x, out.x_hat)
            if bilateral:
                l_det = loss_det(out.pred_spectrum, x1_hat, x2_hat, cfg.cutoff_fraction)
            else:
                l_det = torch.zeros((), dtype=x.dtype)
            total, report = total_loss(l_cls, l_rec, l_det, cfg.weights)

            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            rows.append(report.csv_row(step, task.index))
    except NonFiniteLossError:
        if abort_dump is not None:
            torch.save({"task": task.index, "model_state": model.state_dict(),
                        "loss_rows": rows}, abort_dump)
        raise

    pairs = _admit_task_classes(model, store, task, cfg)
    return rows, pairs


def _admit_task_classes(model, store, task, cfg):
    record_payload = payload_bytes_per_record(
        model.config.image_side, model.config.patch_side, cfg.mask_ratio,
        model.config.channels)
    quota = store.class_quota(len(store.entries) + len(task.classes), record_payload)
    pairs = []
    for label in range(task.label_offset, task.label_offset + len(task.classes)):
        class_images = task.train_images[task.train_labels == label]
        select_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SELECT_TAG, label]))
        candidates = candidate_selection(class_images, quota, select_rng)
        store.admit_class(label, candidates, cfg.mask_ratio)
        pairs.extend(zip(store.entries[label], candidates))
    return pairs


@torch.no_grad()
def evaluate(model: BilateralMAE, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Fraction of images whose argmax logit over all grown classes is correct.

    Inputs are presented unmasked.
    """
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    try:
        correct = 0
        for off in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[off:off + batch_size]))
            pred = model.forward_eval(x).argmax(dim=1).numpy()
            correct += int((pred == labels[off:off + batch_size]).sum())
    finally:
        model.train(was_training)
    return correct / len(images)


def save_checkpoint(path, task_index: int, model: BilateralMAE, store: ExemplarStore,
                    ledger: MetricsLedger) -> None:
    torch.save({
        "task": task_index,
        "model_config": asdict(model.config),
        "head_classes": model.head.n_classes,
        "model_state": model.state_dict(),
        "store_bytes": store.to_bytes(),
        "store_seed": store.seed,
        "acc": ledger.acc,
        "test_sizes": ledger.test_sizes,
        "wall_clock": ledger.wall_clock,
        "replay_mse": ledger.replay_mse,
        "torch_rng": torch.get_rng_state(),
    }, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, weights_only=False)


def restore_model(ckpt: dict) -> BilateralMAE:
    config = ModelConfig(**ckpt["model_config"])
    model = BilateralMAE(config)
    if ckpt["head_classes"]:
        model.grow_head(ckpt["head_classes"])
    model.load_state_dict(ckpt["model_state"])
    return model


def _restore_ledger(ckpt: dict) -> MetricsLedger:
    ledger = MetricsLedger()
    for t, row in enumerate(ckpt["acc"]):
        ledger.add_task_row(row, ckpt["test_sizes"][: t + 1],
                            wall_clock=ckpt["wall_clock"][t])
    ledger.replay_mse = list(ckpt["replay_mse"])
    return ledger


def run_experiment(stream, model_config: ModelConfig, train_config: TrainConfig,
                   budget_bytes: int, out_dir=None, resume: bool = False) -> MetricsLedger:
    """Train all tasks in sequence, evaluating on every seen task after each.

    Writes per-task checkpoints, the store container, and a per-step loss CSV
    under ``out_dir`` when given; ``resume=True`` picks up after the last
    completed task's checkpoint. Fully deterministic for fixed seeds.
    """
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(train_config.seed)
    model = BilateralMAE(model_config)
    store = ExemplarStore(budget_bytes, model_config.image_side, model_config.patch_side,
                          channels=model_config.channels, seed=train_config.seed)
    ledger = MetricsLedger()
    start_task = 1

    if resume and ckpt_dir is not None:
        done = sorted(ckpt_dir.glob("task_*.pt"))
        if done:
            ckpt = load_checkpoint(done[-1])
            model = restore_model(ckpt)
            store = ExemplarStore.from_bytes(
                ckpt["store_bytes"], model_config.image_side, model_config.patch_side,
                channels=model_config.channels, seed=ckpt["store_seed"])
            ledger = _restore_ledger(ckpt)
            torch.set_rng_state(ckpt["torch_rng"])
            start_task = ckpt["task"] + 1

    loss_path = out / "loss_log.csv" if out is not None else None
    if loss_path is not None and (start_task == 1 or not loss_path.exists()):
        with open(loss_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LossReport.CSV_FIELDS)

    # maps stored records back to their source images for replay fidelity;
    # rebuilt per run, so resumed runs only track tasks after the restart
    originals: dict[int, np.ndarray] = {}
    original_refs = []

    for task in stream.tasks[start_task - 1:]:
        t_start = time.monotonic()
        replay = reconstruct_old_samples(model, store, train_config.cutoff_fraction,
                                         batch_size=train_config.batch_size)
        for rec, img in zip(replay.records, replay.images):
            source = originals.get(id(rec))
            if source is not None:
                ledger.replay_mse.append(float(np.mean(
                    (img.astype(np.float64) - source.astype(np.float64)) ** 2)))

        abort_dump = out / f"abort_task_{task.index:02d}.pt" if out is not None else None
        rows, pairs = train_task(model, store, task, train_config, replay,
                                 abort_dump=abort_dump)
        for rec, source in pairs:
            originals[id(rec)] = source
            original_refs.append(rec)  # keep records alive so ids stay unique

        if loss_path is not None:
            with open(loss_path, "a", newline="") as fh:
                csv.writer(fh).writerows(rows)

        seen = stream.tasks[: task.index]
        accs = [evaluate(model, k.test_images, k.test_labels) for k in seen]
        ledger.add_task_row(accs, [len(k.test_labels) for k in seen],
                            wall_clock=time.monotonic() - t_start)

        if out is not None:
            save_checkpoint(ckpt_dir / f"task_{task.index:02d}.pt", task.index,
                            model, store, ledger)
            store.save(out / "store.bmst")

    return ledger
