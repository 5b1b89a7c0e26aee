"""Datasets and the class-incremental task stream.

Includes a parametric synthetic-shapes generator for tests and benchmarks:
ten classes of colored shapes on noisy backgrounds, each carrying a
class-specific high-frequency interior texture so reconstruction quality
above the low-frequency band is measurable.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_SHAPE_CLASSES = 10

# (R, G, B) fill colors; classes 0-4 warm palette, 5-9 cool palette.
_COLORS = [
    (0.85, 0.25, 0.20), (0.85, 0.60, 0.15), (0.75, 0.20, 0.60),
    (0.90, 0.45, 0.10), (0.80, 0.80, 0.20),
    (0.20, 0.35, 0.85), (0.20, 0.70, 0.70), (0.30, 0.80, 0.30),
    (0.45, 0.20, 0.90), (0.20, 0.60, 0.90),
]


def _shape_mask(kind: int, side: int, cx: float, cy: float, rad: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    dist = np.sqrt(dx * dx + dy * dy)
    if kind == 0:        # disk
        return dist <= rad
    if kind == 1:        # square
        return np.maximum(np.abs(dx), np.abs(dy)) <= rad
    if kind == 2:        # triangle, apex down
        return (dy >= -rad) & (dy <= rad) & (np.abs(dx) <= (rad - dy) * 0.6)
    if kind == 3:        # ring
        return (dist <= rad) & (dist >= 0.55 * rad)
    if kind == 4:        # plus
        inside = np.maximum(np.abs(dx), np.abs(dy)) <= rad
        return inside & ((np.abs(dx) <= 0.35 * rad) | (np.abs(dy) <= 0.35 * rad))
    raise ValueError(f"unknown shape kind {kind}")


def synthetic_shapes(n_per_class: int, image_side: int = 32, seed: int = 0,
                     classes=None) -> tuple[np.ndarray, np.ndarray]:
    """Generate labeled shape images, (N, 3, S, S) float32 in [0, 1].

    Class identity combines shape (5 kinds), palette (warm/cool) and the
    frequency and orientation of a fixed sinusoidal interior texture.
    Output order is class-major; shuffle downstream if needed.
    """
    if classes is None:
        classes = range(N_SHAPE_CLASSES)
    classes = list(classes)
    if any(not 0 <= c < N_SHAPE_CLASSES for c in classes):
        raise ValueError(f"classes must lie in [0, {N_SHAPE_CLASSES}), got {classes}")
    rng = np.random.default_rng(seed)
    s = image_side
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    images = np.empty((len(classes) * n_per_class, 3, s, s), dtype=np.float32)
    labels = np.empty(len(classes) * n_per_class, dtype=np.int64)
    i = 0
    for cls in classes:
        kind = cls % 5
        color = np.array(_COLORS[cls], dtype=np.float64)
        # fixed per-class grating: frequency in cycles per image width, all
        # well above the 4-cycle band a 0.25 cutoff removes at 32 px, with
        # orientation stepped around the half-circle so the texture is a
        # stable class signature rather than per-image noise
        freq = 6.0 + 0.6 * cls
        theta = np.pi * (cls * 0.382 % 1.0)
        carrier = np.sin(
            2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) / s)
        for _ in range(n_per_class):
            rad = s * rng.uniform(0.26, 0.38)
            cx = rng.uniform(rad, s - rad)
            cy = rng.uniform(rad, s - rad)
            mask = _shape_mask(kind, s, cx, cy, rad)
            img = np.empty((3, s, s), dtype=np.float64)
            background = 0.15 + 0.05 * rng.random()
            img[:] = background
            for ch in range(3):
                img[ch][mask] = color[ch] + 0.22 * carrier[mask]
            img += rng.normal(0.0, 0.02, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
            labels[i] = cls
            i += 1
    return images, labels


def load_cifar100(root) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Read the standard pickled CIFAR-100 distribution from ``root``.

    Expects ``root/cifar-100-python/{train,test}``; returns ((train_x,
    train_y), (test_x, test_y)) with images (N, 3, 32, 32) float32 in [0, 1]
    and fine labels as int64.
    """
    base = Path(root) / "cifar-100-python"
    out = []
    for split in ("train", "test"):
        path = base / split
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR-100 split file {path}")
        with open(path, "rb") as fh:
            raw = pickle.load(fh, encoding="bytes")
        x = raw[b"data"].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        y = np.asarray(raw[b"fine_labels"], dtype=np.int64)
        out.append((x, y))
    return out[0], out[1]


@dataclass
class Task:
    """One task's data with labels remapped to global arrival order."""

    index: int
    classes: tuple[int, ...]          # original class ids
    label_offset: int                 # remapped labels span [offset, offset + len(classes))
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


class TaskStream:
    """Splits a labeled dataset into tasks with disjoint class sets.

    Classes are grouped either by an explicit ``class_groups`` list or by
    chunking a seeded permutation of all classes into ``n_tasks`` equal
    parts. Labels are remapped to arrival order so a classifier head grown
    task by task indexes them directly.
    """

    def __init__(self, train_images, train_labels, test_images, test_labels,
                 n_tasks: int = None, class_order_seed: int = 0, class_groups=None):
        train_labels = np.asarray(train_labels)
        test_labels = np.asarray(test_labels)
        all_classes = np.unique(np.concatenate([train_labels, test_labels]))

        if class_groups is None:
            if n_tasks is None or n_tasks < 1:
                raise ValueError("n_tasks required when class_groups not given")
            if len(all_classes) % n_tasks != 0:
                raise ValueError(
                    f"{len(all_classes)} classes do not split into {n_tasks} equal tasks")
            order = np.random.default_rng(class_order_seed).permutation(all_classes)
            per = len(all_classes) // n_tasks
            class_groups = [order[i * per:(i + 1) * per].tolist() for i in range(n_tasks)]

        flat = [c for group in class_groups for c in group]
        if len(set(flat)) != len(flat):
            raise ValueError("class groups are not disjoint")
        if set(flat) != set(all_classes.tolist()):
            raise ValueError("class groups do not cover every class in the dataset")

        remap = {orig: new for new, orig in enumerate(flat)}
        self.tasks: list[Task] = []
        offset = 0
        for t, group in enumerate(class_groups):
            tr = np.isin(train_labels, group)
            te = np.isin(test_labels, group)
            self.tasks.append(Task(
                index=t + 1,
                classes=tuple(int(c) for c in group),
                label_offset=offset,
                train_images=np.ascontiguousarray(train_images[tr]),
                train_labels=np.array([remap[int(c)] for c in train_labels[tr]], dtype=np.int64),
                test_images=np.ascontiguousarray(test_images[te]),
                test_labels=np.array([remap[int(c)] for c in test_labels[te]], dtype=np.int64),
            ))
            offset += len(group)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_classes(self) -> int:
        return sum(len(task.classes) for task in self.tasks)
