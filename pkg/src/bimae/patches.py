"""Patch-level image codec.

Images are split into a square grid of non-overlapping P x P patches. An
exemplar is stored as the subset of patches that survived random masking,
quantized to 8 bits per channel, together with the 2D grid index of each
kept patch.

Record layout (little-endian), sizes fixed so storage arithmetic is exact:

    magic "BMAE" (4B) | version u8 | S u16 | P u8 | C u8 | N u16 | label u16
    | N x (i u8, j u8)            -- grid indices of kept patches
    | N x P*P*C pixel bytes       -- kept patches, row-major, channel-last

No compression is applied; the payload is exactly ``N * P * P * C`` bytes
and the index block exactly ``2 * N`` bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"BMAE"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sBHBBHH")
HEADER_BYTES = _HEADER.size  # 13


class CodecError(ValueError):
    """Malformed image dimensions, mask ratios, or codec parameters."""


class CorruptRecordError(CodecError):
    """Serialized record failed validation (bad magic, truncation, bad index)."""


def full_image_bytes(image_side: int, channels: int = 3) -> int:
    """Quantized pixel payload of one unmasked image, in bytes."""
    return image_side * image_side * channels


def kept_patch_count(n_patches: int, mask_ratio: float) -> int:
    """Number of patches surviving masking: floor(n_patches * (1 - r))."""
    if not 0.0 <= mask_ratio < 1.0:
        raise CodecError(f"mask ratio must be in [0, 1), got {mask_ratio}")
    return int(np.floor(n_patches * (1.0 - mask_ratio)))


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8. Round-trip error is at most 1/510."""
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize(raw: np.ndarray) -> np.ndarray:
    """Map uint8 back to [0, 1] floats."""
    return np.asarray(raw, dtype=np.float64) / 255.0


@dataclass
class PatchGrid:
    """All patches of one image, row-major over the (S/P) x (S/P) grid."""

    patches: np.ndarray  # (n_patches, P*P*C)
    grid_side: int

    @property
    def n_patches(self) -> int:
        return self.grid_side * self.grid_side


@dataclass
class MaskPlan:
    """Kept-patch selection for one image.

    ``kept`` holds (i, j) grid coordinates, one row per kept patch, in
    canonical row-major order; ``grid_side`` is the number of patches per
    image side and fixes the coordinate range.
    """

    kept: np.ndarray  # (n_kept, 2) int
    mask_ratio: float
    grid_side: int

    @property
    def n_kept(self) -> int:
        return int(self.kept.shape[0])

    @property
    def flat_indices(self) -> np.ndarray:
        """Row-major flat index of each kept patch."""
        return self.kept[:, 0] * self.grid_side + self.kept[:, 1]


@dataclass
class PatchSet:
    """One stored exemplar: kept patches (uint8), their indices, and a label."""

    kept: np.ndarray         # (n, 2) int, grid coordinates
    patch_bytes: np.ndarray  # (n, P*P*C) uint8
    label: int
    image_side: int
    patch_side: int
    channels: int = 3

    @property
    def n_kept(self) -> int:
        return int(self.kept.shape[0])

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def payload_bytes(self) -> int:
        return self.n_kept * self.patch_side * self.patch_side * self.channels

    @property
    def index_bytes(self) -> int:
        return 2 * self.n_kept

    @property
    def serialized_bytes(self) -> int:
        return HEADER_BYTES + self.index_bytes + self.payload_bytes

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            self.image_side,
            self.patch_side,
            self.channels,
            self.n_kept,
            self.label,
        )
        idx = np.ascontiguousarray(self.kept.astype(np.uint8))
        payload = np.ascontiguousarray(self.patch_bytes)
        return header + idx.tobytes() + payload.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["PatchSet", int]:
        """Parse one record starting at ``offset``; return (record, next offset)."""
        if len(buf) - offset < HEADER_BYTES:
            raise CorruptRecordError("truncated header")
        magic, version, side, patch, channels, n, label = _HEADER.unpack_from(buf, offset)
        if magic != MAGIC:
            raise CorruptRecordError(f"bad magic {magic!r} at offset {offset}")
        if version != FORMAT_VERSION:
            raise CorruptRecordError(f"unsupported version {version}")
        if patch == 0 or side % patch != 0:
            raise CorruptRecordError(f"image side {side} not divisible by patch side {patch}")
        pos = offset + HEADER_BYTES
        body = 2 * n + n * patch * patch * channels
        if len(buf) - pos < body:
            raise CorruptRecordError(f"truncated record body at offset {pos}")
        kept = np.frombuffer(buf, dtype=np.uint8, count=2 * n, offset=pos).reshape(n, 2).astype(np.int64)
        pos += 2 * n
        grid = side // patch
        if n and int(kept.max(initial=0)) >= grid:
            raise CorruptRecordError("patch index out of range")
        if n and len(np.unique(kept[:, 0] * grid + kept[:, 1])) != n:
            raise CorruptRecordError("duplicate patch index")
        dim = patch * patch * channels
        payload = np.frombuffer(buf, dtype=np.uint8, count=n * dim, offset=pos).reshape(n, dim).copy()
        pos += n * dim
        return cls(kept=kept, patch_bytes=payload, label=label,
                   image_side=side, patch_side=patch, channels=channels), pos


def patchify(image: np.ndarray, patch_side: int) -> PatchGrid:
    """Split a (C, S, S) image into flattened patches, row-major over the grid.

    Row k holds the patch at grid position (k // (S/P), k % (S/P)); within a
    patch, pixels are flattened (P, P, C) channel-last. Lossless.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise CodecError(f"expected (C, S, S) image, got shape {image.shape}")
    channels, height, width = image.shape
    if height != width:
        raise CodecError(f"expected square image, got {height}x{width}")
    if patch_side <= 0 or height % patch_side != 0:
        raise CodecError(f"image side {height} not divisible by patch side {patch_side}")
    grid = height // patch_side
    cells = image.reshape(channels, grid, patch_side, grid, patch_side)
    cells = cells.transpose(1, 3, 2, 4, 0)  # (gi, gj, P, P, C)
    return PatchGrid(patches=cells.reshape(grid * grid, patch_side * patch_side * channels),
                     grid_side=grid)


def unpatchify(grid: PatchGrid, patch_side: int, channels: int = 3) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    g = grid.grid_side
    cells = grid.patches.reshape(g, g, patch_side, patch_side, channels)
    cells = cells.transpose(4, 0, 2, 1, 3)  # (C, gi, P, gj, P)
    side = g * patch_side
    return cells.reshape(channels, side, side)


def sample_mask(n_patches: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Draw a uniform without-replacement subset of floor(n_patches*(1-r)) patches.

    Kept indices are returned in canonical row-major order; the draw is
    deterministic given the generator state.
    """
    n_keep = kept_patch_count(n_patches, mask_ratio)
    grid = int(round(np.sqrt(n_patches)))
    if grid * grid != n_patches:
        raise CodecError(f"patch count {n_patches} is not a square grid")
    flat = np.sort(rng.choice(n_patches, size=n_keep, replace=False))
    kept = np.stack([flat // grid, flat % grid], axis=1).astype(np.int64)
    return MaskPlan(kept=kept, mask_ratio=mask_ratio, grid_side=grid)


def encode_exemplar(image: np.ndarray, plan: MaskPlan, label: int) -> PatchSet:
    """Quantize the planned patches of ``image`` into a storable record."""
    image = np.asarray(image)
    channels, side, _ = image.shape
    if not 0 <= int(label) < 2 ** 16:
        raise CodecError(f"label {label} does not fit the u16 label field")
    if plan.grid_side >= 256:
        raise CodecError(
            f"grid side {plan.grid_side} does not fit one index byte (max 255)")
    if side % plan.grid_side != 0:
        raise CodecError(
            f"mask plan grid {plan.grid_side} inconsistent with image side {side}")
    if plan.n_kept and int(plan.kept.max()) >= plan.grid_side:
        raise CodecError("mask plan index out of range")
    patch_side = side // plan.grid_side
    grid_full = patchify(image, patch_side)
    return PatchSet(
        kept=plan.kept.copy(),
        patch_bytes=quantize(grid_full.patches[plan.flat_indices]),
        label=int(label),
        image_side=side,
        patch_side=patch_side,
        channels=channels,
    )


def decode_exemplar(record: PatchSet) -> tuple[PatchGrid, MaskPlan, int]:
    """Dequantize a record into a sparse patch grid (zeros where masked)."""
    grid = record.grid_side
    dim = record.patch_side * record.patch_side * record.channels
    full = np.zeros((grid * grid, dim), dtype=np.float64)
    plan = MaskPlan(kept=record.kept.copy(),
                    mask_ratio=1.0 - record.n_kept / (grid * grid),
                    grid_side=grid)
    if record.n_kept:
        full[plan.flat_indices] = dequantize(record.patch_bytes)
    return PatchGrid(patches=full, grid_side=grid), plan, record.label


def paste_patches(image: np.ndarray, record: PatchSet) -> np.ndarray:
    """Overwrite the stored patch positions of ``image`` with the exact stored pixels."""
    out = np.array(image, dtype=np.float64, copy=True)
    patches = dequantize(record.patch_bytes)
    p, c = record.patch_side, record.channels
    for row, (i, j) in enumerate(record.kept):
        cell = patches[row].reshape(p, p, c).transpose(2, 0, 1)
        out[:, i * p:(i + 1) * p, j * p:(j + 1) * p] = cell
    return out
