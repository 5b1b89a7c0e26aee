"""Byte-budgeted replay buffer of encoded patch records.

The budget counts stored pixel payload bytes. It is split equally among all
classes seen so far; when a new class arrives the per-class quota shrinks and
existing classes drop random excess entries, so per-class counts stay equal.
"""

from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np

from .patches import (
    CorruptRecordError,
    PatchSet,
    encode_exemplar,
    kept_patch_count,
    sample_mask,
)

STORE_MAGIC = b"BMST"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sBQI")  # magic, version, budget_bytes, entry_count
STORE_HEADER_BYTES = _STORE_HEADER.size


class StoreError(ValueError):
    pass


class ClassAlreadyAdmittedError(StoreError):
    pass


def payload_bytes_per_record(image_side: int, patch_side: int, mask_ratio: float,
                             channels: int = 3) -> int:
    """Pixel payload size of one record at the given geometry and mask ratio."""
    if image_side % patch_side != 0:
        raise StoreError(f"image side {image_side} not divisible by patch side {patch_side}")
    n_full = (image_side // patch_side) ** 2
    n_kept = kept_patch_count(n_full, mask_ratio)
    return n_kept * patch_side * patch_side * channels


class ExemplarStore:
    """Class-indexed collection of :class:`PatchSet` records under a byte budget.

    Mutation happens only at task boundaries (``admit_class``); iteration
    during an epoch sees a stable snapshot.
    """

    def __init__(self, budget_bytes: int, image_side: int, patch_side: int,
                 channels: int = 3, seed: int = 0):
        if budget_bytes < 0:
            raise StoreError(f"budget must be non-negative, got {budget_bytes}")
        self.budget_bytes = int(budget_bytes)
        self.image_side = image_side
        self.patch_side = patch_side
        self.channels = channels
        self.seed = seed
        self.entries: dict[int, list[PatchSet]] = {}

    # --- accounting -------------------------------------------------------

    @property
    def used_bytes(self) -> int:
        """Stored pixel payload bytes (headers and index bytes excluded)."""
        return sum(rec.payload_bytes for recs in self.entries.values() for rec in recs)

    @property
    def n_entries(self) -> int:
        return sum(len(recs) for recs in self.entries.values())

    @property
    def counts_per_class(self) -> dict[int, int]:
        return {cls: len(recs) for cls, recs in sorted(self.entries.items())}

    def class_quota(self, n_classes: int, record_payload: int) -> int:
        """Entries allowed per class when the budget is split ``n_classes`` ways."""
        if n_classes < 1 or record_payload < 1:
            raise StoreError("need at least one class and a positive record size")
        return self.budget_bytes // (n_classes * record_payload)

    # --- mutation ---------------------------------------------------------

    def admit_class(self, class_id: int, candidates, mask_ratio: float) -> int:
        """Encode and store up to the per-class quota of ``candidates``.

        Recomputes the equal per-class split over all classes including the
        new one and randomly drops existing entries above the new quota.
        Returns the number of records stored for ``class_id``.
        """
        if class_id in self.entries:
            raise ClassAlreadyAdmittedError(f"class {class_id} already admitted")
        if not 0 <= class_id < 2 ** 16:
            raise StoreError(f"class id {class_id} does not fit the record label field")

        record_payload = payload_bytes_per_record(
            self.image_side, self.patch_side, mask_ratio, self.channels)
        quota = self.class_quota(len(self.entries) + 1, record_payload)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, class_id]))

        for cls, recs in self.entries.items():
            cls_quota = self.budget_bytes // (
                (len(self.entries) + 1) * recs[0].payload_bytes) if recs else 0
            if len(recs) > cls_quota:
                keep = np.sort(rng.choice(len(recs), size=cls_quota, replace=False))
                self.entries[cls] = [recs[i] for i in keep]

        n_full = (self.image_side // self.patch_side) ** 2
        stored: list[PatchSet] = []
        for image in list(candidates)[:quota]:
            image = np.asarray(image, dtype=np.float64)
            plan = sample_mask(n_full, mask_ratio, rng)
            stored.append(encode_exemplar(image, plan, class_id))
        self.entries[class_id] = stored

        if self.used_bytes > self.budget_bytes:
            raise StoreError(
                f"accounting bug: used {self.used_bytes} exceeds budget {self.budget_bytes}")
        return len(stored)

    # --- reading ----------------------------------------------------------

    def iterate_for_replay(self, rng: np.random.Generator):
        """Yield every stored record exactly once, in a shuffled order drawn
        from ``rng``."""
        flat = [rec for _, recs in sorted(self.entries.items()) for rec in recs]
        for i in rng.permutation(len(flat)):
            yield flat[i]

    def all_records(self) -> list[PatchSet]:
        return [rec for _, recs in sorted(self.entries.items()) for rec in recs]

    # --- persistence ------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, self.budget_bytes,
                                    self.n_entries)]
        for _, recs in sorted(self.entries.items()):
            parts.extend(rec.to_bytes() for rec in recs)
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, image_side: int, patch_side: int,
                   channels: int = 3, seed: int = 0) -> "ExemplarStore":
        if len(buf) < STORE_HEADER_BYTES:
            raise StoreError(f"container truncated: {len(buf)} bytes")
        magic, version, budget, count = _STORE_HEADER.unpack_from(buf, 0)
        if magic != STORE_MAGIC:
            raise StoreError(f"bad container magic {magic!r}")
        if version != STORE_VERSION:
            raise StoreError(f"unsupported container version {version}")
        store = cls(budget, image_side, patch_side, channels=channels, seed=seed)
        offset = STORE_HEADER_BYTES
        for i in range(count):
            try:
                rec, offset = PatchSet.from_bytes(buf, offset)
            except CorruptRecordError as exc:
                raise StoreError(f"record {i} of {count}: {exc}") from exc
            store.entries.setdefault(rec.label, []).append(rec)
        if offset != len(buf):
            raise StoreError(f"{len(buf) - offset} trailing bytes after {count} records")
        if store.used_bytes > budget:
            raise StoreError(f"container overruns its own budget: {store.used_bytes} > {budget}")
        return store

    @classmethod
    def load(cls, path, image_side: int, patch_side: int, channels: int = 3,
             seed: int = 0) -> "ExemplarStore":
        return cls.from_bytes(Path(path).read_bytes(), image_side, patch_side,
                              channels=channels, seed=seed)


def load_store(path, seed: int = 0) -> ExemplarStore:
    """Load a container, inferring geometry from its first record."""
    buf = Path(path).read_bytes()
    image_side, patch_side, channels = _peek_geometry(buf)
    return ExemplarStore.from_bytes(buf, image_side, patch_side, channels=channels, seed=seed)


def _peek_geometry(buf: bytes) -> tuple[int, int, int]:
    if len(buf) < STORE_HEADER_BYTES:
        raise StoreError(f"container truncated: {len(buf)} bytes")
    _, _, _, count = _STORE_HEADER.unpack_from(buf, 0)
    if count == 0:
        return 224, 16, 3  # empty container carries no geometry; any works
    rec, _ = PatchSet.from_bytes(buf, STORE_HEADER_BYTES)
    return rec.image_side, rec.patch_side, rec.channels


def inspect_store(path) -> dict:
    """Parse and validate a container file, reporting byte accounting.

    The returned dict always has ``valid``; on success it adds budget and
    usage, per-class record counts, the record geometry, and the storage
    multiplier (full-image bytes over per-record payload bytes, i.e. how many
    records fit in the space one uncompressed image would take). Failures
    report the byte offset of the first bad record.
    """
    from .patches import CodecError, full_image_bytes

    buf = Path(path).read_bytes()
    if len(buf) < STORE_HEADER_BYTES:
        return {"valid": False, "error": f"container truncated at offset 0: {len(buf)} bytes"}
    magic, version, budget, count = _STORE_HEADER.unpack_from(buf, 0)
    if magic != STORE_MAGIC:
        return {"valid": False, "error": f"bad container magic {magic!r} at offset 0"}
    if version != STORE_VERSION:
        return {"valid": False, "error": f"unsupported container version {version} at offset 4"}

    per_class: dict[int, int] = {}
    used = 0
    geometries = set()
    payloads = set()
    offset = STORE_HEADER_BYTES
    for i in range(count):
        try:
            rec, offset_next = PatchSet.from_bytes(buf, offset)
        except CodecError as exc:
            return {"valid": False, "error": f"record {i} at offset {offset}: {exc}"}
        per_class[rec.label] = per_class.get(rec.label, 0) + 1
        used += rec.payload_bytes
        geometries.add((rec.image_side, rec.patch_side, rec.channels, rec.n_kept))
        payloads.add(rec.payload_bytes)
        offset = offset_next
    if offset != len(buf):
        return {"valid": False,
                "error": f"{len(buf) - offset} trailing bytes at offset {offset}"}
    if used > budget:
        return {"valid": False,
                "error": f"payload bytes {used} exceed declared budget {budget}"}

    report = {
        "valid": True,
        "budget_bytes": budget,
        "used_bytes": used,
        "entry_count": count,
        "per_class": dict(sorted(per_class.items())),
        "multiplier": None,
        "geometry": None,
    }
    if len(geometries) == 1:
        side, patch, channels, n_kept = next(iter(geometries))
        n_full = (side // patch) ** 2
        report["geometry"] = {"image_side": side, "patch_side": patch,
                              "channels": channels, "kept_patches": n_kept,
                              "mask_ratio": 1.0 - n_kept / n_full}
        report["multiplier"] = full_image_bytes(side, channels) / next(iter(payloads))
    return report


def candidate_selection(images, quota: int, rng: np.random.Generator):
    """Uniform random pick of ``quota`` images without replacement.

    Short classes are taken whole with a warning.
    """
    if quota < 0:
        raise StoreError(f"quota must be non-negative, got {quota}")
    n = len(images)
    if quota >= n:
        if quota > n:
            warnings.warn(f"quota {quota} exceeds class size {n}; taking all", stacklevel=2)
        picks = np.arange(n)
    else:
        picks = rng.choice(n, size=quota, replace=False)
    return [images[int(i)] for i in picks]
