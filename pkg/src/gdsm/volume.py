"""Registered volumes, subject records, manifests, normalization and splitting."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimsMismatch,
    EmptyManifest,
    FileMissing,
    FormatError,
    InvalidParams,
    NonFiniteInput,
)

DIMS_1MM = (182, 218, 182)
DIMS_2MM = (91, 109, 91)

RAW_MAGIC = b"GDSMVOL1".ljust(16, b"\x00")
_RAW_HEADER = struct.Struct("<3I3f")

GENDER_CODES = {"F": 0, "M": 1}
GENDER_LETTERS = {v: k for k, v in GENDER_CODES.items()}


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar voxel grid indexed ``data[x, y, z]`` (x sagittal, y coronal, z axial)."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.flags.writeable:
            data = data.copy()  # never freeze the caller's buffer
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidParams(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        if any(not s > 0 for s in self.spacing_mm):
            raise InvalidParams(f"spacing must be positive, got {self.spacing_mm}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteInput("volume contains non-finite intensities")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    age: float
    gender: int
    path_1mm: str = ""
    path_2mm: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.age) and self.age > 0):
            raise InvalidParams(f"{self.subject_id}: age must be finite and positive, got {self.age}")
        if self.gender not in (0, 1):
            raise InvalidParams(f"{self.subject_id}: gender must be 0 (female) or 1 (male)")

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "age": self.age,
            "gender": GENDER_LETTERS[self.gender],
            "path_1mm": self.path_1mm,
            "path_2mm": self.path_2mm,
        }


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SubjectRecord, ...]
    declared_age_range: tuple[float, float]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        lo, hi = self.declared_age_range
        if not lo <= hi:
            raise InvalidParams(f"bad declared age range {self.declared_age_range}")
        ids = [r.subject_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise InvalidParams("subject_id values must be unique")
        for r in self.records:
            if not lo <= r.age <= hi:
                raise InvalidParams(f"{r.subject_id}: age {r.age} outside declared range {self.declared_age_range}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ages(self) -> np.ndarray:
        return np.array([r.age for r in self.records], dtype=float)

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    def subset(self, records: Iterable[SubjectRecord]) -> "DatasetManifest":
        return replace(self, records=tuple(records))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [json.dumps({"declared_age_range": list(manifest.declared_age_range)})]
    lines += [json.dumps(r.to_json()) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    """Read a JSON-lines manifest; relative volume paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        age_range = tuple(float(a) for a in header["declared_age_range"])
        records = []
        for ln in lines[1:]:
            d = json.loads(ln)
            records.append(
                SubjectRecord(
                    subject_id=str(d["subject_id"]),
                    age=float(d["age"]),
                    gender=GENDER_CODES[d["gender"]],
                    path_1mm=d.get("path_1mm", ""),
                    path_2mm=d.get("path_2mm", ""),
                )
            )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    return DatasetManifest(tuple(records), age_range, root=path.parent)


def write_volume(volume: Volume3D, path) -> None:
    """Write the raw phantom format, or NIfTI-1 when the suffix is ``.nii``/``.nii.gz``."""
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        affine = np.diag(list(volume.spacing_mm) + [1.0])
        img = nib.Nifti1Image(np.asarray(volume.data), affine)
        img.header.set_zooms(volume.spacing_mm)
        nib.save(img, str(path))
        return
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(_RAW_HEADER.pack(*volume.dims, *volume.spacing_mm))
        fh.write(np.asarray(volume.data, dtype="<f4").tobytes(order="F"))


def _read_raw(path: Path) -> Volume3D:
    with open(path, "rb") as fh:
        if fh.read(16) != RAW_MAGIC:
            raise FormatError(f"{path}: bad magic")
        header = fh.read(_RAW_HEADER.size)
        if len(header) != _RAW_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        nx, ny, nz, sx, sy, sz = _RAW_HEADER.unpack(header)
        payload = fh.read()
    count = nx * ny * nz
    if len(payload) != 4 * count:
        raise FormatError(f"{path}: expected {count} voxels, found {len(payload) // 4}")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F")
    return Volume3D(data, (sx, sy, sz))


def _read_nifti(path: Path) -> Volume3D:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as exc:
        raise FormatError(f"{path}: cannot parse NIfTI ({exc})") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise FormatError(f"{path}: expected a 3D image, got shape {data.shape}")
    return Volume3D(data, tuple(float(z) for z in img.header.get_zooms()[:3]))


def load_volume(path, expected_dims: Sequence[int] | None = None) -> Volume3D:
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    if path.name.endswith((".nii", ".nii.gz")):
        volume = _read_nifti(path)
    else:
        volume = _read_raw(path)
    if expected_dims is not None and volume.dims != tuple(expected_dims):
        raise DimsMismatch(f"{path}: dims {volume.dims}, expected {tuple(expected_dims)}")
    return volume


def normalize_patch(image) -> np.ndarray:
    """Min-max scale onto 0..255 then divide by 255. Constant images map to zeros."""
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise NonFiniteInput("patch contains non-finite values")
    if image.size == 0:
        return image
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    scaled = (image - lo) * (255.0 / (hi - lo))
    return np.clip(scaled / 255.0, 0.0, 1.0)


def age_bins(ages: np.ndarray, age_range: tuple[float, float], n_bins: int) -> np.ndarray:
    """Equal-width bin index of each age over ``age_range``; the top edge folds into the last bin."""
    lo, hi = age_range
    width = (hi - lo) / n_bins
    if width <= 0:
        return np.zeros(len(ages), dtype=int)
    idx = np.floor((np.asarray(ages, dtype=float) - lo) / width).astype(int)
    return np.clip(idx, 0, n_bins - 1)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def stratified_split(
    manifest: DatasetManifest, n_bins: int = 20, train_frac: float = 0.8, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Age-stratified train/validation split.

    The validation total is ``round_half_up(N * (1 - train_frac))``; it is
    apportioned across equal-width age bins by largest remainder, so every bin
    stays within one record of its exact quota. Records are drawn from each bin
    after a seeded shuffle. Output manifests keep the input ordering.
    """
    if len(manifest) == 0:
        raise EmptyManifest("cannot split an empty manifest")
    if n_bins < 1 or not 0.0 < train_frac < 1.0:
        raise InvalidParams(f"need n_bins >= 1 and 0 < train_frac < 1, got {n_bins}, {train_frac}")

    val_frac = 1.0 - train_frac
    bins = age_bins(manifest.ages, manifest.declared_age_range, n_bins)
    members = [np.flatnonzero(bins == b) for b in range(n_bins)]
    quotas = np.array([len(m) * val_frac for m in members])
    counts = np.floor(quotas + 1e-9).astype(int)
    remaining = _round_half_up(len(manifest) * val_frac) - int(counts.sum())
    remainders = quotas - counts
    # stable sort: equal remainders resolve toward lower bins
    for b in np.argsort(-remainders, kind="stable")[: max(remaining, 0)]:
        counts[b] += 1

    rng = np.random.default_rng(seed)
    val_idx: set[int] = set()
    for b, m in enumerate(members):
        if len(m) == 0:
            continue
        order = rng.permutation(m)
        val_idx.update(int(i) for i in order[: counts[b]])

    train = [r for i, r in enumerate(manifest.records) if i not in val_idx]
    val = [r for i, r in enumerate(manifest.records) if i in val_idx]
    return manifest.subset(train), manifest.subset(val)
