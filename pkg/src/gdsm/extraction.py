"""Global slice and masked local patch extraction."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import DimsMismatch, EmptyMaskOnSlice, FormatError, IntervalOutOfBounds
from .volume import DIMS_1MM, DIMS_2MM, SubjectRecord, Volume3D, load_volume, normalize_patch

log = logging.getLogger(__name__)

PATCH_SIZE = 80
N_PATCH_TYPES = 4


class Plane(enum.IntEnum):
    AXIAL = 0
    CORONAL = 1
    SAGITTAL = 2

    @property
    def axis(self) -> int:
        # volume axes are (x=sagittal, y=coronal, z=axial)
        return {Plane.AXIAL: 2, Plane.CORONAL: 1, Plane.SAGITTAL: 0}[self]

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "Plane":
        if isinstance(value, Plane):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


PLANES = (Plane.AXIAL, Plane.CORONAL, Plane.SAGITTAL)


def take_slice(data: np.ndarray, plane: Plane, index: int) -> np.ndarray:
    """2D cross-section: axial -> (nx, ny), coronal -> (nx, nz), sagittal -> (ny, nz)."""
    return np.take(data, index, axis=plane.axis)


Interval = tuple[int, int]


def _check_interval(interval: Interval, axis_len: int, what: str) -> None:
    lo, hi = interval
    if not 0 <= lo <= hi < axis_len:
        raise IntervalOutOfBounds(f"{what}: interval [{lo}, {hi}] outside axis of length {axis_len}")


def _parse_interval(value) -> Interval | None:
    if value is None:
        return None
    lo, hi = value
    return int(lo), int(hi)


@dataclass(frozen=True)
class SliceTable:
    """Inclusive per-plane slice intervals for the global stream (2 mm grid)."""

    intervals: Mapping[Plane, Interval | None]

    def __post_init__(self):
        object.__setattr__(
            self, "intervals", {p: _parse_interval(self.intervals.get(p)) for p in PLANES}
        )

    @classmethod
    def default(cls) -> "SliceTable":
        return cls({Plane.AXIAL: (30, 49), Plane.CORONAL: (40, 69), Plane.SAGITTAL: (30, 59)})

    def to_json(self) -> dict:
        return {p.label: (list(v) if v else None) for p, v in self.intervals.items()}

    @classmethod
    def from_json(cls, d: Mapping) -> "SliceTable":
        return cls({Plane.parse(k): v for k, v in d.items()})


@dataclass(frozen=True)
class RegionSpec:
    """A masked local region with per-plane inclusive intervals on the 1 mm grid.

    The mask is either a binary volume file (``mask_path``) or an analytic
    inclusive box ``((x0, x1), (y0, y1), (z0, z1))``.
    """

    region_name: str
    encoded_label: int
    intervals: Mapping[Plane, Interval | None]
    laterality: str
    box: tuple[Interval, Interval, Interval] | None = None
    mask_path: str | None = None
    _mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "intervals", {p: _parse_interval(self.intervals.get(p)) for p in PLANES}
        )
        if not 0 <= self.encoded_label < N_PATCH_TYPES:
            raise FormatError(f"{self.region_name}: encoded_label must be in 0..3")
        if self.laterality not in ("left", "right"):
            raise FormatError(f"{self.region_name}: laterality must be left or right")
        if self.box is None and self.mask_path is None and self._mask is None:
            raise FormatError(f"{self.region_name}: needs a box or a mask")
        if self.box is not None:
            object.__setattr__(self, "box", tuple(_parse_interval(b) for b in self.box))

    def with_mask(self, mask: np.ndarray) -> "RegionSpec":
        return replace(self, _mask=np.asarray(mask, dtype=bool))

    def mask_volume(self, dims=DIMS_1MM) -> np.ndarray:
        if self._mask is not None:
            return self._mask
        if self.mask_path is not None:
            return load_volume(self.mask_path).data > 0.5
        mask = np.zeros(dims, dtype=bool)
        (x0, x1), (y0, y1), (z0, z1) = self.box
        mask[x0 : x1 + 1, y0 : y1 + 1, z0 : z1 + 1] = True
        return mask

    def to_json(self) -> dict:
        d = {
            "region_name": self.region_name,
            "encoded_label": self.encoded_label,
            "intervals": {p.label: (list(v) if v else None) for p, v in self.intervals.items()},
            "laterality": self.laterality,
        }
        if self.mask_path is not None:
            d["mask"] = self.mask_path
        else:
            d["mask"] = {"box": [list(b) for b in self.box]}
        return d

    @classmethod
    def from_json(cls, d: Mapping, root: Path | None = None) -> "RegionSpec":
        mask = d["mask"]
        box = mask_path = None
        if isinstance(mask, Mapping):
            box = mask["box"]
        else:
            p = Path(mask)
            mask_path = str(root / p if root is not None and not p.is_absolute() else p)
        return cls(
            region_name=d["region_name"],
            encoded_label=int(d["encoded_label"]),
            intervals={Plane.parse(k): v for k, v in d["intervals"].items()},
            laterality=d["laterality"],
            box=box,
            mask_path=mask_path,
        )


# (name, label, laterality, axial, coronal, sagittal, phantom box for planes marked absent)
_TABLE1 = [
    ("left_hippocampus", 0, "left", (60, 79), (85, 120), (113, 128)),
    ("right_hippocampus", 0, "right", (60, 79), (85, 120), (60, 72)),
    ("parietal_lateral_left", 1, "left", (66, 94), (80, 110), (100, 120)),
    ("parietal_lateral_right", 1, "right", (66, 94), (80, 110), (60, 80)),
    ("frontal_opercular_left", 2, "left", (70, 84), (135, 140), (125, 140)),
    ("frontal_opercular_right", 2, "right", (70, 84), (135, 140), None),
    ("frontal_lobe_left", 3, "left", (60, 94), None, (100, 120)),
    ("frontal_lobe_right", 3, "right", (60, 94), None, (60, 80)),
]
# extents used for the analytic phantom boxes where the default slice table has no interval
_ABSENT_EXTENTS = {
    ("frontal_opercular_right", Plane.SAGITTAL): (41, 56),
    ("frontal_lobe_left", Plane.CORONAL): (140, 175),
    ("frontal_lobe_right", Plane.CORONAL): (140, 175),
}


def default_regions() -> list[RegionSpec]:
    """The eight local regions with analytic box masks matching the phantom layout."""
    regions = []
    for name, label, side, ax, co, sa in _TABLE1:
        intervals = {Plane.AXIAL: ax, Plane.CORONAL: co, Plane.SAGITTAL: sa}
        extent = {p: intervals[p] or _ABSENT_EXTENTS[(name, p)] for p in PLANES}
        box = (extent[Plane.SAGITTAL], extent[Plane.CORONAL], extent[Plane.AXIAL])
        regions.append(RegionSpec(name, label, intervals, side, box=box))
    return regions


def read_region_config(path) -> list[RegionSpec]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        return [RegionSpec.from_json(d, root=path.parent) for d in doc["regions"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed region config ({exc})") from exc


def write_region_config(regions: Sequence[RegionSpec], path) -> None:
    doc = {"regions": [r.to_json() for r in regions]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def shrink_interval(interval: Interval | None, n: int) -> Interval | None:
    """Central ``n`` slices of an inclusive interval (used for desk-scale configs)."""
    if interval is None:
        return None
    lo, hi = interval
    length = hi - lo + 1
    if length <= n:
        return interval
    start = lo + (length - n) // 2
    return start, start + n - 1


@dataclass(frozen=True)
class ExtractedPatch:
    subject_id: str
    plane: Plane
    slice_index: int
    image: np.ndarray
    encoded_label: int
    stream: str  # "local" or "global"
    gender: int
    target_age: float
    axis_length: int
    region: str = ""
    augmented: bool = False
    seed: int = 0

    @property
    def key(self) -> tuple:
        """Predictor identity of the patch, shared by its augmented copies."""
        return (self.stream, int(self.plane), self.region, self.slice_index)


def patch_count(config) -> dict[str, int]:
    """Per-plane and total patch counts implied by a SliceTable or a region list."""
    counts = {p.label: 0 for p in PLANES}
    if config is None:
        pass
    elif isinstance(config, SliceTable):
        for p, iv in config.intervals.items():
            if iv:
                counts[p.label] += iv[1] - iv[0] + 1
    else:
        for region in config:
            for p, iv in region.intervals.items():
                if iv:
                    counts[p.label] += iv[1] - iv[0] + 1
    counts["total"] = sum(counts[p.label] for p in PLANES)
    return counts


def resize_bilinear(image: np.ndarray, size: tuple[int, int] = (PATCH_SIZE, PATCH_SIZE)) -> np.ndarray:
    """Corner-aligned bilinear resize."""
    image = np.asarray(image, dtype=np.float64)
    factors = (size[0] / image.shape[0], size[1] / image.shape[1])
    out = ndimage.zoom(image, factors, order=1, mode="nearest", grid_mode=False)
    assert out.shape == tuple(size), out.shape
    return out


def extract_global_slices(
    volume_2mm: Volume3D, table: SliceTable, record: SubjectRecord
) -> list[ExtractedPatch]:
    if volume_2mm.dims != DIMS_2MM:
        raise DimsMismatch(f"global stream expects {DIMS_2MM}, got {volume_2mm.dims}")
    patches = []
    for plane in PLANES:
        iv = table.intervals[plane]
        if iv is None:
            continue
        axis_len = volume_2mm.dims[plane.axis]
        _check_interval(iv, axis_len, f"global {plane.label}")
        for k in range(iv[0], iv[1] + 1):
            image = normalize_patch(take_slice(volume_2mm.data, plane, k)).astype(np.float32)
            patches.append(
                ExtractedPatch(
                    record.subject_id, plane, k, image, int(plane), "global",
                    record.gender, record.age, axis_len,
                )
            )
    return patches


def _local_patch(slice2d: np.ndarray, mask2d: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask2d.any(axis=1))
    cols = np.flatnonzero(mask2d.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskOnSlice("mask has no support on this slice")
    masked = np.where(mask2d, slice2d, 0.0)
    crop = masked[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    return normalize_patch(resize_bilinear(crop)).astype(np.float32)


def extract_local_patches(
    volume_1mm: Volume3D, regions: Sequence[RegionSpec], record: SubjectRecord
) -> list[ExtractedPatch]:
    """Masked, bounding-box cropped, 80x80 patches ordered plane -> region -> slice."""
    if volume_1mm.dims != DIMS_1MM:
        raise DimsMismatch(f"local stream expects {DIMS_1MM}, got {volume_1mm.dims}")
    masks = {}
    for region in regions:
        mask = region.mask_volume(volume_1mm.dims)
        if mask.shape != volume_1mm.dims:
            raise DimsMismatch(f"{region.region_name}: mask dims {mask.shape} != volume dims")
        masks[region.region_name] = mask
        for plane, iv in region.intervals.items():
            if iv is not None:
                _check_interval(iv, volume_1mm.dims[plane.axis], f"{region.region_name} {plane.label}")

    patches = []
    for plane in PLANES:
        axis_len = volume_1mm.dims[plane.axis]
        for region in regions:
            iv = region.intervals[plane]
            if iv is None:
                continue
            for k in range(iv[0], iv[1] + 1):
                slice2d = take_slice(volume_1mm.data, plane, k)
                mask2d = take_slice(masks[region.region_name], plane, k)
                try:
                    image = _local_patch(slice2d, mask2d)
                except EmptyMaskOnSlice:
                    log.warning("%s: empty %s mask on %s slice %d, skipped",
                                record.subject_id, region.region_name, plane.label, k)
                    continue
                patches.append(
                    ExtractedPatch(
                        record.subject_id, plane, k, image, region.encoded_label, "local",
                        record.gender, record.age, axis_len, region=region.region_name,
                    )
                )
    return patches
