"""On-disk patch archive: one binary record file per subject plus ``index.json``.

Record layout (little endian)::

    file   := b"GDSMPAT1" uint32:count record*
    record := uint8:stream uint8:plane int32:slice_index int32:encoded_label
              uint8:gender uint8:augmented float64:age uint64:seed
              int16:region_index uint32:axis_length uint32:h uint32:w
              float32[h*w]:image (row major)

``region_index`` points into the index's ``regions`` list (-1 for global slices).
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import FileMissing, FormatError, MissingPatches
from .extraction import PLANES, ExtractedPatch, Plane

MAGIC = b"GDSMPAT1"
_COUNT = struct.Struct("<I")
_HEADER = struct.Struct("<BBiiBBdQhIII")
_STREAMS = ("local", "global")


class PatchArchive:
    def __init__(self, root, stream: str, regions: Sequence[str] = ()):
        if stream not in _STREAMS:
            raise ValueError(f"unknown stream {stream!r}")
        self.root = Path(root)
        self.stream = stream
        self.regions = list(regions)
        self.subjects: dict[str, dict] = {}
        self.config_hash = ""
        self.split = ""

    @property
    def index_path(self) -> Path:
        return self.root / "index.json"

    def _file(self, subject_id: str) -> Path:
        return self.root / f"{subject_id}.gpa"

    def write_subject(self, subject_id: str, patches: Sequence[ExtractedPatch]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        region_ids = {name: i for i, name in enumerate(self.regions)}
        with open(self._file(subject_id), "wb") as fh:
            fh.write(MAGIC)
            fh.write(_COUNT.pack(len(patches)))
            for p in patches:
                if p.stream != self.stream:
                    raise FormatError(f"{p.stream} patch written to {self.stream} archive")
                if p.region and p.region not in region_ids:
                    region_ids[p.region] = len(self.regions)
                    self.regions.append(p.region)
                h, w = p.image.shape
                fh.write(_HEADER.pack(
                    _STREAMS.index(p.stream), int(p.plane), p.slice_index, p.encoded_label,
                    p.gender, int(p.augmented), float(p.target_age), int(p.seed),
                    region_ids[p.region] if p.region else -1, p.axis_length, h, w,
                ))
                fh.write(np.ascontiguousarray(p.image, dtype="<f4").tobytes())
        clean = Counter(p.plane.label for p in patches if not p.augmented)
        aug = Counter(p.plane.label for p in patches if p.augmented)
        self.subjects[subject_id] = {
            "file": self._file(subject_id).name,
            "counts": {pl.label: clean.get(pl.label, 0) for pl in PLANES},
            "augmented": {pl.label: aug.get(pl.label, 0) for pl in PLANES},
        }

    def write_index(self, config_hash: str = "", split: str = "") -> None:
        self.config_hash = config_hash or self.config_hash
        self.split = split or self.split
        doc = {
            "stream": self.stream,
            "split": self.split,
            "config_hash": self.config_hash,
            "regions": self.regions,
            "subjects": self.subjects,
        }
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def open(cls, root) -> "PatchArchive":
        root = Path(root)
        index = root / "index.json"
        if not index.exists():
            raise FileMissing(f"no patch archive index at {index}")
        doc = json.loads(index.read_text(encoding="utf-8"))
        arch = cls(root, doc["stream"], doc["regions"])
        arch.subjects = doc["subjects"]
        arch.config_hash = doc.get("config_hash", "")
        arch.split = doc.get("split", "")
        return arch

    @property
    def subject_ids(self) -> list[str]:
        return sorted(self.subjects)

    def has_augmented(self) -> bool:
        return any(sum(s["augmented"].values()) for s in self.subjects.values())

    def read_subject(self, subject_id: str) -> list[ExtractedPatch]:
        if subject_id not in self.subjects:
            raise MissingPatches(f"{subject_id} not in archive {self.root}")
        raw = self._file(subject_id).read_bytes()
        if raw[:8] != MAGIC:
            raise FormatError(f"{self._file(subject_id)}: bad magic")
        (count,) = _COUNT.unpack_from(raw, 8)
        pos = 8 + _COUNT.size
        out = []
        for _ in range(count):
            (stream, plane, k, label, gender, aug, age, seed, region, axis_len, h, w) = _HEADER.unpack_from(raw, pos)
            pos += _HEADER.size
            image = np.frombuffer(raw, dtype="<f4", count=h * w, offset=pos).reshape(h, w).copy()
            pos += 4 * h * w
            out.append(ExtractedPatch(
                subject_id, Plane(plane), k, image, label, _STREAMS[stream], gender, age, axis_len,
                region=self.regions[region] if region >= 0 else "", augmented=bool(aug), seed=seed,
            ))
        if pos != len(raw):
            raise FormatError(f"{self._file(subject_id)}: trailing bytes")
        return out

    def iter_patches(
        self, subject_ids: Iterable[str] | None = None, plane: Plane | None = None, augmented: bool = True
    ) -> Iterator[ExtractedPatch]:
        for sid in subject_ids if subject_ids is not None else self.subject_ids:
            for p in self.read_subject(sid):
                if plane is not None and p.plane != plane:
                    continue
                if p.augmented and not augmented:
                    continue
                yield p
