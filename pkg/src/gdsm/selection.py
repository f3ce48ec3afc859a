"""Prediction matrices, correlation-ranked predictor selection and the age-correction stage."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .archive import PatchArchive
from .errors import (
    FormatError,
    MissingPatches,
    NoDefinedColumns,
    NonFiniteOutput,
    SelectionLeakage,
    TooFewRows,
)
from .extraction import PLANES, RegionSpec, SliceTable
from .models import PathwayModel, encode, local_stream, predict_tensors

TIE_TOL = 1e-12
_MAGIC = b"GDSMPMX1"


@dataclass
class PredictionMatrix:
    """Subjects x predictors matrix of predicted ages with column provenance."""

    values: np.ndarray
    predictor_meta: list[dict]
    subject_ids: list[str]
    targets: np.ndarray
    split: str | None = None
    config_hash: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.values.ndim != 2:
            raise FormatError("prediction matrix must be 2D")
        n, m = self.values.shape
        if len(self.subject_ids) != n or self.targets.shape != (n,):
            raise FormatError("row labels/targets do not match matrix rows")
        if len(self.predictor_meta) != m:
            raise FormatError("predictor metadata does not match matrix columns")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteOutput("prediction matrix contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    def columns(self, idx: Sequence[int]) -> "PredictionMatrix":
        idx = list(idx)
        return PredictionMatrix(self.values[:, idx], [self.predictor_meta[i] for i in idx],
                                list(self.subject_ids), self.targets, self.split, self.config_hash)

    def column_indices(self, stream: str) -> list[int]:
        return [i for i, m in enumerate(self.predictor_meta) if m["stream"] == stream]

    def save(self, path) -> None:
        header = json.dumps({
            "shape": list(self.values.shape),
            "predictor_meta": self.predictor_meta,
            "subject_ids": self.subject_ids,
            "targets": self.targets.tolist(),
            "split": self.split,
            "config_hash": self.config_hash,
            "order": "column_major",
        }).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(self.values.astype("<f8").tobytes(order="F"))

    @classmethod
    def load(cls, path) -> "PredictionMatrix":
        raw = Path(path).read_bytes()
        if raw[:8] != _MAGIC:
            raise FormatError(f"{path}: not a prediction matrix")
        (hlen,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12 : 12 + hlen])
        n, m = header["shape"]
        values = np.frombuffer(raw, dtype="<f8", count=n * m, offset=12 + hlen).reshape((n, m), order="F")
        return cls(values.copy(), header["predictor_meta"], header["subject_ids"],
                   np.asarray(header["targets"]), header["split"], header["config_hash"])


@dataclass
class SelectionResult:
    indices: list[int]
    correlations: list[float]
    source_split: str | None = None
    source_subjects: list[str] = field(default_factory=list)
    predictor_meta: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SelectionResult":
        return cls(**json.loads(Path(path).read_text()))


def pearson_per_column(matrix: PredictionMatrix) -> np.ndarray:
    """Sample Pearson r of every column against the targets; NaN marks zero-variance columns."""
    x = matrix.values
    if x.shape[0] < 2:
        raise TooFewRows("need at least two subjects for correlation")
    dx = x - x.mean(axis=0)
    dy = matrix.targets - matrix.targets.mean()
    sxx = np.sum(dx * dx, axis=0)
    syy = float(np.sum(dy * dy))
    sxy = dy @ dx
    r = np.full(x.shape[1], np.nan)
    ok = (sxx > 0) & (syy > 0)
    r[ok] = np.clip(sxy[ok] / np.sqrt(sxx[ok] * syy), -1.0, 1.0)
    return r


def rank_columns(r: np.ndarray) -> list[int]:
    """Defined columns by descending r; values within TIE_TOL are ties resolved by column index."""
    defined = np.flatnonzero(~np.isnan(r))
    ordered = sorted(defined.tolist(), key=lambda i: (-r[i], i))
    out, group = [], []
    for i in ordered:
        if group and r[group[0]] - r[i] > TIE_TOL:
            out += sorted(group)
            group = []
        group.append(i)
    return out + sorted(group)


def select_top(matrix: PredictionMatrix, c: int) -> SelectionResult:
    if c < 1:
        raise ValueError("c must be >= 1")
    if matrix.split is not None and matrix.split != "train":
        raise SelectionLeakage(f"selection requested on {matrix.split!r} rows; only training rows may drive it")
    r = pearson_per_column(matrix)
    ranked = rank_columns(r)
    if not ranked:
        raise NoDefinedColumns("every predictor column has zero variance")
    chosen = ranked[:c]
    return SelectionResult(chosen, [float(r[i]) for i in chosen], matrix.split, list(matrix.subject_ids),
                           [matrix.predictor_meta[i] for i in chosen])


def check_selection(selection: SelectionResult, train_ids: Sequence[str] | None = None) -> None:
    """Refuse selections that were not computed purely on training rows."""
    if selection.source_split != "train":
        raise SelectionLeakage(f"selection was computed on {selection.source_split!r} rows")
    if train_ids is not None and not set(selection.source_subjects) <= set(train_ids):
        raise SelectionLeakage("selection used subjects outside the training split")


# ---------------------------------------------------------------- assembling


def canonical_columns(regions: Sequence[RegionSpec], table: SliceTable) -> list[dict]:
    """Predictor metadata in canonical order: local planes, then global planes, ascending slices."""
    cols = []
    for plane in PLANES:
        for region in regions:
            iv = region.intervals[plane]
            if iv is None:
                continue
            for k in range(iv[0], iv[1] + 1):
                cols.append({"stream": "local", "plane": plane.label, "slice_index": k,
                             "region": region.region_name, "encoded_label": region.encoded_label})
    for plane in PLANES:
        iv = table.intervals[plane]
        if iv is None:
            continue
        for k in range(iv[0], iv[1] + 1):
            cols.append({"stream": "global", "plane": plane.label, "slice_index": k,
                         "region": "", "encoded_label": int(plane)})
    return cols


def _column_key(meta: Mapping) -> tuple:
    return (meta["stream"], meta["plane"], meta["region"], meta["slice_index"])


def _gather(archives: Mapping[str, PatchArchive], subject_ids, columns):
    """Clean patches per (row, column), grouped by the model stream that scores them."""
    keys = {_column_key(m): j for j, m in enumerate(columns)}
    grouped: dict[str, list] = {}
    for row, sid in enumerate(subject_ids):
        found = set()
        for stream, archive in archives.items():
            for p in archive.iter_patches([sid], augmented=False):
                key = (p.stream, p.plane.label, p.region, p.slice_index)
                if key not in keys:
                    continue
                model_stream = local_stream(p.plane) if p.stream == "local" else "global"
                grouped.setdefault(model_stream, []).append((row, keys[key], p))
                found.add(key)
        missing = [k for k in keys if k not in found]
        if missing:
            raise MissingPatches(f"{sid}: {len(missing)} configured predictors missing, e.g. {missing[0]}")
    return grouped


def assemble_matrix(
    models: Mapping[str, PathwayModel],
    archives: Mapping[str, PatchArchive],
    subjects: Sequence[tuple[str, float]],
    columns: Sequence[dict],
    split: str | None = None,
    config_hash: str = "",
) -> PredictionMatrix:
    """Score every (subject, predictor) with its stream model, using un-augmented patches only.

    ``archives`` maps "local"/"global" to archives; ``subjects`` is an ordered
    sequence of (subject_id, age).
    """
    subject_ids = [s for s, _ in subjects]
    if any(c["stream"] == "local" for c in columns) and "local" not in archives:
        raise MissingPatches("local predictors configured but no local archive given")
    wanted = {c["stream"] for c in columns}
    grouped = _gather({k: v for k, v in archives.items() if k in wanted}, subject_ids, columns)
    values = np.full((len(subject_ids), len(columns)), np.nan)
    for stream, items in grouped.items():
        items.sort(key=lambda t: (t[0], t[1]))
        preds = predict_tensors(models[stream], *encode(models[stream], [p for _, _, p in items])[:2])
        for (row, col, _), v in zip(items, preds):
            values[row, col] = v
    if not np.all(np.isfinite(values)):
        raise NonFiniteOutput("non-finite prediction while assembling matrix")
    return PredictionMatrix(values, [dict(c) for c in columns], subject_ids,
                            np.array([a for _, a in subjects], dtype=float), split, config_hash)


def age_vectors(matrix: PredictionMatrix, selection: SelectionResult) -> dict[str, np.ndarray]:
    sel = matrix.values[:, selection.indices]
    return {sid: sel[i] for i, sid in enumerate(matrix.subject_ids)}


def run_correction(
    correction_model: PathwayModel,
    global_archive: PatchArchive,
    matrix: PredictionMatrix,
    selection: SelectionResult,
    global_columns: Sequence[dict],
    train_ids: Sequence[str] | None = None,
) -> PredictionMatrix:
    """Re-predict every configured global slice from (image, subject's top-C1 age vector)."""
    check_selection(selection, train_ids)
    vectors = age_vectors(matrix, selection)
    subjects = list(zip(matrix.subject_ids, matrix.targets))
    keys = {_column_key(m): j for j, m in enumerate(global_columns)}
    grouped = _gather({"global": global_archive}, matrix.subject_ids, global_columns)
    items = sorted(grouped.get("global", []), key=lambda t: (t[0], t[1]))
    values = np.full((len(subjects), len(keys)), np.nan)
    if items:
        images, aux, _ = encode(correction_model, [p for _, _, p in items], vectors)
        preds = predict_tensors(correction_model, images, aux)
        for (row, col, _), v in zip(items, preds):
            values[row, col] = v
    meta = [dict(m, stream="correction") for m in global_columns]
    return PredictionMatrix(values, meta, list(matrix.subject_ids), matrix.targets, matrix.split,
                            matrix.config_hash)
