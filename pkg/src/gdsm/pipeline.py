"""Stage orchestration: extract -> train local -> train global -> train correction -> evaluate."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import plotting
from .aggregation import Aggregator, aggregate
from .archive import PatchArchive
from .augmentation import augment, derive_seed
from .config import PipelineConfig
from .errors import ConfigMismatch, MissingPatches, StageOrderViolation
from .extraction import PLANES, extract_global_slices, extract_local_patches
from .metrics import MetricsReport, mae
from .models import (
    LOCAL_STREAMS,
    build_correction_model,
    build_pathway,
    load_model,
    local_stream,
    save_model,
    train,
)
from .selection import (
    PredictionMatrix,
    SelectionResult,
    age_vectors,
    assemble_matrix,
    canonical_columns,
    run_correction,
    select_top,
)
from .volume import DIMS_1MM, DIMS_2MM, load_volume, read_manifest, stratified_split

log = logging.getLogger(__name__)

SPLITS = ("train", "val")
VARIANTS = ("local", "global", "local+global", "full")
STAGE_DEPS = {
    "extract": (),
    "local": ("extract",),
    "global": ("extract", "local"),
    "correction": ("extract", "local", "global"),
}


class Workspace:
    """Filesystem layout of a pipeline run."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = cfg.work_dir
        self.config_hash = cfg.hash()

    def archive_dir(self, split: str, stream: str) -> Path:
        return self.root / "archives" / split / stream

    def archive(self, split: str, stream: str) -> PatchArchive:
        arch = PatchArchive.open(self.archive_dir(split, stream))
        if arch.config_hash != self.config_hash:
            raise ConfigMismatch(f"{arch.root} built with config {arch.config_hash}, current {self.config_hash}")
        return arch

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def split_file(self) -> Path:
        return self.root / "split.json"

    def stamp_path(self, stage: str) -> Path:
        return self.root / "stages" / f"{stage}.json"

    def stamp(self, stage: str, **extra) -> None:
        path = self.stamp_path(stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"stage": stage, "config_hash": self.config_hash, **extra},
                                   indent=2, sort_keys=True) + "\n")

    def done(self, stage: str) -> bool:
        path = self.stamp_path(stage)
        return path.exists() and json.loads(path.read_text())["config_hash"] == self.config_hash

    def require(self, stage: str) -> None:
        for dep in STAGE_DEPS[stage]:
            path = self.stamp_path(dep)
            if not path.exists():
                raise StageOrderViolation(f"stage {stage!r} needs completed stage {dep!r} first")
            got = json.loads(path.read_text())["config_hash"]
            if got != self.config_hash:
                raise ConfigMismatch(f"stage {dep!r} ran with config {got}, current config is {self.config_hash}")

    def split(self) -> dict[str, list[tuple[str, float]]]:
        doc = json.loads(self.split_file.read_text())
        return {k: [tuple(x) for x in v] for k, v in doc.items()}


# ---------------------------------------------------------------- extract


def run_extract(cfg: PipelineConfig, skip_existing: bool = False) -> Workspace:
    ws = Workspace(cfg)
    if skip_existing and ws.done("extract"):
        log.info("extract: up to date, skipped")
        return ws
    manifest = read_manifest(cfg.resolve(cfg.paths.manifest))
    train_m, val_m = stratified_split(manifest, cfg.n_bins, cfg.train_frac, cfg.seed)
    ws.root.mkdir(parents=True, exist_ok=True)
    ws.split_file.write_text(json.dumps(
        {"train": [[r.subject_id, r.age] for r in train_m], "val": [[r.subject_id, r.age] for r in val_m]},
        indent=1) + "\n")

    regions = [r.with_mask(r.mask_volume(DIMS_1MM)) for r in cfg.regions()]
    region_names = [r.region_name for r in regions]
    for split, part in (("train", train_m), ("val", val_m)):
        archives = {
            "local": PatchArchive(ws.archive_dir(split, "local"), "local", region_names),
            "global": PatchArchive(ws.archive_dir(split, "global"), "global"),
        }
        for record in part:
            vol_1mm = load_volume(part.resolve(record.path_1mm), DIMS_1MM)
            vol_2mm = load_volume(part.resolve(record.path_2mm), DIMS_2MM)
            extracted = {
                "local": extract_local_patches(vol_1mm, regions, record),
                "global": extract_global_slices(vol_2mm, cfg.global_table, record),
            }
            del vol_1mm, vol_2mm
            for stream, patches in extracted.items():
                out = list(patches)
                if split == "train":
                    for ordinal, p in enumerate(patches):
                        seed = derive_seed(cfg.seed, f"{record.subject_id}/{stream}", ordinal)
                        out += augment(p, cfg.augmentation, seed)
                archives[stream].write_subject(record.subject_id, out)
            log.info("extract %s %s", split, record.subject_id)
        for arch in archives.values():
            arch.write_index(ws.config_hash, split)
    ws.stamp("extract", n_train=len(train_m), n_val=len(val_m))
    return ws


# ---------------------------------------------------------------- train


def _model_seed(cfg: PipelineConfig, stream: str) -> int:
    return derive_seed(cfg.seed, "model", LOCAL_STREAMS.index(stream) if stream in LOCAL_STREAMS
                       else {"global": 3, "correction": 4}[stream]) % (2**31)


def _training_config(cfg: PipelineConfig, stream: str):
    from dataclasses import replace

    return replace(cfg.training, seed=_model_seed(cfg, stream))


def _load_bundle(ws: Workspace, streams) -> dict:
    return {s: load_model(ws.checkpoints, s) for s in streams}


def _plot_history(ws: Workspace, stream: str, history) -> None:
    ws.reports.mkdir(parents=True, exist_ok=True)
    plotting.plot_history(history.epochs, ws.reports / f"history_{stream}.png", title=stream)


def run_train(cfg: PipelineConfig, stage: str, skip_existing: bool = False) -> Workspace:
    ws = Workspace(cfg)
    if stage not in ("local", "global", "correction"):
        raise ValueError(f"unknown stage {stage!r}")
    ws.require(stage)
    if skip_existing and ws.done(stage):
        log.info("train %s: up to date, skipped", stage)
        return ws
    if stage == "local":
        _train_local(cfg, ws)
    elif stage == "global":
        _train_global(cfg, ws)
    else:
        _train_correction(cfg, ws)
    ws.stamp(stage)
    return ws


def _train_local(cfg: PipelineConfig, ws: Workspace) -> None:
    train_arch, val_arch = ws.archive("train", "local"), ws.archive("val", "local")
    for plane in PLANES:
        stream = local_stream(plane)
        tr = list(train_arch.iter_patches(plane=plane))
        va = list(val_arch.iter_patches(plane=plane, augmented=False))
        model = build_pathway(stream, seed=_model_seed(cfg, stream))
        model, history = train(model, tr, va, _training_config(cfg, stream))
        save_model(model, ws.checkpoints, history, ws.config_hash)
        _plot_history(ws, stream, history)
        del tr, va


def _train_global(cfg: PipelineConfig, ws: Workspace) -> None:
    tr = list(ws.archive("train", "global").iter_patches())
    va = list(ws.archive("val", "global").iter_patches(augmented=False))
    model = build_pathway("global", seed=_model_seed(cfg, "global"))
    model, history = train(model, tr, va, _training_config(cfg, "global"))
    save_model(model, ws.checkpoints, history, ws.config_hash)
    _plot_history(ws, "global", history)


def base_matrix(ws: Workspace, split: str, models=None) -> PredictionMatrix:
    """Local + global predictions for every subject of ``split`` (un-augmented patches)."""
    cfg = ws.cfg
    models = models or _load_bundle(ws, LOCAL_STREAMS + ("global",))
    columns = canonical_columns(cfg.regions(), cfg.global_table)
    archives = {"local": ws.archive(split, "local"), "global": ws.archive(split, "global")}
    matrix = assemble_matrix(models, archives, ws.split()[split], columns, split, ws.config_hash)
    (ws.root / "matrices").mkdir(parents=True, exist_ok=True)
    matrix.save(ws.root / "matrices" / f"{split}.gpm")
    return matrix


def global_columns(cfg: PipelineConfig) -> list[dict]:
    return canonical_columns([], cfg.global_table)


def _train_correction(cfg: PipelineConfig, ws: Workspace) -> None:
    models = _load_bundle(ws, LOCAL_STREAMS + ("global",))
    train_matrix = base_matrix(ws, "train", models)
    val_matrix = base_matrix(ws, "val", models)
    sel_c1 = select_top(train_matrix, cfg.c1)
    sel_c1.save(ws.root / "selection_c1.json")
    vectors = age_vectors(train_matrix, sel_c1)
    vectors.update(age_vectors(val_matrix, sel_c1))

    model = build_correction_model(models["global"], len(sel_c1.indices), cfg.tail_trainable,
                                   seed=_model_seed(cfg, "correction"))
    tr = list(ws.archive("train", "global").iter_patches())
    va = list(ws.archive("val", "global").iter_patches(augmented=False))
    model, history = train(model, tr, va, _training_config(cfg, "correction"), age_vectors=vectors)
    save_model(model, ws.checkpoints, history, ws.config_hash)
    _plot_history(ws, "correction", history)

    corrected = run_correction(model, ws.archive("train", "global"), train_matrix, sel_c1, global_columns(cfg))
    corrected.save(ws.root / "matrices" / "train_corrected.gpm")
    select_top(corrected, cfg.c2).save(ws.root / "selection_c2.json")
    gap = {
        "train_mae_best_selected": float(mae(train_matrix.values[:, sel_c1.indices[0]], train_matrix.targets)),
        "val_mae_best_selected": float(mae(val_matrix.values[:, sel_c1.indices[0]], val_matrix.targets)),
    }
    (ws.reports).mkdir(parents=True, exist_ok=True)
    (ws.reports / "train_val_gap.json").write_text(json.dumps(gap, indent=2) + "\n")


# ---------------------------------------------------------------- evaluate


def _variant_columns(matrix: PredictionMatrix, variant: str) -> list[int]:
    if variant == "local":
        return matrix.column_indices("local")
    if variant == "global":
        return matrix.column_indices("global")
    return list(range(matrix.shape[1]))


def variant_predictions(ws: Workspace, split: str, variant: str) -> tuple[np.ndarray, PredictionMatrix]:
    """Final per-subject ages for an ablation variant on ``split``.

    Non-full variants average the top-C1 columns of their stream group; the
    full variant averages (or stacks) the top-C2 corrected columns. Every
    selection is ranked on training rows.
    """
    cfg = ws.cfg
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    train_ids = [s for s, _ in ws.split()["train"]]
    if variant != "full":
        ws.require("correction")  # local and global checkpoints
        models = _load_bundle(ws, LOCAL_STREAMS + ("global",))
        train_matrix = base_matrix(ws, "train", models)
        matrix = train_matrix if split == "train" else base_matrix(ws, split, models)
        cols = _variant_columns(train_matrix, variant)
        if not cols:
            raise MissingPatches(f"variant {variant!r} has no configured predictors")
        sel = select_top(train_matrix.columns(cols), cfg.c1)
        sel.indices = [cols[i] for i in sel.indices]
        agg = Aggregator("average")
        return aggregate(matrix, sel, agg, train_ids), matrix

    if not ws.done("correction"):
        raise StageOrderViolation("variant 'full' needs the correction stage")
    models = _load_bundle(ws, LOCAL_STREAMS + ("global", "correction"))
    sel_c1 = SelectionResult.load(ws.root / "selection_c1.json")
    train_base = base_matrix(ws, "train", {k: v for k, v in models.items() if k != "correction"})
    gcols = global_columns(cfg)
    train_corr = run_correction(models["correction"], ws.archive("train", "global"), train_base, sel_c1, gcols, train_ids)
    sel_c2 = select_top(train_corr, cfg.c2)
    agg = Aggregator(cfg.aggregation, cfg.regressor, cfg.seed).fit(train_corr, sel_c2)
    if split == "train":
        corr = train_corr
    else:
        base = base_matrix(ws, split, {k: v for k, v in models.items() if k != "correction"})
        corr = run_correction(models["correction"], ws.archive(split, "global"), base, sel_c1, gcols, train_ids)
    corr.save(ws.root / "matrices" / f"{split}_corrected.gpm")
    return aggregate(corr, sel_c2, agg, train_ids), corr


def per_slice_rows(matrix: PredictionMatrix) -> list[dict]:
    rows = []
    for j, meta in enumerate(matrix.predictor_meta):
        rows.append({
            "stream": meta["stream"], "plane": meta["plane"], "slice_index": meta["slice_index"],
            "region": meta["region"], "mae": mae(matrix.values[:, j], matrix.targets),
        })
    return rows


def write_per_slice(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["stream", "plane", "slice_index", "region", "mae"],
                                lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "mae": f"{r['mae']:.6f}"})


def run_evaluate(cfg: PipelineConfig, split: str, variant: str) -> MetricsReport:
    ws = Workspace(cfg)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    final, matrix = variant_predictions(ws, split, variant)
    report = MetricsReport.compute(final, matrix.targets)
    ws.reports.mkdir(parents=True, exist_ok=True)
    tag = f"{variant.replace('+', '_')}_{split}"
    (ws.reports / f"metrics_{tag}.json").write_text(report.to_json() + "\n")
    (ws.reports / f"metrics_{tag}.txt").write_text(report.to_text(f"variant={variant} split={split}"))
    with open(ws.reports / f"predictions_{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "age", "predicted_age"])
        for sid, age, pred in zip(matrix.subject_ids, matrix.targets, final):
            w.writerow([sid, f"{age:.4f}", f"{pred:.4f}"])
    write_per_slice(per_slice_rows(matrix), ws.reports / f"per_slice_{tag}.csv")
    plotting.plot_predictions(final, matrix.targets, ws.reports / f"predictions_{tag}.png",
                              title=f"{variant} ({split}), MAE {report.mae:.2f} y")
    return report


def run_report(cfg: PipelineConfig, split: str = "val") -> Path:
    """Per-slice MAE of every local, global and (if trained) corrected predictor."""
    ws = Workspace(cfg)
    ws.require("correction" if ws.done("correction") else "global")
    rows = per_slice_rows(base_matrix(ws, split))
    if ws.done("correction"):
        _, corr = variant_predictions(ws, split, "full")
        rows += per_slice_rows(corr)
    ws.reports.mkdir(parents=True, exist_ok=True)
    out = ws.reports / f"per_slice_{split}.csv"
    write_per_slice(rows, out)
    plotting.plot_per_slice(rows, ws.reports / f"per_slice_{split}.png")
    return out
