"""Pipeline configuration file (TOML) and stage hashing."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .augmentation import AugmentationConfig
from .errors import FormatError
from .extraction import (
    Plane,
    RegionSpec,
    SliceTable,
    default_regions,
    read_region_config,
    shrink_interval,
)
from .models import TrainingConfig


@dataclass
class Paths:
    manifest: str = "cohort/manifest.jsonl"
    regions: str = ""  # empty: default analytic region boxes
    work_dir: str = "work"


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    global_table: SliceTable = field(default_factory=SliceTable.default)
    local_max_slices: int = 0  # >0 keeps only the central n slices of every region interval
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    c1: int = 10
    c2: int = 3
    aggregation: str = "average"
    regressor: str = "support_vector"
    tail_trainable: int = 4
    n_bins: int = 20
    train_frac: float = 0.8
    seed: int = 0
    base_dir: Path = field(default=Path("."), compare=False)

    # -------------------------------------------------------------- derived

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def work_dir(self) -> Path:
        return self.resolve(self.paths.work_dir)

    def regions(self) -> list[RegionSpec]:
        regions = read_region_config(self.resolve(self.paths.regions)) if self.paths.regions else default_regions()
        if self.local_max_slices > 0:
            regions = [
                replace(r, intervals={p: shrink_interval(iv, self.local_max_slices) for p, iv in r.intervals.items()})
                for r in regions
            ]
        return regions

    def hash(self) -> str:
        """Digest of every setting that affects artifacts (paths excluded)."""
        doc = self.to_dict()
        doc.pop("paths")
        doc["regions"] = [r.to_json() for r in self.regions()]
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    # -------------------------------------------------------------- io

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "c1": self.c1,
            "c2": self.c2,
            "aggregation": self.aggregation,
            "regressor": self.regressor,
            "tail_trainable": self.tail_trainable,
            "n_bins": self.n_bins,
            "train_frac": self.train_frac,
            "local_max_slices": self.local_max_slices,
            "paths": asdict(self.paths),
            "global_table": {k: v for k, v in self.global_table.to_json().items() if v is not None},
            "augmentation": {k: (list(v) if isinstance(v, tuple) else v)
                             for k, v in asdict(self.augmentation).items()},
            "training": asdict(self.training),
        }

    def save(self, path) -> None:
        Path(path).write_text(tomli_w.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "PipelineConfig":
        doc = dict(doc)
        try:
            paths = Paths(**doc.pop("paths", {}))
            table = doc.pop("global_table", None)
            table = SliceTable({Plane.parse(k): v for k, v in table.items()}) if table is not None else SliceTable.default()
            aug = AugmentationConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                        for k, v in doc.pop("augmentation", {}).items()})
            training = TrainingConfig(**doc.pop("training", {}))
            known = {f.name for f in fields(cls)}
            unknown = set(doc) - known
            if unknown:
                raise FormatError(f"unknown config keys: {sorted(unknown)}")
            cfg = cls(paths=paths, global_table=table, augmentation=aug, training=training,
                      base_dir=Path(base_dir), **doc)
        except TypeError as exc:
            raise FormatError(f"bad config: {exc}") from exc
        env_seed = os.environ.get("GDSM_SEED")
        if env_seed:
            cfg.seed = int(env_seed)
        if cfg.aggregation not in ("average", "regression"):
            raise FormatError(f"aggregation must be average or regression, got {cfg.aggregation!r}")
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = tomli.loads(path.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return cls.from_dict(doc, base_dir=path.parent)


def desk_config(**overrides) -> PipelineConfig:
    """Desk-scale preset: one slice per region-plane locally, three per plane globally."""
    table = SliceTable({p: shrink_interval(iv, 3) for p, iv in SliceTable.default().intervals.items()})
    cfg = PipelineConfig(global_table=table, local_max_slices=1)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg
