"""Synthetic aging phantoms: paired 1 mm / 2 mm volumes with age-dependent anatomy.

Each phantom is an ellipsoidal "brain" (intensity 0.5) containing a central
ventricle (0.15) that grows with age and eight region ellipsoids (1.0) centred
in the default region boxes that shrink with age. The brain itself shrinks at
half the regional rate, so the foreground voxel count falls with age.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augmentation import derive_seed
from .errors import InvalidParams
from .extraction import default_regions, write_region_config
from .volume import (
    DIMS_1MM,
    DatasetManifest,
    SubjectRecord,
    Volume3D,
    write_manifest,
    write_volume,
)

log = logging.getLogger(__name__)

BASE_AGE = 19.0
BRAIN_CENTRE = (90.5, 108.5, 80.0)
BRAIN_AXES = (70.0, 92.0, 66.0)
VENTRICLE_CENTRE = (90.5, 105.0, 88.0)
VENTRICLE_AXES = (7.0, 22.0, 10.0)
FEMALE_BRAIN_SCALE = 0.97
REGION_FILL = 0.9  # region semi-axes at BASE_AGE, relative to half the box extent

BRAIN_INTENSITY = 0.5
VENTRICLE_INTENSITY = 0.15
REGION_INTENSITY = 1.0


@dataclass(frozen=True)
class PhantomParams:
    age: float
    gender: int
    noise_sigma: float = 0.02
    seed: int = 0
    shrink_rate: float = 0.004
    ventricle_growth_rate: float = 0.006

    def validate(self) -> None:
        if not 19.0 <= self.age <= 77.0:
            raise InvalidParams(f"phantom age must lie in [19, 77], got {self.age}")
        if self.gender not in (0, 1):
            raise InvalidParams("gender must be 0 or 1")
        if self.noise_sigma < 0:
            raise InvalidParams("noise_sigma must be >= 0")
        if not 0 <= self.shrink_rate * (77.0 - BASE_AGE) < 1:
            raise InvalidParams("shrink_rate would collapse regions inside the age range")
        if self.ventricle_growth_rate < 0:
            raise InvalidParams("ventricle_growth_rate must be >= 0")

    @property
    def region_scale(self) -> float:
        return 1.0 - self.shrink_rate * (self.age - BASE_AGE)

    @property
    def brain_scale(self) -> float:
        g = 1.0 if self.gender == 1 else FEMALE_BRAIN_SCALE
        return g * (1.0 - 0.5 * self.shrink_rate * (self.age - BASE_AGE))

    @property
    def ventricle_scale(self) -> float:
        return 1.0 + self.ventricle_growth_rate * (self.age - BASE_AGE)


def region_ellipsoids(params: PhantomParams) -> dict[str, tuple[tuple, tuple]]:
    """Centre and semi-axes of every region ellipsoid for ``params``."""
    out = {}
    for region in default_regions():
        centre = tuple((lo + hi) / 2.0 for lo, hi in region.box)
        axes = tuple(REGION_FILL * (hi - lo + 1) / 2.0 * params.region_scale for lo, hi in region.box)
        out[region.region_name] = (centre, axes)
    return out


def _paint_ellipsoid(data: np.ndarray, centre, axes, value: float) -> None:
    lo = [max(int(np.floor(c - a)), 0) for c, a in zip(centre, axes)]
    hi = [min(int(np.ceil(c + a)) + 1, n) for c, a, n in zip(centre, axes, data.shape)]
    if any(h <= l for l, h in zip(lo, hi)):
        return
    gx, gy, gz = (
        ((np.arange(l, h) - c) / a) ** 2 for l, h, c, a in zip(lo, hi, centre, axes)
    )
    inside = gx[:, None, None] + gy[None, :, None] + gz[None, None, :] <= 1.0
    data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]][inside] = value


def block_mean_2x(data: np.ndarray) -> np.ndarray:
    nx, ny, nz = data.shape
    blocks = np.asarray(data, dtype=np.float64).reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2)
    return blocks.mean(axis=(1, 3, 5)).astype(np.float32)


def generate_subject(params: PhantomParams, subject_id: str = "phantom") -> tuple[Volume3D, Volume3D, SubjectRecord]:
    params.validate()
    data = np.zeros(DIMS_1MM, dtype=np.float32)
    brain_axes = tuple(a * params.brain_scale for a in BRAIN_AXES)
    _paint_ellipsoid(data, BRAIN_CENTRE, brain_axes, BRAIN_INTENSITY)
    vent_axes = tuple(a * params.ventricle_scale for a in VENTRICLE_AXES)
    _paint_ellipsoid(data, VENTRICLE_CENTRE, vent_axes, VENTRICLE_INTENSITY)
    for centre, axes in region_ellipsoids(params).values():
        _paint_ellipsoid(data, centre, axes, REGION_INTENSITY)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.seed)
        data += rng.normal(0.0, params.noise_sigma, size=data.shape).astype(np.float32)

    vol_1mm = Volume3D(data, (1.0, 1.0, 1.0))
    vol_2mm = Volume3D(block_mean_2x(data), (2.0, 2.0, 2.0))
    record = SubjectRecord(subject_id, float(params.age), params.gender)
    return vol_1mm, vol_2mm, record


def generate_cohort(
    n: int,
    age_range: tuple[float, float],
    seed: int,
    out_dir,
    noise_sigma: float = 0.02,
    shrink_rate: float = 0.004,
    ventricle_growth_rate: float = 0.006,
) -> DatasetManifest:
    """Write ``n`` phantoms, the default region config and ``manifest.jsonl`` under ``out_dir``."""
    if n < 1:
        raise InvalidParams("cohort size must be >= 1")
    lo, hi = age_range
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    ages = np.clip(np.round(rng.uniform(lo, hi, size=n), 2), lo, hi)
    records = []
    for i, age in enumerate(ages):
        sid = f"sub-{i + 1:04d}"
        params = PhantomParams(
            age=float(age), gender=i % 2, noise_sigma=noise_sigma, seed=derive_seed(seed, sid, 0),
            shrink_rate=shrink_rate, ventricle_growth_rate=ventricle_growth_rate,
        )
        vol_1mm, vol_2mm, rec = generate_subject(params, sid)
        p1, p2 = f"volumes/{sid}_1mm.gvol", f"volumes/{sid}_2mm.gvol"
        write_volume(vol_1mm, out_dir / p1)
        write_volume(vol_2mm, out_dir / p2)
        records.append(SubjectRecord(sid, rec.age, rec.gender, p1, p2))
        log.debug("wrote %s (age %.2f)", sid, age)

    manifest = DatasetManifest(tuple(records), (float(lo), float(hi)), root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    write_region_config(default_regions(), out_dir / "regions.json")
    return manifest
