"""Seeded rotation/shift/flip augmentation for training patches."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .extraction import ExtractedPatch


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_deg_max: float = 20.0
    width_shift_frac: float = 0.1
    height_shift_frac: float = 0.1
    horizontal_flip: bool = True
    vertical_flip: bool = True  # never applied to global slices
    local_count_range: tuple[int, int] = (0, 6)
    global_count_range: tuple[int, int] = (0, 10)

    def __post_init__(self):
        for name in ("local_count_range", "global_count_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be a non-negative interval, got {(lo, hi)}")
            object.__setattr__(self, name, (int(lo), int(hi)))

    def count_range(self, stream: str) -> tuple[int, int]:
        return self.global_count_range if stream == "global" else self.local_count_range

    def vertical_flip_for(self, stream: str) -> bool:
        return self.vertical_flip and stream != "global"


def derive_seed(global_seed: int, subject_id: str, ordinal: int) -> int:
    digest = hashlib.sha256(f"{global_seed}:{subject_id}:{ordinal}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def transform_image(
    image: np.ndarray, angle_deg: float, shift_rc: tuple[float, float], flip_h: bool, flip_v: bool
) -> np.ndarray:
    """Rotate about the centre, translate, flip; vacated pixels become 0."""
    h, w = image.shape
    theta = math.radians(angle_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # affine_transform maps output coords to input coords: in = R^T (out - c - shift) + c
    matrix = rot.T
    offset = centre - matrix @ (centre + np.asarray(shift_rc, dtype=float))
    out = ndimage.affine_transform(
        np.asarray(image, dtype=np.float64), matrix, offset=offset, order=1, mode="constant", cval=0.0
    )
    if flip_h:
        out = out[:, ::-1]
    if flip_v:
        out = out[::-1, :]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(patch: ExtractedPatch, config: AugmentationConfig, rng_seed: int) -> list[ExtractedPatch]:
    """Draw k copies for the patch's stream and transform each independently.

    Labels, gender and target age are copied; each copy is flagged
    ``augmented`` and records ``rng_seed``.
    """
    rng = np.random.default_rng(rng_seed)
    lo, hi = config.count_range(patch.stream)
    k = int(rng.integers(lo, hi + 1))
    h, w = patch.image.shape
    vflip_enabled = config.vertical_flip_for(patch.stream)
    copies = []
    for _ in range(k):
        angle = rng.uniform(-config.rotation_deg_max, config.rotation_deg_max)
        dx = rng.uniform(-config.width_shift_frac, config.width_shift_frac) * w
        dy = rng.uniform(-config.height_shift_frac, config.height_shift_frac) * h
        flip_h = config.horizontal_flip and rng.random() < 0.5
        flip_v = vflip_enabled and rng.random() < 0.5
        image = transform_image(patch.image, angle, (dy, dx), flip_h, flip_v)
        copies.append(replace(patch, image=image, augmented=True, seed=int(rng_seed)))
    return copies
