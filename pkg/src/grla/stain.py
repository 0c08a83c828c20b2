"""Color-statistics stain normalization (Reinhard-style).

Images move into a decorrelated perceptual space (log-LMS "l-alpha-beta"),
get per-channel moments matched to a reference, and move back to RGB. The
transform is a per-channel affine map in the decorrelated space, so it is
deterministic, parameter-free, and idempotent up to gamut clamping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import LabeledImageSet

__all__ = [
    "StainStats",
    "DegenerateStainError",
    "rgb_to_lalphabeta",
    "lalphabeta_to_rgb",
    "compute_stain_stats",
    "normalize_image",
    "normalize_dataset",
]


class DegenerateStainError(ValueError):
    """Reference statistics unusable: empty image set or zero-variance channel."""

# RGB -> LMS cone response (Reinhard et al. constants)
_RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
_LMS_TO_RGB = np.linalg.inv(_RGB_TO_LMS)

# log-LMS -> decorrelated l/alpha/beta axes
_LAB_AXES = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
_LAB_AXES_INV = np.linalg.inv(_LAB_AXES)

# floor applied before log so black pixels stay finite
_LMS_FLOOR = 1e-6


def _as_pixel_matrix(images):
    """(..., 3, H, W) float array -> (3, P) pixel matrix plus restore shape."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim < 3 or arr.shape[-3] != 3:
        raise ValueError(f"expected (..., 3, H, W) RGB images, got shape {arr.shape}")
    lead = arr.shape[:-3]
    h, w = arr.shape[-2:]
    mat = arr.reshape((-1, 3, h * w)).transpose(1, 0, 2).reshape(3, -1)
    return mat, (lead, h, w)


def _from_pixel_matrix(mat, shape_info):
    lead, h, w = shape_info
    n = int(np.prod(lead)) if lead else 1
    out = mat.reshape(3, n, h * w).transpose(1, 0, 2).reshape(lead + (3, h, w))
    return out


def rgb_to_lalphabeta(images):
    """Map RGB in [0,1] to the decorrelated log-LMS space (same shape)."""
    mat, info = _as_pixel_matrix(images)
    lms = np.maximum(_RGB_TO_LMS @ mat, _LMS_FLOOR)
    lab = _LAB_AXES @ np.log10(lms)
    return _from_pixel_matrix(lab, info)


def lalphabeta_to_rgb(lab_images):
    """Inverse of rgb_to_lalphabeta (no gamut clamping here)."""
    mat, info = _as_pixel_matrix(lab_images)
    lms = np.power(10.0, _LAB_AXES_INV @ mat)
    rgb = _LMS_TO_RGB @ lms
    return _from_pixel_matrix(rgb, info)


@dataclass(frozen=True)
class StainStats:
    """Per-channel mean and std in the decorrelated space."""

    mean: tuple
    std: tuple
    reference_id: str = ""

    def __post_init__(self):
        mean = tuple(float(v) for v in self.mean)
        std = tuple(float(v) for v in self.std)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if len(mean) != 3 or len(std) != 3:
            raise ValueError("stain stats need exactly 3 channel means and stds")
        if not all(np.isfinite(mean)) or not all(np.isfinite(std)):
            raise ValueError("stain stats must be finite")

    def to_json(self):
        return json.dumps(
            {"mean": list(self.mean), "std": list(self.std),
             "reference_id": self.reference_id},
            sort_keys=True, separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(mean=tuple(d["mean"]), std=tuple(d["std"]),
                   reference_id=d.get("reference_id", ""))


def compute_stain_stats(images, reference_id=""):
    """Global per-channel mean/std over all pixels of all images.

    Raises on a zero-variance channel: such a reference cannot anchor a
    moment-matching transform.
    """
    arr = np.asarray(images)
    if arr.size == 0:
        raise DegenerateStainError("compute_stain_stats: no images")
    lab, _ = _as_pixel_matrix(rgb_to_lalphabeta(arr))
    mean = lab.mean(axis=1)
    std = lab.std(axis=1)
    if np.any(std < 1e-8):
        bad = [i for i, s in enumerate(std) if s < 1e-8]
        raise DegenerateStainError(
            f"degenerate reference: zero variance in decorrelated channel(s) {bad}"
        )
    return StainStats(mean=tuple(mean), std=tuple(std), reference_id=reference_id)


def normalize_image(image, source_stats, reference_stats):
    """Per channel in the decorrelated space:
    v' = (v - mu_src) * (sigma_ref / sigma_src) + mu_ref, then back to RGB,
    clamped to [0,1]. A zero sigma_src channel falls back to the pure shift
    mu_ref - mu_src.
    """
    lab = rgb_to_lalphabeta(image)
    mu_s = np.asarray(source_stats.mean)
    sd_s = np.asarray(source_stats.std)
    mu_r = np.asarray(reference_stats.mean)
    sd_r = np.asarray(reference_stats.std)
    scale = np.where(sd_s > 0, sd_r / np.where(sd_s > 0, sd_s, 1.0), 1.0)
    # broadcasting over (..., 3, H, W): reshape channel vectors to (3, 1, 1)
    mu_s3 = mu_s[:, None, None]
    mu_r3 = mu_r[:, None, None]
    scale3 = scale[:, None, None]
    out = (lab - mu_s3) * scale3 + mu_r3
    rgb = lalphabeta_to_rgb(out)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def normalize_dataset(dataset, reference):
    """Normalize every image against the set's own stats toward ``reference``."""
    if len(dataset) == 0:
        raise ValueError("normalize_dataset: empty dataset")
    own = compute_stain_stats(dataset.images, reference_id=dataset.domain_id)
    images = normalize_image(dataset.images, own, reference)
    return LabeledImageSet(
        images, dataset.class_labels.copy(), dataset.domain_id,
        dict(dataset.sublabel_map),
    )
