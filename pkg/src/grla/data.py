"""Dataset ingestion, deterministic splits, and a synthetic domain-shift pair.

Directory datasets follow root/<sublabel>/*.png with a sublabel -> {0,1}
binarization map. The synthetic generator draws two domains that share the
class rule (nucleus count) but differ in global color recipe, so a classifier
must ignore color to transfer.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

__all__ = [
    "LabeledImageSet",
    "SplitSpec",
    "ShiftSpec",
    "DomainRecipe",
    "load_image_dataset",
    "split",
    "synth_shifted_pair",
    "synth_domain",
    "density_oracle",
    "density_oracle_accuracy",
    "concat_sets",
    "mean_image_baseline",
    "MULTI_CANCER_BINARIZATION",
]

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

# sublabel -> binary class maps, y=0 normal/benign, y=1 malignant
MULTI_CANCER_BINARIZATION = {
    "breast": {"breast_benign": 0, "breast_malignant": 1},
    "kidney": {"kidney_normal": 0, "kidney_tumor": 1},
    "lung": {"lung_bnt": 0, "lung_aca": 1},
    "colon": {"colon_bnt": 0, "colon_aca": 1},
}


@dataclass
class LabeledImageSet:
    """Images as N,C,H,W floats in [0,1] with binary class labels."""

    images: np.ndarray
    class_labels: np.ndarray
    domain_id: str
    sublabel_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.class_labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"class_labels shape {self.class_labels.shape} does not match "
                f"{self.images.shape[0]} images"
            )
        if self.class_labels.size and not np.isin(self.class_labels, (0, 1)).all():
            raise ValueError("class_labels must be 0 or 1")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(
            self.images[indices].copy(),
            self.class_labels[indices].copy(),
            self.domain_id,
            dict(self.sublabel_map),
        )

    def fingerprint(self, include_labels=True):
        """Content hash of the decoded arrays (hex digest)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        if include_labels:
            h.update(np.ascontiguousarray(self.class_labels).tobytes())
        h.update(self.domain_id.encode())
        return h.hexdigest()


def concat_sets(a, b, domain_id=None):
    """Row-concatenate two sets (images/labels); domain_id defaults to a's."""
    if a.image_shape != b.image_shape:
        raise ValueError(f"image shapes differ: {a.image_shape} vs {b.image_shape}")
    return LabeledImageSet(
        np.concatenate([a.images, b.images], axis=0),
        np.concatenate([a.class_labels, b.class_labels], axis=0),
        domain_id if domain_id is not None else a.domain_id,
        dict(a.sublabel_map),
    )


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test ratios with a shuffling seed."""

    ratios: tuple = (0.70, 0.15, 0.15)
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        r = tuple(float(v) for v in self.ratios)
        object.__setattr__(self, "ratios", r)
        if len(r) != 3 or any(v < 0 for v in r) or abs(sum(r) - 1.0) > 1e-9:
            raise ValueError(f"ratios must be 3 nonnegative values summing to 1, got {r}")


def load_image_dataset(root_dir, binarization_map, image_size=(32, 32),
                       domain_id=None, lenient=False):
    """Load root/<sublabel>/* into a LabeledImageSet.

    Files are decoded as RGB, bilinearly resized to image_size (H, W), scaled
    to [0,1]. Ordering is lexicographic over (sublabel, filename). A directory
    not present in the map is an error; an undecodable file is an error unless
    lenient, in which case it is reported and skipped.
    """
    root = os.path.abspath(root_dir)
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset root not found: {root}")
    subdirs = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not subdirs:
        raise ValueError(f"no sublabel directories under {root}")
    unmapped = [d for d in subdirs if d not in binarization_map]
    if unmapped:
        raise ValueError(f"unmapped sublabel directories: {unmapped}")

    images, labels = [], []
    skipped = []
    for sub in subdirs:
        subpath = os.path.join(root, sub)
        files = sorted(
            f for f in os.listdir(subpath)
            if f.lower().endswith(IMAGE_EXTENSIONS)
        )
        for fname in files:
            path = os.path.join(subpath, fname)
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB").resize(
                        (image_size[1], image_size[0]), Image.BILINEAR
                    )
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as e:
                if lenient:
                    skipped.append(path)
                    print(f"warning: skipping undecodable file {path}: {e}")
                    continue
                raise ValueError(f"cannot decode image {path}: {e}") from e
            images.append(arr.transpose(2, 0, 1))
            labels.append(binarization_map[sub])
    if not images:
        raise ValueError(f"no images loaded from {root}")
    return LabeledImageSet(
        np.stack(images),
        np.asarray(labels, dtype=np.int64),
        domain_id or os.path.basename(root),
        dict(binarization_map),
    )


def _apportion(n, ratios):
    """Integer split sizes: floor(r0*n), floor(r1*n), remainder."""
    a = int(np.floor(ratios[0] * n))
    b = int(np.floor(ratios[1] * n))
    return a, b, n - a - b


def split(dataset, spec):
    """Deterministic (train, val, test) split, stratified by class by default.

    Overall sizes are floor(r_train*N), floor(r_val*N) and the remainder;
    stratification keeps per-class proportions within one sample.
    """
    n = len(dataset)
    if spec.stratify and n < 10:
        raise ValueError(f"stratified split needs N >= 10, got {n}")
    rng = np.random.default_rng(spec.seed)
    n_train, n_val, n_test = _apportion(n, spec.ratios)

    if not spec.stratify:
        order = rng.permutation(n)
        parts = (order[:n_train], order[n_train:n_train + n_val],
                 order[n_train + n_val:])
        return tuple(dataset.subset(np.sort(p)) for p in parts)

    buckets = ([], [], [])
    classes = np.unique(dataset.class_labels)
    # per-class apportionment, then reconciliation to the global sizes
    per_class = {}
    for c in classes:
        idx = np.flatnonzero(dataset.class_labels == c)
        rng.shuffle(idx)
        per_class[c] = idx
    counts = {c: list(_apportion(len(per_class[c]), spec.ratios)) for c in classes}

    def total(slot):
        return sum(counts[c][slot] for c in classes)

    # move one sample at a time from test into train/val until global sizes hit
    order_cycle = list(classes)
    ci = 0
    while total(0) < n_train:
        c = order_cycle[ci % len(order_cycle)]
        ci += 1
        if counts[c][2] > 0:
            counts[c][0] += 1
            counts[c][2] -= 1
    while total(1) < n_val:
        c = order_cycle[ci % len(order_cycle)]
        ci += 1
        if counts[c][2] > 0:
            counts[c][1] += 1
            counts[c][2] -= 1
    for c in classes:
        idx = per_class[c]
        a, b, _ = counts[c]
        buckets[0].append(idx[:a])
        buckets[1].append(idx[a:a + b])
        buckets[2].append(idx[a + b:])
    parts = tuple(np.sort(np.concatenate(bucket)) for bucket in buckets)
    return tuple(dataset.subset(p) for p in parts)


# ---------------------------------------------------------------------------
# synthetic shifted pair


@dataclass(frozen=True)
class DomainRecipe:
    """Color/texture parameters that define a domain, independent of class.

    channel_perm reorders the RGB channels of the finished frame, standing in
    for a staining protocol that swaps color axes; it applies to every class
    equally, so class/domain independence is preserved.
    """

    background_rgb: tuple = (0.93, 0.80, 0.86)
    tint_rgb: tuple = (1.0, 1.0, 1.0)
    brightness: float = 1.0
    noise_scale: float = 0.03
    texture_seed: int = 0
    channel_perm: tuple = (0, 1, 2)


@dataclass(frozen=True)
class ShiftSpec:
    """Generator settings for a (source, target) pair sharing one class rule."""

    n_per_class: int = 500
    image_size: tuple = (3, 32, 32)
    benign_nuclei: tuple = (3, 6)
    malignant_nuclei: tuple = (16, 24)
    radius_range: tuple = (1.6, 2.2)
    nucleus_rgb: tuple = (0.35, 0.18, 0.42)
    source_recipe: DomainRecipe = field(
        default_factory=lambda: DomainRecipe(
            background_rgb=(0.93, 0.80, 0.86),
            tint_rgb=(1.0, 0.92, 0.96),
            brightness=1.0,
            texture_seed=101,
        )
    )
    target_recipe: DomainRecipe = field(
        default_factory=lambda: DomainRecipe(
            background_rgb=(0.93, 0.80, 0.86),
            tint_rgb=(1.0, 0.92, 0.96),
            brightness=0.62,
            texture_seed=202,
            channel_perm=(2, 0, 1),
        )
    )
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.source_recipe == self.target_recipe:
            raise ValueError("source and target recipes are identical: no shift")


def _render_domain(spec, recipe, domain_id, rng):
    c, h, w = spec.image_size
    n = 2 * spec.n_per_class
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    tex_rng = np.random.default_rng(recipe.texture_seed)
    texture = tex_rng.normal(0.0, 1.0, size=(h, w)).astype(np.float32)
    bg = np.asarray(recipe.background_rgb, dtype=np.float32)
    tint = np.asarray(recipe.tint_rgb, dtype=np.float32)
    nucleus = np.asarray(spec.nucleus_rgb, dtype=np.float32)
    perm = list(recipe.channel_perm)
    if sorted(perm) != list(range(c)):
        raise ValueError(f"channel_perm must permute 0..{c - 1}, got {recipe.channel_perm}")

    for i in range(n):
        label = i % 2
        lo, hi = (spec.benign_nuclei, spec.malignant_nuclei)[label]
        count = int(rng.integers(lo, hi + 1))
        frame = np.broadcast_to(bg[:, None, None], (c, h, w)).copy()
        frame += 0.02 * texture[None, :, :]
        # soft dark blobs: product of (1 - k*gaussian) over nuclei
        absorb = np.ones((h, w), dtype=np.float32)
        for _ in range(count):
            cy = rng.uniform(2, h - 2)
            cx = rng.uniform(2, w - 2)
            r = rng.uniform(*spec.radius_range)
            g = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
            absorb *= 1.0 - 0.85 * g
        frame = frame * absorb[None, :, :] + (1.0 - absorb[None, :, :]) * nucleus[:, None, None]
        frame *= tint[:, None, None] * recipe.brightness
        frame += rng.normal(0.0, recipe.noise_scale, size=(c, h, w)).astype(np.float32)
        images[i] = np.clip(frame, 0.0, 1.0)[perm]
        labels[i] = label
    return LabeledImageSet(images, labels, domain_id)


def synth_shifted_pair(spec):
    """Generate (source, target) sets; byte-identical for a fixed spec."""
    rng = np.random.default_rng(spec.seed)
    source = _render_domain(spec, spec.source_recipe, "synth_source", rng)
    target = _render_domain(spec, spec.target_recipe, "synth_target", rng)
    for name, ds in (("source", source), ("target", target)):
        acc = density_oracle_accuracy(ds)
        if acc < 0.9:
            raise ValueError(
                f"degenerate recipe: density oracle reaches only {acc:.2f} on {name}"
            )
    return source, target


def synth_domain(spec, recipe, domain_id, rng_or_seed):
    """Render one domain under ``spec``'s class rule with an arbitrary recipe.

    Lets callers assemble more than two domains sharing the same rule; the
    pair in synth_shifted_pair is the two-domain special case.
    """
    rng = (
        rng_or_seed
        if isinstance(rng_or_seed, np.random.Generator)
        else np.random.default_rng(rng_or_seed)
    )
    ds = _render_domain(spec, recipe, domain_id, rng)
    acc = density_oracle_accuracy(ds)
    if acc < 0.9:
        raise ValueError(
            f"degenerate recipe: density oracle reaches only {acc:.2f} on {domain_id}"
        )
    return ds


def density_oracle(images, threshold=0.18):
    """Closed-form class rule: fraction of pixels much darker than the image median.

    Returns predicted labels. The rule is color-free, so it transfers across
    domain recipes by construction.
    """
    images = np.asarray(images)
    lum = images.mean(axis=1)  # (N, H, W)
    med = np.median(lum.reshape(lum.shape[0], -1), axis=1)[:, None, None]
    dark_frac = (lum < 0.8 * med).mean(axis=(1, 2))
    return (dark_frac > threshold).astype(np.int64)


def density_oracle_accuracy(dataset, threshold=0.18):
    pred = density_oracle(dataset.images, threshold)
    return float((pred == dataset.class_labels).mean())


def mean_image_baseline(dataset):
    """Per-channel-per-pixel mean image over the set (the IG baseline)."""
    if len(dataset) == 0:
        raise ValueError("mean_image_baseline: empty dataset")
    return dataset.images.mean(axis=0)
