"""Seeded synthetic pixel grids standing in for real segmentation data.

Every image is an H x W grid partitioned into Voronoi regions; each region
carries one class and its pixels draw raw features from that class's
Gaussian blob. Blob centers sit on scaled coordinate axes so any two
centers are ``cluster_separation`` cluster widths apart; the per-axis
standard deviation is half a cluster width.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .tensor_store import GridShape, IGNORE, load_npy, save_npy, seeded_rng


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    H: int = 12
    W: int = 12
    classes: int = 3
    raw_dim: int = 4
    cluster_width: float = 1.0
    cluster_separation: float = 4.0
    image_shift: float = 0.0
    regions_per_image: int = 4
    num_train: int = 30
    num_val: int = 10
    labeled_fraction: float = 0.1
    noise_rate: float = 0.1
    class_probs: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.class_probs is not None:
            cp = np.asarray(self.class_probs, dtype=np.float64)
            if cp.shape != (self.classes,) or np.any(cp < 0) or not np.isclose(cp.sum(), 1.0):
                raise SynthSpecError(f"class_probs must be a distribution over {self.classes} classes")
            object.__setattr__(self, "class_probs", tuple(float(v) for v in cp))
        if min(self.H, self.W, self.classes, self.raw_dim, self.regions_per_image) <= 0:
            raise SynthSpecError("grid size, classes, raw_dim and regions_per_image must be positive")
        if self.raw_dim < self.classes:
            raise SynthSpecError(f"raw_dim {self.raw_dim} must be >= classes {self.classes}")
        if self.classes > self.H * self.W or self.regions_per_image > self.H * self.W:
            raise SynthSpecError("more regions/classes than pixels")
        if not 0.0 <= self.noise_rate < 0.5:
            raise SynthSpecError(f"noise_rate must lie in [0, 0.5), got {self.noise_rate}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise SynthSpecError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.cluster_width <= 0 or self.cluster_separation < 0 or self.image_shift < 0:
            raise SynthSpecError("cluster_width must be positive; separation and shift non-negative")
        if self.num_train < 1 or self.num_val < 0:
            raise SynthSpecError("need at least one training image")

    @property
    def sigma(self) -> float:
        return self.cluster_width / 2.0

    @property
    def n_labeled(self) -> int:
        return max(1, math.ceil(self.labeled_fraction * self.num_train))


@dataclass
class SynthBatch:
    images: np.ndarray  # (H*W, raw_dim) raw per-pixel features
    gt: np.ndarray  # (H*W,) int64
    is_labeled: bool
    H: int
    W: int
    width: float = 1.0
    split: str = "train"

    def grid(self, m: int, C: int) -> GridShape:
        return GridShape(self.H, self.W, C, m)

    def replace(self, **kw) -> "SynthBatch":
        return replace(self, **kw)


def class_centers(spec: SynthSpec) -> np.ndarray:
    scale = spec.cluster_separation * spec.cluster_width / math.sqrt(2.0)
    centers = np.zeros((spec.classes, spec.raw_dim))
    centers[np.arange(spec.classes), np.arange(spec.classes)] = scale
    return centers


def voronoi_labels(H: int, W: int, regions: int, classes: int, rng: np.random.Generator,
                   class_probs=None) -> np.ndarray:
    sites = np.column_stack([rng.uniform(0, H, regions), rng.uniform(0, W, regions)])
    if class_probs is None:
        site_class = rng.integers(0, classes, size=regions)
    else:
        site_class = rng.choice(classes, size=regions, p=class_probs)
    rr, cc = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    pix = np.column_stack([rr.ravel(), cc.ravel()])
    d = ((pix[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
    return site_class[d.argmin(axis=1)].astype(np.int64)


def _image(spec: SynthSpec, centers: np.ndarray, rng: np.random.Generator, split: str,
           labeled: bool) -> SynthBatch:
    gt = voronoi_labels(spec.H, spec.W, spec.regions_per_image, spec.classes, rng, spec.class_probs)
    noise = rng.normal(0.0, spec.sigma, size=(gt.size, spec.raw_dim))
    shift = rng.normal(0.0, spec.image_shift * spec.cluster_width, size=spec.raw_dim)
    shift[:spec.classes] = 0.0  # the offset lives in the nuisance dims only
    images = centers[gt] + noise + shift
    return SynthBatch(images, gt, labeled, spec.H, spec.W, spec.cluster_width, split)


def generate(spec: SynthSpec) -> list[SynthBatch]:
    """Training images (the first ``n_labeled`` carry labels) followed by validation images."""
    rng = seeded_rng(spec.seed)
    centers = class_centers(spec)
    out = [_image(spec, centers, rng, "train", i < spec.n_labeled) for i in range(spec.num_train)]
    out += [_image(spec, centers, rng, "val", True) for _ in range(spec.num_val)]
    return out


def hflip(batch: SynthBatch) -> SynthBatch:
    perm = np.arange(batch.H * batch.W).reshape(batch.H, batch.W)[:, ::-1].ravel()
    return batch.replace(images=batch.images[perm], gt=batch.gt[perm])


def weak_augment(batch: SynthBatch, rng: np.random.Generator, noise_scale: float = 0.05,
                 flip: bool = True) -> SynthBatch:
    """Isotropic jitter (``noise_scale`` cluster widths) and a random horizontal flip."""
    images = batch.images
    if noise_scale > 0:
        images = images + rng.normal(0.0, noise_scale * batch.width, size=images.shape)
    out = batch.replace(images=images)
    if flip and rng.random() < 0.5:
        out = hflip(out)
    return out


def cutout(batch: SynthBatch, top: int, left: int, h: int, w: int) -> SynthBatch:
    mask = np.zeros((batch.H, batch.W), dtype=bool)
    mask[top:top + h, left:left + w] = True
    images = batch.images.copy()
    images[mask.ravel()] = 0.0
    return batch.replace(images=images)


def strong_extra(batch: SynthBatch, rng: np.random.Generator, scale_range=(0.7, 1.3),
                 cutout_frac: float = 0.25) -> SynthBatch:
    """The perturbations strong augmentation adds on top of the weak ones.

    Per-channel scaling drawn from ``scale_range`` and one zeroed rectangle
    covering at most ``cutout_frac`` of the pixels. Pixel order is kept, so
    a weak view and its strong extension stay aligned.
    """
    lo, hi = scale_range
    images = batch.images
    if hi > lo or lo != 1.0:
        images = images * rng.uniform(lo, hi, size=images.shape[1])
    out = batch.replace(images=images)
    if cutout_frac > 0:
        side = math.sqrt(cutout_frac)
        h = int(rng.integers(1, max(1, int(side * batch.H)) + 1))
        w = int(rng.integers(1, max(1, int(side * batch.W)) + 1))
        top = int(rng.integers(0, batch.H - h + 1))
        left = int(rng.integers(0, batch.W - w + 1))
        out = cutout(out, top, left, h, w)
    return out


def strong_augment(batch: SynthBatch, rng: np.random.Generator, noise_scale: float = 0.05,
                   flip: bool = True, scale_range=(0.7, 1.3), cutout_frac: float = 0.25) -> SynthBatch:
    return strong_extra(weak_augment(batch, rng, noise_scale, flip), rng, scale_range, cutout_frac)


def inject_label_noise(labels, rate: float, rng: np.random.Generator, num_classes: int,
                       candidates=None) -> tuple[np.ndarray, np.ndarray]:
    """Flip exactly floor(rate * n) pixels to a uniformly drawn different class.

    ``candidates`` restricts which pixels may flip (default: all non-IGNORE).
    Returns the noisy labels and the sorted flipped indices.
    """
    if not 0.0 <= rate < 0.5:
        raise ValueError(f"noise rate must lie in [0, 0.5), got {rate}")
    labels = np.asarray(labels, dtype=np.int64)
    count = int(math.floor(rate * labels.size))
    pool = np.flatnonzero(labels != IGNORE) if candidates is None else np.asarray(candidates, dtype=np.int64)
    if count > pool.size:
        raise ValueError(f"cannot flip {count} pixels out of {pool.size} candidates")
    noisy = labels.copy()
    if count == 0 or num_classes < 2:
        return noisy, np.zeros(0, dtype=np.int64)
    flips = np.sort(rng.choice(pool, size=count, replace=False))
    offset = rng.integers(1, num_classes, size=count)
    noisy[flips] = (labels[flips] + offset) % num_classes
    return noisy, flips


def refine_harness(seed: int, n: int = 200, classes: int = 2, separation: float = 4.0,
                   noise_rate: float = 0.1, raw_dim: int | None = None,
                   clean_conf=(0.7, 0.99), flip_conf=(0.5, 0.8)):
    """Noisy-prediction instance for refinement experiments.

    Features are blob samples; predictions put ``clean_conf`` mass on the
    true class, except for ``floor(noise_rate * n)`` interior pixels (closest
    three quarters to their own center) whose mass ``flip_conf`` goes to a
    wrong class. Returns ``(features, probs, gt, flips)``.
    """
    spec = SynthSpec(H=1, W=n, classes=classes, raw_dim=raw_dim or max(classes, 2),
                     cluster_separation=separation, regions_per_image=classes, num_train=1,
                     num_val=0, seed=seed)
    rng = seeded_rng(seed)
    centers = class_centers(spec)
    gt = np.repeat(np.arange(classes), math.ceil(n / classes))[:n]
    gt = rng.permutation(gt)
    x = centers[gt] + rng.normal(0.0, spec.sigma, size=(n, spec.raw_dim))
    dist = np.linalg.norm(x - centers[gt], axis=1)
    interior = np.zeros(n, dtype=bool)
    for c in range(classes):
        idx = np.flatnonzero(gt == c)
        if idx.size:
            interior[idx] = dist[idx] <= np.quantile(dist[idx], 0.75)
    noisy, flips = inject_label_noise(gt, noise_rate, rng, classes, np.flatnonzero(interior))
    conf = rng.uniform(*clean_conf, size=n)
    conf[flips] = rng.uniform(*flip_conf, size=flips.size)
    probs = np.empty((n, classes))
    rest = (1.0 - conf) / max(classes - 1, 1)
    probs[:] = rest[:, None]
    probs[np.arange(n), noisy] = conf
    return x, probs, gt, flips


def write_bundle(batches: list[SynthBatch], spec: SynthSpec, out_dir, extra: dict | None = None) -> dict:
    """Write images/gt NPY files per image plus ``manifest.json``; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i, b in enumerate(batches):
        stem = f"{b.split}_{i:04d}"
        save_npy(b.images, os.path.join(out_dir, f"{stem}_images.npy"))
        save_npy(b.gt, os.path.join(out_dir, f"{stem}_gt.npy"))
        files.append({"images": f"{stem}_images.npy", "gt": f"{stem}_gt.npy",
                      "split": b.split, "is_labeled": bool(b.is_labeled)})
    manifest = {"spec": asdict(spec), "seed": spec.seed, "files": files, **(extra or {})}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_bundle(directory) -> tuple[list[SynthBatch], dict]:
    """Inverse of :func:`write_bundle`."""
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    spec = manifest["spec"]
    out = []
    for f in manifest["files"]:
        images = load_npy(os.path.join(directory, f["images"]), "features")
        gt = load_npy(os.path.join(directory, f["gt"]), "labels")
        out.append(SynthBatch(np.array(images), np.array(gt), bool(f["is_labeled"]), spec["H"], spec["W"],
                              spec["cluster_width"], f["split"]))
    return out, manifest
