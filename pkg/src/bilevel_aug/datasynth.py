"""Synthetic histology-like data with a controllable train/test shift.

Images are elliptical "cell" blobs on a textured bright background. Class
identity is carried purely by morphology (blob count, size, eccentricity);
the stain color of every image is drawn independently of its class, so
color is a nuisance factor. The test pool can draw its stain and an affine
deformation from shifted distributions, which is the gap data augmentation
is supposed to close.

Also provides the image-folder loader (PNG/PPM) and the stratified 5-fold
cross-validation splitter.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb as _mpl_hsv_to_rgb

from .tensor import Tensor
from .transforms import AffineParams, affine_grid, grid_sample

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class ClassMorphology:
    """Blob statistics that define one class."""

    count_lo: int
    count_hi: int
    radius_lo: float
    radius_hi: float
    eccentricity: float = 1.0


DEFAULT_CLASSES = (
    ClassMorphology(3, 5, 3.8, 5.0),            # few large round cells
    ClassMorphology(20, 28, 1.2, 1.8),          # many small cells
    ClassMorphology(8, 12, 2.4, 3.2),           # medium density
    ClassMorphology(9, 13, 2.6, 3.4, 2.8),      # elongated cells
)


@dataclass(frozen=True)
class PoolSpec:
    """Stain and deformation distribution of one sampling pool."""

    hue_center: float = 5.0
    hue_jitter: float = 0.10
    sat_center: float = 0.62
    sat_jitter: float = 0.08
    value_center: float = 0.55
    value_jitter: float = 0.05
    bg_value_center: float = 0.93
    bg_value_jitter: float = 0.03
    rot_max_deg: float = 0.0
    shear_max: float = 0.0
    trans_max: float = 0.0

    def deforms(self):
        return self.rot_max_deg > 0 or self.shear_max > 0 or self.trans_max > 0


def shifted_pool(shift):
    """Test-pool distribution at a given shift magnitude in [0, 1]."""
    return PoolSpec(
        hue_center=5.0 - 0.85 * shift,
        hue_jitter=0.10 + 0.25 * shift,
        sat_center=0.62 - 0.22 * shift,
        sat_jitter=0.08 + 0.07 * shift,
        value_center=0.55 - 0.10 * shift,
        value_jitter=0.05 + 0.03 * shift,
        bg_value_center=0.93 - 0.10 * shift,
        bg_value_jitter=0.03 + 0.02 * shift,
        rot_max_deg=24.0 * shift,
        shear_max=0.16 * shift,
        trans_max=0.10 * shift,
    )


@dataclass
class SynthSpec:
    num_classes: int = 4
    samples_per_class: int = 100
    image_size: int = 32
    test_fraction: float = 0.5
    shift: float = 1.0
    noise_std: float = 0.015
    seed: int = 0
    classes: tuple = DEFAULT_CLASSES
    train_pool: PoolSpec = field(default_factory=PoolSpec)
    test_pool: PoolSpec = None

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not 1 <= self.num_classes <= len(self.classes):
            raise ValueError(
                f"num_classes must be in [1, {len(self.classes)}] for the default morphologies"
            )
        if self.test_pool is None:
            self.test_pool = shifted_pool(self.shift)


@dataclass
class LabeledImageSet:
    """Images [N,3,S,S] float32 in [0,1] with labels and optional pool tags."""

    images: np.ndarray
    labels: np.ndarray
    pools: np.ndarray | None = None  # 0 = train pool, 1 = test pool
    class_names: list = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def _render_mask(rng, size, morph):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    survive = np.ones((size, size))
    count = int(rng.integers(morph.count_lo, morph.count_hi + 1))
    for _ in range(count):
        cx = rng.uniform(2.0, size - 2.0)
        cy = rng.uniform(2.0, size - 2.0)
        r = rng.uniform(morph.radius_lo, morph.radius_hi)
        phi = rng.uniform(0, np.pi)
        e = np.sqrt(morph.eccentricity)
        rx, ry = r * e, r / e
        dx = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
        dy = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
        q = np.sqrt((dx / rx) ** 2 + (dy / ry) ** 2)
        blob = 1.0 / (1.0 + np.exp(-(1.0 - q) * 5.0))
        survive *= 1.0 - blob
    return 1.0 - survive


def _smooth_noise(rng, size, cells=4):
    coarse = rng.uniform(-1, 1, (cells, cells))
    reps = int(np.ceil(size / cells))
    return np.kron(coarse, np.ones((reps, reps)))[:size, :size]


def _deformation_delta(rng, pool):
    rot = np.deg2rad(rng.uniform(-pool.rot_max_deg, pool.rot_max_deg))
    shx = rng.uniform(-pool.shear_max, pool.shear_max)
    shy = rng.uniform(-pool.shear_max, pool.shear_max)
    tx = rng.uniform(-pool.trans_max, pool.trans_max)
    ty = rng.uniform(-pool.trans_max, pool.trans_max)
    rotm = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    shear = np.array([[1.0, shx], [shy, 1.0]])
    lin = rotm @ shear
    delta = np.zeros((2, 3))
    delta[:, :2] = lin - np.eye(2)
    delta[0, 2] = tx
    delta[1, 2] = ty
    return delta


def _render_image(rng, spec, morph, pool):
    size = spec.image_size
    mask = _render_mask(rng, size, morph)

    hue = np.mod(rng.uniform(pool.hue_center - pool.hue_jitter,
                             pool.hue_center + pool.hue_jitter), TWO_PI)
    sat = np.clip(rng.uniform(pool.sat_center - pool.sat_jitter,
                              pool.sat_center + pool.sat_jitter), 0.05, 1.0)
    val = np.clip(rng.uniform(pool.value_center - pool.value_jitter,
                              pool.value_center + pool.value_jitter), 0.05, 1.0)
    bg_val = np.clip(rng.uniform(pool.bg_value_center - pool.bg_value_jitter,
                                 pool.bg_value_center + pool.bg_value_jitter), 0.05, 1.0)

    cell_rgb = _mpl_hsv_to_rgb([hue / TWO_PI, sat, val])
    bg_rgb = _mpl_hsv_to_rgb([hue / TWO_PI, sat * 0.25, bg_val])

    texture = 1.0 + 0.05 * _smooth_noise(rng, size)
    img = (
        bg_rgb[:, None, None] * texture[None] * (1.0 - mask)[None]
        + cell_rgb[:, None, None] * mask[None]
    )
    img += rng.normal(0.0, spec.noise_std, img.shape)
    img = np.clip(img, 0.0, 1.0)

    if pool.deforms():
        delta = _deformation_delta(rng, pool)
        warped = grid_sample(
            Tensor(img), affine_grid(AffineParams(Tensor(delta)), size, size)
        )
        img = np.clip(warped.data, 0.0, 1.0)
    return img.astype(np.float32)


def generate(spec):
    """Generate a labeled image set from a SynthSpec (deterministic in seed)."""
    if spec.samples_per_class == 0:
        raise ValueError("degenerate spec: zero samples per class")
    rng = np.random.default_rng(spec.seed)
    n_test = int(round(spec.test_fraction * spec.samples_per_class))
    images, labels, pools = [], [], []
    for cls in range(spec.num_classes):
        morph = spec.classes[cls]
        for i in range(spec.samples_per_class):
            in_test = i < n_test
            pool = spec.test_pool if in_test else spec.train_pool
            images.append(_render_image(rng, spec, morph, pool))
            labels.append(cls)
            pools.append(1 if in_test else 0)
    meta = {
        "generator": "bilevel_aug.datasynth",
        "spec": {
            "num_classes": spec.num_classes,
            "samples_per_class": spec.samples_per_class,
            "image_size": spec.image_size,
            "test_fraction": spec.test_fraction,
            "shift": spec.shift,
            "noise_std": spec.noise_std,
            "seed": spec.seed,
        },
        "train_pool": asdict(spec.train_pool),
        "test_pool": asdict(spec.test_pool),
    }
    return LabeledImageSet(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        pools=np.asarray(pools, dtype=np.uint8),
        class_names=[f"class_{c}" for c in range(spec.num_classes)],
        meta=meta,
    )


# -- folder IO -----------------------------------------------------------------


def write_ppm(path, image):
    """Write [3,H,W] floats in [0,1] as binary 8-bit PPM (exact round trip)."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = arr.shape
    with open(path, "wb") as fp:
        fp.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fp.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fp:
        data = fp.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def _read_image(path):
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _resize_bilinear(image, size):
    if image.shape[1] == size and image.shape[2] == size:
        return image.astype(np.float32)
    grid = affine_grid(AffineParams(Tensor(np.zeros((2, 3)))), size, size)
    out = grid_sample(Tensor(image.astype(np.float64)), grid)
    return out.data.astype(np.float32)


def load_folder(path, image_size=32):
    """Load ``root/<class>/*.png|ppm`` as a labeled image set.

    Unreadable files are skipped with a warning; a class directory with no
    readable image is an error.
    """
    root = Path(path)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories")
    images, labels, skipped = [], [], []
    class_names = [d.name for d in class_dirs]
    for label, d in enumerate(class_dirs):
        count = 0
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in (".png", ".ppm"):
                continue
            try:
                img = _read_image(f)
            except Exception as e:  # noqa: BLE001 - report and move on
                skipped.append(str(f))
                log.warning("skipping unreadable image %s: %s", f, e)
                continue
            images.append(_resize_bilinear(img, image_size))
            labels.append(label)
            count += 1
        if count == 0:
            raise ValueError(f"{d}: class directory has no readable images")
    meta = {"source": str(root), "skipped": skipped}
    return LabeledImageSet(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        pools=None,
        class_names=class_names,
        meta=meta,
    )


def save_folder(dataset, path, fmt="ppm"):
    """Export in the loader's folder layout plus a metadata file."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = dataset.class_names or [
        f"class_{c}" for c in range(int(dataset.labels.max()) + 1)
    ]
    counters = {}
    for img, label in zip(dataset.images, dataset.labels):
        d = root / names[int(label)]
        d.mkdir(exist_ok=True)
        i = counters.get(int(label), 0)
        counters[int(label)] = i + 1
        out = d / f"{i:05d}.{fmt}"
        if fmt == "ppm":
            write_ppm(out, img)
        else:
            from PIL import Image

            arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr.transpose(1, 2, 0)).save(out)
    (root / "metadata.json").write_text(json.dumps(dataset.meta, indent=2))


# -- cross-validation folds -----------------------------------------------------


@dataclass
class FoldPlan:
    folds: list  # list of dicts with train/val/test index arrays
    fractions: tuple
    seed: int

    def __iter__(self):
        return iter(self.folds)

    def __len__(self):
        return len(self.folds)


class _CumulativeAllocator:
    """Rounds per-class quotas so the running total tracks the exact fraction."""

    def __init__(self):
        self.raw = 0.0
        self.assigned = 0

    def take(self, amount):
        self.raw += amount
        n = int(np.floor(self.raw + 0.5)) - self.assigned
        self.assigned += n
        return n


def make_folds(dataset, fractions=(0.4, 0.1, 0.5), seed=0, n_folds=5):
    """Stratified (train, val, test) splits, one per fold.

    Pool-tagged datasets put every test-pool sample in the test role and
    re-partition the train pool into train/val per fold. Untagged datasets
    are split per class by largest-remainder allocation; any fraction
    shortfall goes to the test role so the fold covers the dataset.
    """
    if sum(fractions) > 1.0 + 1e-9:
        raise ValueError("fractions must sum to at most 1")
    labels = np.asarray(dataset.labels)
    classes = np.unique(labels)
    for c in classes:
        if np.sum(labels == c) < n_folds:
            raise ValueError(f"class {c} has fewer samples than folds")
    root = np.random.SeedSequence([seed, 0xF01D])
    fold_seeds = root.spawn(n_folds)
    folds = []
    for fseed in fold_seeds:
        rng = np.random.default_rng(fseed)
        train_idx, val_idx, test_idx = [], [], []
        alloc_tr, alloc_val = _CumulativeAllocator(), _CumulativeAllocator()
        for c in classes:
            cls_idx = np.where(labels == c)[0]
            if dataset.pools is not None:
                pool = dataset.pools[cls_idx]
                test_idx.extend(cls_idx[pool == 1])
                train_pool = rng.permutation(cls_idx[pool == 0])
                f_tr, f_val = fractions[0], fractions[1]
                n_val = alloc_val.take(len(train_pool) * f_val / (f_tr + f_val))
                val_idx.extend(train_pool[:n_val])
                train_idx.extend(train_pool[n_val:])
            else:
                perm = rng.permutation(cls_idx)
                n_tr = alloc_tr.take(len(perm) * fractions[0])
                n_val = alloc_val.take(len(perm) * fractions[1])
                train_idx.extend(perm[:n_tr])
                val_idx.extend(perm[n_tr : n_tr + n_val])
                test_idx.extend(perm[n_tr + n_val :])  # remainder covers the fold
        folds.append(
            {
                "train": np.sort(np.asarray(train_idx, dtype=np.int64)),
                "val": np.sort(np.asarray(val_idx, dtype=np.int64)),
                "test": np.sort(np.asarray(test_idx, dtype=np.int64)),
            }
        )
    return FoldPlan(folds=folds, fractions=tuple(fractions), seed=seed)


def fold_arrays(dataset, fold):
    """Materialize one fold into the engine's data dict."""
    out = {}
    for role in ("train", "val", "test"):
        idx = fold[role]
        out[role] = (dataset.images[idx], dataset.labels[idx])
    return out
