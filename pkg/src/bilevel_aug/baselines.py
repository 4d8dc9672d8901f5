"""Comparison arms: predefined DA with uniform jitter, and an adapted
RandAugment over the same transform pool the augmenter can learn.

Both arms draw fresh parameters per image per batch and apply them through
the shared differentiable transform code (without a tape), so every arm
uses identical image-processing semantics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, record_suspended
from .transforms import (
    AffineParams,
    ColorParams,
    TransformParams,
    apply_transform,
)

log = logging.getLogger(__name__)


def _rot_shear_delta(rot_rad, shx, shy, tx, ty):
    rotm = np.array([[np.cos(rot_rad), -np.sin(rot_rad)], [np.sin(rot_rad), np.cos(rot_rad)]])
    shear = np.array([[1.0, shx], [shy, 1.0]])
    delta = np.zeros((2, 3))
    delta[:, :2] = rotm @ shear - np.eye(2)
    delta[0, 2] = tx
    delta[1, 2] = ty
    return delta


@dataclass(frozen=True)
class PredefinedDAConfig:
    """Uniform jitter half-widths around the identity of each channel.

    Magnitudes are bounded by the transform pool's envelopes: brightness
    and contrast <= 1, saturation <= 1, hue <= pi (radians), rotation <= 30
    degrees, shear <= 0.3, translation <= 0.45.
    """

    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0  # radians
    rotation_deg: float = 0.0
    shear: float = 0.0
    translate: float = 0.0

    def __post_init__(self):
        limits = {
            "brightness": 1.0,
            "contrast": 1.0,
            "saturation": 1.0,
            "hue": np.pi,
            "rotation_deg": 30.0,
            "shear": 0.3,
            "translate": 0.45,
        }
        for name, limit in limits.items():
            v = getattr(self, name)
            if v < 0 or v > limit + 1e-9:
                raise ValueError(f"predefined DA {name}={v} outside [0, {limit}]")

    def total_magnitude(self):
        return (
            self.brightness + self.contrast + self.saturation + self.hue / np.pi
            + self.rotation_deg / 30.0 + self.shear / 0.3 + self.translate / 0.45
        )

    def describe(self):
        return (
            f"b={self.brightness:g};c={self.contrast:g};s={self.saturation:g};"
            f"h={self.hue:g};rot={self.rotation_deg:g};shear={self.shear:g};"
            f"trans={self.translate:g}"
        )


def _batched_delta(rot_rad, shx, shy, tx, ty):
    """[B] component draws -> [B,2,3] delta matrices (rotation @ shear - I)."""
    b = len(rot_rad)
    cos, sin = np.cos(rot_rad), np.sin(rot_rad)
    delta = np.zeros((b, 2, 3))
    lin = np.empty((b, 2, 2))
    lin[:, 0, 0] = cos - sin * shy
    lin[:, 0, 1] = cos * shx - sin
    lin[:, 1, 0] = sin + cos * shy
    lin[:, 1, 1] = sin * shx + cos
    delta[:, :, :2] = lin - np.eye(2)
    delta[:, 0, 2] = tx
    delta[:, 1, 2] = ty
    return delta


def predefined_draw(cfg, rng, count=1):
    """TransformParams with per-image uniform jitter around the identity."""
    u = lambda hw: rng.uniform(-hw, hw, count)
    color = ColorParams(
        cf=Tensor(np.maximum(0.0, 1.0 + u(cfg.contrast)).astype(np.float32)),
        bs=Tensor(u(cfg.brightness).astype(np.float32)),
        sf=Tensor(np.maximum(0.0, 1.0 + u(cfg.saturation)).astype(np.float32)),
        hs=Tensor(u(cfg.hue).astype(np.float32)),
    )
    delta = _batched_delta(
        np.deg2rad(u(cfg.rotation_deg)), u(cfg.shear), u(cfg.shear),
        u(cfg.translate), u(cfg.translate),
    )
    return TransformParams(color=color, affine=AffineParams(Tensor(delta.astype(np.float32))))


def predefined_batch(cfg, images, rng):
    """Apply an independent draw to every image; returns (images', draws)."""
    params = predefined_draw(cfg, rng, count=images.shape[0])
    with record_suspended():
        out = apply_transform(Tensor(images.astype(np.float32)), params)
    return out.data, [params]


# -- RandAugment ----------------------------------------------------------------

# (name, identity value, range edge, symmetric sign?)
RANDAUGMENT_POOL = (
    ("identity", None, None, False),
    ("rotation", 0.0, 30.0, True),       # degrees
    ("translation_x", 0.0, 0.45, True),
    ("translation_y", 0.0, 0.45, True),
    ("shear_x", 0.0, 0.3, True),
    ("shear_y", 0.0, 0.3, True),
    ("contrast", 1.0, 1.0, True),        # cf in [0, 2]
    ("brightness", 0.0, 1.0, True),      # bs in [-1, 1]
    ("hue", 0.0, np.pi, True),           # radians, [-pi, pi]
    ("saturation", 1.0, -1.0, False),    # sf in [0, 1]: one-sided toward 0
)


@dataclass(frozen=True)
class RandAugmentConfig:
    """Global magnitude level M and sequence length N, both in {1..5}."""

    magnitude: int
    num_transforms: int

    def __post_init__(self):
        if not 1 <= self.magnitude <= 5:
            raise ValueError(f"RandAugment M must be in [1, 5], got {self.magnitude}")
        if not 1 <= self.num_transforms <= 5:
            raise ValueError(f"RandAugment N must be in [1, 5], got {self.num_transforms}")

    def total_magnitude(self):
        return self.magnitude * self.num_transforms

    def describe(self):
        return f"M={self.magnitude};N={self.num_transforms}"


def _single_transform_params(name, value):
    """TransformParams applying exactly one pool transform."""
    color = None
    affine = None
    if name in ("contrast", "brightness", "hue", "saturation"):
        fields = {"cf": 1.0, "bs": 0.0, "sf": 1.0, "hs": 0.0}
        key = {"contrast": "cf", "brightness": "bs", "saturation": "sf", "hue": "hs"}[name]
        fields[key] = value
        color = ColorParams(**{k: Tensor(np.asarray(v)) for k, v in fields.items()})
    elif name != "identity":
        rot = np.deg2rad(value) if name == "rotation" else 0.0
        shx = value if name == "shear_x" else 0.0
        shy = value if name == "shear_y" else 0.0
        tx = value if name == "translation_x" else 0.0
        ty = value if name == "translation_y" else 0.0
        affine = AffineParams(Tensor(_rot_shear_delta(rot, shx, shy, tx, ty)))
    return TransformParams(color=color, affine=affine)


def randaugment_draw(cfg, rng):
    """Draw N pool transforms (with replacement) at magnitude level M.

    The applied parameter sits M/5 of the way from identity toward the
    range edge; symmetric ranges get a uniform random sign.
    """
    seq = []
    scale = cfg.magnitude / 5.0
    for _ in range(cfg.num_transforms):
        name, ident, edge, symmetric = RANDAUGMENT_POOL[rng.integers(len(RANDAUGMENT_POOL))]
        if name == "identity":
            seq.append((name, None))
            continue
        offset = scale * edge
        if symmetric and rng.random() < 0.5:
            offset = -offset
        seq.append((name, ident + offset))
    return seq


def randaugment_apply(cfg, image, rng):
    """Apply one RandAugment sequence draw to a single image [3,H,W]."""
    seq = randaugment_draw(cfg, rng)
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    with record_suspended():
        for name, value in seq:
            if name == "identity":
                continue
            x = apply_transform(x, _single_transform_params(name, value))
    return x, seq


def _apply_position(images, seqs, k):
    """Apply sequence position k of every image's draw, batched.

    Each image applies exactly one pool transform per position, so stages
    that no image uses are skipped entirely (keeping all-identity draws
    bit-exact no-ops).
    """
    from .transforms import (
        affine_grid,
        apply_brightness,
        apply_contrast,
        apply_hue,
        apply_saturation,
        grid_sample,
        hsv_to_rgb,
        rgb_to_hsv,
    )

    b = images.shape[0]
    cf = np.ones(b, dtype=np.float32)
    bs = np.zeros(b, dtype=np.float32)
    sf = np.ones(b, dtype=np.float32)
    hs = np.zeros(b, dtype=np.float32)
    delta = np.zeros((b, 2, 3), dtype=np.float32)
    for i in range(b):
        name, value = seqs[i][k]
        if name == "contrast":
            cf[i] = value
        elif name == "brightness":
            bs[i] = value
        elif name == "saturation":
            sf[i] = value
        elif name == "hue":
            hs[i] = value
        elif name == "rotation":
            delta[i, :2, :2] = _rot_shear_delta(np.deg2rad(value), 0, 0, 0, 0)[:, :2]
        elif name == "shear_x":
            delta[i, 0, 1] = value
        elif name == "shear_y":
            delta[i, 1, 0] = value
        elif name == "translation_x":
            delta[i, 0, 2] = value
        elif name == "translation_y":
            delta[i, 1, 2] = value
    x = images
    if np.any(cf != 1.0):
        x = apply_contrast(x, Tensor(cf))
    if np.any(bs != 0.0):
        x = apply_brightness(x, Tensor(bs))
    if np.any(sf != 1.0) or np.any(hs != 0.0):
        hsv = rgb_to_hsv(x)
        hsv = apply_saturation(hsv, Tensor(sf))
        hsv = apply_hue(hsv, Tensor(hs))
        x = hsv_to_rgb(hsv)
    if np.any(delta != 0.0):
        grid = affine_grid(AffineParams(Tensor(delta)), x.shape[-2], x.shape[-1])
        x = grid_sample(x, grid)
    return x


def _sequence_deviation_params(seq):
    """Collapse a sequence's draws into per-channel deviation bookkeeping."""
    fields = {"cf": 1.0, "bs": 0.0, "sf": 1.0, "hs": 0.0}
    delta = np.zeros((2, 3))
    for name, value in seq:
        if name == "contrast":
            fields["cf"] = value
        elif name == "brightness":
            fields["bs"] = value
        elif name == "saturation":
            fields["sf"] = value
        elif name == "hue":
            fields["hs"] = value
        elif name == "rotation":
            delta[:, :2] += _rot_shear_delta(np.deg2rad(value), 0, 0, 0, 0)[:, :2]
        elif name == "shear_x":
            delta[0, 1] += value
        elif name == "shear_y":
            delta[1, 0] += value
        elif name == "translation_x":
            delta[0, 2] += value
        elif name == "translation_y":
            delta[1, 2] += value
    return TransformParams(
        color=ColorParams(**{k: Tensor(np.asarray(v)) for k, v in fields.items()}),
        affine=AffineParams(Tensor(delta)),
    )


def randaugment_batch(cfg, images, rng):
    """Per-image sequence draws applied position-by-position, batched."""
    seqs = [randaugment_draw(cfg, rng) for _ in range(images.shape[0])]
    x = Tensor(images.astype(np.float32))
    with record_suspended():
        for k in range(cfg.num_transforms):
            x = _apply_position(x, seqs, k)
    draws = [_sequence_deviation_params(seq) for seq in seqs]
    return x.data, draws


# -- grid search ------------------------------------------------------------------


@dataclass
class GridCellResult:
    cell: object
    fold: int
    seed: int
    val_acc: float
    test_acc: float
    failed: bool = False
    error: str = ""


def select_best_cell(results):
    """Best mean validation accuracy; ties break to smaller total magnitude.

    Cells where any fold failed are excluded (with a warning). Returns
    (best_cell, per-cell mean val/test accuracy dict).
    """
    by_cell = {}
    for r in results:
        by_cell.setdefault(r.cell.describe(), []).append(r)
    summary = {}
    candidates = []
    for key, rows in by_cell.items():
        cell = rows[0].cell
        if any(r.failed for r in rows):
            log.warning("grid cell %s excluded: contains failed runs", key)
            continue
        val = float(np.mean([r.val_acc for r in rows]))
        test = float(np.mean([r.test_acc for r in rows]))
        summary[key] = {"cell": cell, "val_acc": val, "test_acc": test}
        candidates.append((val, -cell.total_magnitude(), key, cell))
    if not candidates:
        raise ValueError("grid search: every cell failed")
    candidates.sort(key=lambda t: (t[0], t[1]), reverse=True)
    return candidates[0][3], summary


def grid_search(run_cell, grid, folds, seeds):
    """Train one classifier per (cell, fold) and pick the best cell.

    ``run_cell(cell, fold_index, seed) -> (val_acc, test_acc)`` does the
    actual training; failures are recorded and the cell is excluded.
    """
    if not grid:
        raise ValueError("grid search: empty grid")
    results = []
    for cell in grid:
        for fold, seed in zip(range(folds), seeds):
            try:
                val_acc, test_acc = run_cell(cell, fold, seed)
                results.append(GridCellResult(cell, fold, seed, val_acc, test_acc))
            except Exception as e:  # noqa: BLE001 - cell failures must not kill the grid
                log.warning("grid cell %s fold %d failed: %s", cell.describe(), fold, e)
                results.append(
                    GridCellResult(cell, fold, seed, float("nan"), float("nan"),
                                   failed=True, error=str(e))
                )
    best, summary = select_best_cell(results)
    return best, summary, results
