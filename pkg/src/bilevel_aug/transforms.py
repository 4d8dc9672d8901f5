"""Differentiable image transformations.

Affine warps go through normalized-grid generation plus bilinear sampling
(pixel centers at (2i+1)/N - 1, zero padding outside), and color edits are
contrast/brightness in RGB plus saturation/hue in HSV. Everything is
differentiable w.r.t. both the image and the transformation parameters;
piecewise operations (clamp, interpolation cells, HSV sectors) use the
branch selected in the forward pass.

Functions accept a single image [3,H,W] with scalar parameters or a batch
[B,3,H,W] with per-image parameter vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

TWO_PI = 2.0 * np.pi


@dataclass
class AffineParams:
    """2x3 delta from the identity transform; applied matrix is I + delta."""

    delta: Tensor  # [2,3] or [B,2,3]

    def __post_init__(self):
        if not isinstance(self.delta, Tensor):
            self.delta = Tensor(np.asarray(self.delta))
        if self.delta.shape[-2:] != (2, 3):
            raise ValueError(f"affine delta must end in (2,3), got {self.delta.shape}")
        if not np.isfinite(self.delta.data).all():
            raise ValueError("affine delta contains non-finite entries")

    @property
    def batched(self):
        return self.delta.ndim == 3


@dataclass
class ColorParams:
    """Contrast factor, brightness shift, saturation factor, hue shift (radians)."""

    cf: Tensor
    bs: Tensor
    sf: Tensor
    hs: Tensor

    def __post_init__(self):
        for name in ("cf", "bs", "sf", "hs"):
            v = getattr(self, name)
            if not isinstance(v, Tensor):
                setattr(self, name, Tensor(np.asarray(v, dtype=np.float64)))
        if self.cf.data.min() < 0:
            raise ValueError("contrast factor must be non-negative")
        if self.sf.data.min() < 0:
            raise ValueError("saturation factor must be non-negative")
        for name in ("cf", "bs", "sf", "hs"):
            if not np.isfinite(getattr(self, name).data).all():
                raise ValueError(f"color parameter {name} is non-finite")

    @property
    def batched(self):
        return self.cf.ndim == 1


@dataclass
class TransformParams:
    """Parameters for one transformation draw; absent parts mean identity."""

    color: ColorParams | None = None
    affine: AffineParams | None = None


def identity_params(scenario="color+affine", dtype=np.float64):
    color = None
    affine = None
    if "color" in scenario:
        one = Tensor(np.asarray(1.0, dtype=dtype))
        zero = Tensor(np.asarray(0.0, dtype=dtype))
        color = ColorParams(cf=one, bs=zero, sf=one, hs=zero)
    if "affine" in scenario:
        affine = AffineParams(delta=Tensor(np.zeros((2, 3), dtype=dtype)))
    return TransformParams(color=color, affine=affine)


# -- affine ------------------------------------------------------------------


def _base_grid(out_h, out_w, dtype):
    xs = (2 * np.arange(out_w) + 1) / out_w - 1
    ys = (2 * np.arange(out_h) + 1) / out_h - 1
    gx, gy = np.meshgrid(xs, ys)
    base = np.stack([gx.ravel(), gy.ravel(), np.ones(out_h * out_w)], axis=0)
    return base.astype(dtype)


def affine_grid(params, out_h, out_w):
    """Sampling coordinates for an affine warp.

    Returns [H,W,2] (or [B,H,W,2]) of normalized (x, y) source positions:
    (I + delta) applied to each output pixel center.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("affine_grid: output size must be >= 1")
    delta = params.delta
    base = Tensor(_base_grid(out_h, out_w, delta.dtype))
    ident = np.zeros(delta.shape, dtype=delta.dtype)
    ident[..., 0, 0] = 1
    ident[..., 1, 1] = 1
    mat = T.add(delta, Tensor(ident))
    if params.batched:
        b = delta.shape[0]
        flat = T.matmul(T.reshape(mat, (b * 2, 3)), base)
        grid = T.transpose(T.reshape(flat, (b, 2, out_h * out_w)), (0, 2, 1))
        return T.reshape(grid, (b, out_h, out_w, 2))
    flat = T.matmul(mat, base)  # [2, H*W]
    return T.reshape(T.transpose(flat), (out_h, out_w, 2))


def grid_sample(image, grid):
    """Bilinear sampling of ``image`` at normalized ``grid`` positions.

    Out-of-range positions read as zero. Differentiable w.r.t. the image
    everywhere and w.r.t. the grid away from interpolation-cell edges.
    """
    single = image.ndim == 3
    if single:
        image = T.reshape(image, (1,) + image.shape)
        grid = T.reshape(grid, (1,) + grid.shape)
    if image.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2:
        raise T.ShapeError("grid_sample", image.shape, grid.shape)
    b, c, h, w = image.shape
    gh, gw = grid.shape[1], grid.shape[2]

    gx = grid[:, :, :, 0]
    gy = grid[:, :, :, 1]
    px = T.sub(T.mul(T.add(gx, 1.0), w / 2.0), 0.5)
    py = T.sub(T.mul(T.add(gy, 1.0), h / 2.0), 0.5)

    x0 = np.floor(px.data).astype(np.int64)
    y0 = np.floor(py.data).astype(np.int64)
    wx = T.sub(px, Tensor(x0.astype(px.dtype)))
    wy = T.sub(py, Tensor(y0.astype(py.dtype)))

    bidx = np.arange(b).reshape(b, 1, 1, 1)
    cidx = np.arange(c).reshape(1, c, 1, 1)

    out = None
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = np.clip(xi, 0, w - 1)[:, None, :, :]
            yi_c = np.clip(yi, 0, h - 1)[:, None, :, :]
            idx = ((bidx * c + cidx) * h + yi_c) * w + xi_c
            vals = T.take_flat(image, idx, out_shape=(b, c, gh, gw))
            fx = wx if dx else T.sub(1.0, wx)
            fy = wy if dy else T.sub(1.0, wy)
            weight = T.mul(T.mul(fx, fy), Tensor(valid.astype(px.dtype)))
            term = T.mul(vals, T.reshape(weight, (b, 1, gh, gw)))
            out = term if out is None else T.add(out, term)

    if single:
        out = T.reshape(out, out.shape[1:])
    return out


# -- color -------------------------------------------------------------------


def _param_view(p, image):
    """Broadcast a scalar or per-image [B] parameter over image axes."""
    if p.ndim == 0:
        return p
    if image.ndim != 4 or p.shape[0] != image.shape[0]:
        raise T.ShapeError("color_param", p.shape, image.shape)
    return T.reshape(p, (p.shape[0], 1, 1, 1))


def apply_contrast(rgb, cf):
    """rgb <- clamp(rgb * cf, 0, 1); cf >= 0, 1 is the identity."""
    if not isinstance(cf, Tensor):
        cf = Tensor(np.asarray(cf, dtype=rgb.dtype))
    if cf.data.min() < 0:
        raise ValueError("contrast factor must be non-negative")
    return T.clamp(T.mul(rgb, _param_view(cf, rgb)), 0.0, 1.0)


def apply_brightness(rgb, bs):
    """rgb <- clamp(rgb + bs, 0, 1); 0 is the identity."""
    if not isinstance(bs, Tensor):
        bs = Tensor(np.asarray(bs, dtype=rgb.dtype))
    return T.clamp(T.add(rgb, _param_view(bs, rgb)), 0.0, 1.0)


def _split_hsv(hsv):
    ax = hsv.ndim - 3
    if hsv.shape[ax] != 3:
        raise T.ShapeError("hsv_split", hsv.shape)
    if ax == 0:
        return hsv[0], hsv[1], hsv[2], ax
    return hsv[:, 0], hsv[:, 1], hsv[:, 2], ax


def apply_saturation(hsv, sf):
    """s <- clamp(s * sf, 0, 1); hue and value pass through untouched.

    The clamp deliberately covers only the saturation channel: hue lives in
    radians and gets its own wraparound treatment in ``apply_hue``.
    """
    if not isinstance(sf, Tensor):
        sf = Tensor(np.asarray(sf, dtype=hsv.dtype))
    if sf.data.min() < 0:
        raise ValueError("saturation factor must be non-negative")
    h, s, v, ax = _split_hsv(hsv)
    sfv = sf if sf.ndim == 0 else T.reshape(sf, (sf.shape[0], 1, 1))
    s2 = T.clamp(T.mul(s, sfv), 0.0, 1.0)
    return T.stack([h, s2, v], axis=ax)


def apply_hue(hsv, hs):
    """h <- (h + hs) mod 2*pi; saturation and value pass through."""
    if not isinstance(hs, Tensor):
        hs = Tensor(np.asarray(hs, dtype=hsv.dtype))
    h, s, v, ax = _split_hsv(hsv)
    hsv_shift = hs if hs.ndim == 0 else T.reshape(hs, (hs.shape[0], 1, 1))
    h2 = T.floor_mod(T.add(h, hsv_shift), TWO_PI)
    return T.stack([h2, s, v], axis=ax)


def _mask(cond, dtype):
    return Tensor(cond.astype(dtype))


def rgb_to_hsv(rgb):
    """Hexcone RGB -> HSV with hue in radians [0, 2*pi).

    Piecewise-smooth: channel-argmax and zero-chroma branches are fixed at
    forward time; gray pixels get hue 0 and saturation 0.
    """
    r, g, b, ax = _split_hsv(rgb)
    dt = rgb.dtype

    rge = _mask(r.data >= g.data, dt)
    maxrg = T.add(T.mul(r, rge), T.mul(g, T.sub(1.0, rge)))
    mge = _mask(maxrg.data >= b.data, dt)
    maxc = T.add(T.mul(maxrg, mge), T.mul(b, T.sub(1.0, mge)))

    rle = _mask(r.data <= g.data, dt)
    minrg = T.add(T.mul(r, rle), T.mul(g, T.sub(1.0, rle)))
    mle = _mask(minrg.data <= b.data, dt)
    minc = T.add(T.mul(minrg, mle), T.mul(b, T.sub(1.0, mle)))

    chroma = T.sub(maxc, minc)

    vpos = maxc.data > 0
    vden = T.add(maxc, _mask(~vpos, dt))
    sat = T.mul(T.div(chroma, vden), _mask(vpos, dt))

    cpos = chroma.data > 0
    cden = T.add(chroma, _mask(~cpos, dt))
    is_r = (r.data >= g.data) & (r.data >= b.data) & cpos
    is_g = (g.data > r.data) & (g.data >= b.data) & cpos
    is_b = (b.data > r.data) & (b.data > g.data) & cpos

    h_r = T.floor_mod(T.div(T.sub(g, b), cden), 6.0)
    h_g = T.add(T.div(T.sub(b, r), cden), 2.0)
    h_b = T.add(T.div(T.sub(r, g), cden), 4.0)
    h6 = T.add(
        T.add(T.mul(h_r, _mask(is_r, dt)), T.mul(h_g, _mask(is_g, dt))),
        T.mul(h_b, _mask(is_b, dt)),
    )
    hue = T.mul(h6, np.pi / 3.0)
    return T.stack([hue, sat, maxc], axis=ax)


def hsv_to_rgb(hsv):
    """Inverse hexcone conversion; hue in radians [0, 2*pi)."""
    h, s, v, ax = _split_hsv(hsv)
    dt = hsv.dtype

    h6 = T.mul(T.floor_mod(h, TWO_PI), 3.0 / np.pi)
    sector = np.clip(np.floor(h6.data), 0, 5).astype(np.int64)
    f = T.sub(h6, Tensor(sector.astype(dt)))

    p = T.mul(v, T.sub(1.0, s))
    q = T.mul(v, T.sub(1.0, T.mul(s, f)))
    t = T.mul(v, T.sub(1.0, T.mul(s, T.sub(1.0, f))))

    selectors = {
        0: (v, t, p),
        1: (q, v, p),
        2: (p, v, t),
        3: (p, q, v),
        4: (t, p, v),
        5: (v, p, q),
    }
    r = g = b = None
    for k, (rs, gs, bs) in selectors.items():
        m = _mask(sector == k, dt)
        r = T.mul(rs, m) if r is None else T.add(r, T.mul(rs, m))
        g = T.mul(gs, m) if g is None else T.add(g, T.mul(gs, m))
        b = T.mul(bs, m) if b is None else T.add(b, T.mul(bs, m))
    return T.stack([r, g, b], axis=ax)


def apply_transform(image, params):
    """Apply one TransformParams draw to an image (or batch).

    Fixed composition: contrast -> brightness -> (HSV) saturation -> hue ->
    (RGB) then the affine warp, so color edits never touch the warp's zero
    padding. Identity parameters reproduce the input.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    if params.color is not None:
        cp = params.color
        x = apply_contrast(x, cp.cf)
        x = apply_brightness(x, cp.bs)
        hsv = rgb_to_hsv(x)
        hsv = apply_saturation(hsv, cp.sf)
        hsv = apply_hue(hsv, cp.hs)
        x = hsv_to_rgb(hsv)
    if params.affine is not None:
        h, w = x.shape[-2], x.shape[-1]
        if params.affine.batched != (x.ndim == 4):
            raise T.ShapeError("apply_transform", x.shape, params.affine.delta.shape)
        grid = affine_grid(params.affine, h, w)
        x = grid_sample(x, grid)
    return x


def param_deviation(params):
    """Mean absolute deviation from identity per transform channel."""
    out = {}
    if params.color is not None:
        cp = params.color
        out["contrast"] = float(np.mean(np.abs(cp.cf.data - 1.0)))
        out["brightness"] = float(np.mean(np.abs(cp.bs.data)))
        out["saturation"] = float(np.mean(np.abs(cp.sf.data - 1.0)))
        hs = np.mod(cp.hs.data + np.pi, TWO_PI) - np.pi
        out["hue"] = float(np.mean(np.abs(hs)))
    if params.affine is not None:
        out["affine"] = float(np.mean(np.abs(params.affine.delta.data)))
    return out
