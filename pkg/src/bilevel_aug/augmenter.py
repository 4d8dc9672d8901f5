"""Noise-conditioned augmentation network.

A 4-layer MLP maps a 100-d standard-normal noise vector to transformation
parameters. Raw outputs are squashed through tanh into fixed ranges so the
emitted parameters always satisfy their invariants: contrast in [0,2],
brightness in [-1,1], saturation factor in [0,1], hue shift in [-pi,pi],
and affine deltas inside configurable per-entry boxes. The net is the
outer-loop variable; transforms are applied per image with fresh noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io as bio
from . import tensor as T
from .tensor import Tensor
from .transforms import AffineParams, ColorParams, TransformParams, apply_transform

SCENARIOS = {"color": 4, "affine": 6, "color+affine": 10}


@dataclass(frozen=True)
class ParamBounds:
    """Box bounds for the affine delta entries.

    Defaults keep the induced matrix inside the magnitude envelope of the
    rotation/shear/translation pool used by the RandAugment baseline.
    """

    diag: float = 0.25
    off_diag: float = 0.5
    translate: float = 0.45

    def vector(self, dtype):
        return np.array(
            [self.diag, self.off_diag, self.translate,
             self.off_diag, self.diag, self.translate],
            dtype=dtype,
        )


class NoiseSource:
    """Seeded stream of standard-normal noise vectors."""

    def __init__(self, seed, dim=100):
        self.seed = seed
        self.dim = dim
        self.rng = np.random.default_rng(seed)

    def sample(self, count, dtype=np.float32):
        return self.rng.standard_normal((count, self.dim)).astype(dtype)

    def state(self):
        return self.rng.bit_generator.state

    def set_state(self, state):
        self.rng.bit_generator.state = state


class AugmenterNet:
    """MLP noise -> raw transform outputs, with bounded squashing.

    Hidden widths default to (100, 64, 32); the output width is 4 (color),
    6 (affine) or 10 (both). The final layer starts at zero so training
    begins at the center of every parameter range.
    """

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")

    def __init__(self, scenario, noise_dim=100, hidden=(100, 64, 32),
                 bounds=ParamBounds(), seed=0, dtype=np.float32):
        if scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario!r}")
        self.scenario = scenario
        self.noise_dim = noise_dim
        self.hidden = tuple(hidden)
        self.bounds = bounds
        self.dtype = np.dtype(dtype)
        self.n_out = SCENARIOS[scenario]

        rng = np.random.default_rng(seed)
        sizes = [noise_dim, *self.hidden, self.n_out]
        self.params = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.params.append(Tensor(w.astype(self.dtype)))
            self.params.append(Tensor(b.astype(self.dtype)))

    def raw_outputs(self, noise):
        """Forward the MLP: [B, noise_dim] -> [B, n_out]."""
        if not isinstance(noise, Tensor):
            noise = Tensor(np.asarray(noise, dtype=self.dtype))
        squeeze = noise.ndim == 1
        if squeeze:
            noise = T.reshape(noise, (1, noise.shape[0]))
        if noise.shape[1] != self.noise_dim:
            raise T.ShapeError("augmenter", noise.shape, (self.noise_dim,))
        h = noise
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = T.add(T.matmul(h, w), b)
            if i < n_layers - 1:
                h = T.relu(h)
        return h, squeeze

    def split_raw(self, u, squeeze=False):
        """Squash raw outputs into a TransformParams batch."""
        color = None
        affine = None

        def maybe_scalar(t):
            return T.reshape(t, ()) if squeeze else t

        if "color" in self.scenario:
            cf = maybe_scalar(T.add(T.tanh(u[:, 0]), 1.0))
            bs = maybe_scalar(T.tanh(u[:, 1]))
            sf = maybe_scalar(T.mul(T.add(T.tanh(u[:, 2]), 1.0), 0.5))
            hs = maybe_scalar(T.mul(T.tanh(u[:, 3]), float(np.pi)))
            color = ColorParams(cf=cf, bs=bs, sf=sf, hs=hs)
        if "affine" in self.scenario:
            raw = u[:, -6:]
            bound = Tensor(self.bounds.vector(u.dtype))
            delta = T.mul(T.tanh(raw), bound)
            shape = (2, 3) if squeeze else (u.shape[0], 2, 3)
            affine = AffineParams(delta=T.reshape(delta, shape))
        return TransformParams(color=color, affine=affine)

    def sample_params(self, noise):
        """TransformParams for one noise vector [dim] or a batch [B, dim]."""
        u, squeeze = self.raw_outputs(noise)
        return self.split_raw(u, squeeze=squeeze)

    # -- persistence ------------------------------------------------------

    def state_arrays(self):
        return [(n, p.data) for n, p in zip(self.PARAM_NAMES, self.params)]

    def load_state_arrays(self, named):
        by_name = dict(named)
        for name, p in zip(self.PARAM_NAMES, self.params):
            arr = by_name[name]
            if arr.shape != p.shape:
                raise ValueError(f"augmenter param {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype)

    def save(self, path):
        bio.save_augmenter(path, self.scenario, self.state_arrays())

    @classmethod
    def load(cls, path, **kwargs):
        scenario, named = bio.load_augmenter(path)
        shapes = dict(named)
        noise_dim = shapes["w1"].shape[0]
        hidden = tuple(shapes[f"w{i}"].shape[1] for i in (1, 2, 3))
        net = cls(scenario, noise_dim=noise_dim, hidden=hidden, **kwargs)
        net.load_state_arrays(named)
        return net


def augment_batch(net, images, noise_source):
    """Transform every image with its own fresh noise draw.

    Differentiable w.r.t. the augmenter parameters; the input images are
    treated as data.
    """
    if not isinstance(images, Tensor):
        images = Tensor(images)
    if images.ndim != 4:
        raise T.ShapeError("augment_batch", images.shape)
    b = images.shape[0]
    if b < 1:
        raise ValueError("augment_batch: empty batch")
    noise = Tensor(noise_source.sample(b, dtype=images.dtype))
    params = net.sample_params(noise)
    return apply_transform(images, params), params
