"""Small image classifier: three conv/pool blocks, global average pooling,
and a linear head. Deliberately under 1e5 parameters."""

from __future__ import annotations

import numpy as np

from . import io as bio
from . import tensor as T
from .tensor import Tensor


class ClassifierNet:
    """Inner-loop CNN trained on augmented batches."""

    def __init__(self, num_classes, image_size=32, channels=(16, 32, 64),
                 seed=0, dtype=np.float32):
        if image_size % (2 ** len(channels)) != 0:
            raise ValueError(
                f"image_size {image_size} must be divisible by {2 ** len(channels)}"
            )
        self.num_classes = num_classes
        self.image_size = image_size
        self.channels = tuple(channels)
        self.dtype = np.dtype(dtype)

        rng = np.random.default_rng(seed)
        self.params = []
        self.param_names = []
        in_c = 3
        for i, out_c in enumerate(self.channels):
            fan_in = in_c * 9
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(out_c, in_c, 3, 3))
            self._add(f"conv{i + 1}_w", w)
            self._add(f"conv{i + 1}_b", np.zeros(out_c))
            in_c = out_c
        bound = 1.0 / np.sqrt(in_c)
        self._add("head_w", rng.uniform(-bound, bound, size=(in_c, num_classes)))
        self._add("head_b", np.zeros(num_classes))

    def _add(self, name, arr):
        self.param_names.append(name)
        self.params.append(Tensor(arr.astype(self.dtype)))

    def param_count(self):
        return sum(p.size for p in self.params)

    def forward(self, images):
        """[B,3,H,W] -> logits [B,num_classes]."""
        if not isinstance(images, Tensor):
            images = Tensor(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise T.ShapeError("classifier", images.shape)
        if images.shape[2] != self.image_size or images.shape[3] != self.image_size:
            raise ValueError(
                f"classifier expects {self.image_size}x{self.image_size} images, "
                f"got {images.shape[2]}x{images.shape[3]}"
            )
        # fixed centering of [0,1] inputs; the raw brightness DC otherwise
        # dominates early conv activations and stalls plain SGD
        x = T.sub(T.mul(images, 2.0), 1.0)
        n_blocks = len(self.channels)
        for i in range(n_blocks):
            w = self.params[2 * i]
            b = self.params[2 * i + 1]
            x = T.conv2d(x, w, stride=1, pad=1)
            x = T.add(x, T.reshape(b, (1, b.shape[0], 1, 1)))
            x = T.relu(x)
            x = T.max_pool2d(x, 2)
        feats = T.global_avg_pool(x)
        hw, hb = self.params[-2], self.params[-1]
        return T.add(T.matmul(feats, hw), hb)

    def loss(self, images, labels):
        return T.softmax_cross_entropy(self.forward(images), labels)

    # -- persistence ------------------------------------------------------

    def state_arrays(self):
        return [(n, p.data) for n, p in zip(self.param_names, self.params)]

    def load_state_arrays(self, named):
        by_name = dict(named)
        for name, p in zip(self.param_names, self.params):
            arr = by_name[name]
            if arr.shape != p.shape:
                raise ValueError(f"classifier param {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype)

    def save(self, path):
        bio.save_classifier(path, self.state_arrays())


def predict(net, images, batch_size=64):
    """Argmax class indices; ties resolve to the lowest class index."""
    images = np.asarray(images)
    out = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        logits = net.forward(Tensor(chunk.astype(net.dtype, copy=False)))
        out[start : start + chunk.shape[0]] = np.argmax(logits.data, axis=1)
    return out


def accuracy(net, dataset, batch_size=64):
    """Fraction of correctly classified samples in (images, labels)."""
    images, labels = dataset
    if len(labels) == 0:
        raise ValueError("accuracy: empty dataset")
    preds = predict(net, images, batch_size=batch_size)
    return float(np.mean(preds == np.asarray(labels)))
