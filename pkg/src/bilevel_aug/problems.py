"""Bilevel problem instances plugged into the engine.

The learned arm augments training batches through the differentiable
augmenter; baseline arms apply non-learned transforms (or none) during
batch preparation. All arms share the classifier, the losses, and the
evaluation code, and none of them ever transform validation or test data.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .classifier import accuracy
from .transforms import apply_transform, param_deviation

DEVIATION_CHANNELS = ("contrast", "brightness", "saturation", "hue", "affine")


class _DeviationMixin:
    def _init_deviations(self):
        self._dev_acc = {c: [] for c in DEVIATION_CHANNELS}

    def _record_deviation(self, params):
        for channel, value in param_deviation(params).items():
            self._dev_acc[channel].append(value)

    def pop_deviations(self):
        out = {}
        for channel in DEVIATION_CHANNELS:
            vals = self._dev_acc[channel]
            out[channel] = float(np.mean(vals)) if vals else 0.0
            self._dev_acc[channel] = []
        return out

    def epoch_metrics(self, omega, data):
        self.classifier.params = [Tensor(w.data) for w in omega]
        with T.record_suspended():
            return {
                "val_acc": accuracy(self.classifier, data["val"]),
                "test_acc": accuracy(self.classifier, data["test"]),
            }


class AugmentedClassificationProblem(_DeviationMixin):
    """Learned arm: theta = augmenter MLP, omega = classifier CNN."""

    def __init__(self, augmenter, classifier, noise_source):
        self.augmenter = augmenter
        self.classifier = classifier
        self.noise_source = noise_source
        self._init_deviations()

    def theta_params(self):
        return self.augmenter.params

    def omega_params(self):
        return self.classifier.params

    def prepare_batch(self, batch):
        images, labels = batch
        noise = self.noise_source.sample(images.shape[0], dtype=self.classifier.dtype)
        return images, labels, noise

    def train_loss(self, omega, prepared):
        images, labels, noise = prepared
        params = self.augmenter.sample_params(Tensor(noise))
        self._record_deviation(params)
        augmented = apply_transform(Tensor(np.asarray(images, dtype=self.classifier.dtype)), params)
        self.classifier.params = omega
        return self.classifier.loss(augmented, labels)

    def val_loss(self, omega, batch):
        images, labels = batch
        self.classifier.params = omega
        return self.classifier.loss(Tensor(np.asarray(images, dtype=self.classifier.dtype)), labels)


class BaselineClassificationProblem(_DeviationMixin):
    """Non-learned arms: ``sampler(images)`` returns transformed images.

    ``sampler`` may be None (no augmentation); otherwise it is called once
    per batch during preparation and may record parameter draws through
    the ``deviation_hook``.
    """

    def __init__(self, classifier, sampler=None):
        self.classifier = classifier
        self.sampler = sampler
        self._init_deviations()

    def theta_params(self):
        return []

    def omega_params(self):
        return self.classifier.params

    def prepare_batch(self, batch):
        images, labels = batch
        if self.sampler is not None:
            images, params_list = self.sampler(images)
            for params in params_list:
                self._record_deviation(params)
        return np.asarray(images, dtype=self.classifier.dtype), labels

    def train_loss(self, omega, prepared):
        images, labels = prepared
        self.classifier.params = omega
        return self.classifier.loss(Tensor(images), labels)

    def val_loss(self, omega, batch):
        images, labels = batch
        self.classifier.params = omega
        return self.classifier.loss(Tensor(np.asarray(images, dtype=self.classifier.dtype)), labels)


class QuadraticProblem:
    """Scalar analytic instance: L_tr = a/2 (w-th)^2, L_val = 1/2 (w-c)^2."""

    def __init__(self, omega0=0.0, theta0=1.0, curvature=1.0, val_target=0.0):
        self.theta = [Tensor(np.asarray(theta0, dtype=np.float64))]
        self.omega = [Tensor(np.asarray(omega0, dtype=np.float64))]
        self.curvature = curvature
        self.val_target = val_target

    def theta_params(self):
        return self.theta

    def omega_params(self):
        return self.omega

    def prepare_batch(self, batch):
        return batch

    def train_loss(self, omega, prepared):
        d = T.sub(omega[0], self.theta[0])
        return T.mul(T.mul(d, d), 0.5 * self.curvature)

    def val_loss(self, omega, batch):
        d = T.sub(omega[0], self.val_target)
        return T.mul(T.mul(d, d), 0.5)

    def epoch_metrics(self, omega, data):
        return {}

    def pop_deviations(self):
        return {}
