"""Classifiers split into a feature extractor and a linear head.

Two architectures:

* ``convnet``: three blocks of conv3x3 -> group norm -> relu -> avgpool2,
  then one fully connected layer on the flattened features.
* ``mlp``: linear -> relu as the extractor, linear head. Used by the fast tests.

Parameters are plain float64 arrays held in :class:`ModelParams`; forward
passes wrap them as tensors so gradients can flow to weights, pixels, or both.
"""
from dataclasses import dataclass, field
from math import gcd

import numpy as np

from . import tensor as T
from .errors import ContractViolation


@dataclass(frozen=True)
class ModelParams:
    arch_tag: str
    extractor: dict
    head: dict
    feature_dim: int
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.extractor) & set(self.head)
        if overlap:
            raise ContractViolation(f"parameter names shared by extractor and head: {sorted(overlap)}")

    @property
    def num_classes(self):
        return self.spec["num_classes"]

    def names(self):
        return list(self.extractor) + list(self.head)

    def arrays(self):
        """All parameters, extractor first, in a fixed order."""
        return {**self.extractor, **self.head}

    def replace(self, arrays):
        """New params with the same layout and values taken from ``arrays``."""
        missing = set(self.names()) - set(arrays)
        if missing:
            raise ContractViolation(f"missing parameters {sorted(missing)}")
        for k in self.names():
            if arrays[k].shape != self.arrays()[k].shape:
                raise ContractViolation(f"{k}: shape {arrays[k].shape} != {self.arrays()[k].shape}")
        return ModelParams(
            self.arch_tag,
            {k: np.asarray(arrays[k], dtype=np.float64) for k in self.extractor},
            {k: np.asarray(arrays[k], dtype=np.float64) for k in self.head},
            self.feature_dim,
            dict(self.spec),
        )

    def tensors(self, requires_grad=False):
        """Wrap every array as a tensor (fresh leaves when ``requires_grad``)."""
        if requires_grad:
            return {k: T.leaf(v) for k, v in self.arrays().items()}
        return {k: T.Tensor(v) for k, v in self.arrays().items()}

    def input_shape(self):
        if self.arch_tag == "convnet":
            s = self.spec
            return (s["in_channels"], s["image_side"], s["image_side"])
        return tuple(self.spec["input_shape"])


def group_count(width):
    if width < 8:
        return 1
    return gcd(width, 8)


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def convnet_init(in_channels, num_classes, width=128, image_side=32, seed=0):
    if image_side % 8:
        raise ContractViolation(f"convnet_init: image_side {image_side} is not divisible by 8")
    if width < 1 or in_channels < 1 or num_classes < 1:
        raise ContractViolation("convnet_init: width, in_channels and num_classes must be >= 1")
    rng = np.random.default_rng(seed)
    extractor = {}
    c = in_channels
    for i in range(1, 4):
        extractor[f"conv{i}.weight"] = _kaiming_uniform(rng, (width, c, 3, 3), c * 9)
        extractor[f"norm{i}.weight"] = np.ones(width)
        extractor[f"norm{i}.bias"] = np.zeros(width)
        c = width
    feature_dim = width * (image_side // 8) ** 2
    head = {
        "fc.weight": _kaiming_uniform(rng, (feature_dim, num_classes), feature_dim),
        "fc.bias": np.zeros(num_classes),
    }
    spec = dict(in_channels=in_channels, num_classes=num_classes, width=width,
                image_side=image_side, groups=group_count(width))
    return ModelParams("convnet", extractor, head, feature_dim, spec)


def mlp_init(in_dim, num_classes, hidden=64, seed=0, input_shape=None):
    """Two-layer perceptron; ``input_shape`` records the image layout it flattens."""
    if input_shape is None:
        input_shape = (in_dim,)
    if int(np.prod(input_shape)) != in_dim:
        raise ContractViolation(f"mlp_init: input_shape {input_shape} does not flatten to {in_dim}")
    rng = np.random.default_rng(seed)
    extractor = {
        "fc1.weight": _kaiming_uniform(rng, (in_dim, hidden), in_dim),
        "fc1.bias": np.zeros(hidden),
    }
    head = {
        "fc2.weight": _kaiming_uniform(rng, (hidden, num_classes), hidden),
        "fc2.bias": np.zeros(num_classes),
    }
    spec = dict(in_dim=in_dim, num_classes=num_classes, hidden=hidden, input_shape=list(input_shape))
    return ModelParams("mlp", extractor, head, hidden, spec)


def init_model(arch, in_shape, num_classes, width, seed):
    """Build either architecture for images of shape ``in_shape`` = (C, H, W)."""
    if arch == "convnet":
        if in_shape[1] != in_shape[2]:
            raise ContractViolation(f"convnet needs square images, got {in_shape}")
        return convnet_init(in_shape[0], num_classes, width, in_shape[1], seed)
    if arch == "mlp":
        return mlp_init(int(np.prod(in_shape)), num_classes, width, seed, input_shape=in_shape)
    raise ContractViolation(f"unknown architecture {arch!r}")


def _bias_add(x, b):
    return T.add(x, T.expand(T.reshape(b, (1, b.shape[0])), x.shape))


def linear(x, weight, bias):
    return _bias_add(T.matmul(x, weight), bias)


def _check_batch(params, batch):
    expected = params.input_shape()
    if batch.ndim < 2 or tuple(batch.shape[1:]) != tuple(expected):
        raise ContractViolation(
            f"{params.arch_tag}: batch shape {batch.shape} does not match input {tuple(expected)}")


def extract_features(params, batch, tensors=None):
    """Features psi(batch) of shape [N, feature_dim].

    ``tensors`` lets callers pass their own parameter tensors (e.g. leaves
    they want gradients for); by default the arrays are wrapped as constants.
    """
    batch = T.as_tensor(batch)
    _check_batch(params, batch)
    if batch.shape[0] == 0:
        return T.Tensor(np.zeros((0, params.feature_dim)))
    p = tensors if tensors is not None else params.tensors()
    if params.arch_tag == "mlp":
        h = T.flatten(batch)
        return T.relu(linear(h, p["fc1.weight"], p["fc1.bias"]))
    groups = params.spec["groups"]
    h = batch
    for i in range(1, 4):
        h = T.conv2d(h, p[f"conv{i}.weight"], stride=1, pad=1)
        h = T.group_norm(h, groups)
        h = T.channel_affine(h, p[f"norm{i}.weight"], p[f"norm{i}.bias"])
        h = T.relu(h)
        h = T.avg_pool2d(h, 2)
    return T.flatten(h)


def apply_head(params, features, tensors=None):
    p = tensors if tensors is not None else params.tensors()
    if features.shape[0] == 0:
        return T.Tensor(np.zeros((0, params.num_classes)))
    if params.arch_tag == "mlp":
        return linear(features, p["fc2.weight"], p["fc2.bias"])
    return linear(features, p["fc.weight"], p["fc.bias"])


def predict_logits(params, batch, tensors=None):
    return apply_head(params, extract_features(params, batch, tensors), tensors)


def predict_labels(params, images, batch_size=256):
    """Argmax predictions, evaluated in chunks without recording."""
    images = np.asarray(images)
    out = np.empty(images.shape[0], dtype=np.int64)
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = predict_logits(params, T.Tensor(images[start:start + batch_size]))
            out[start:start + batch_size] = logits.data.argmax(axis=1)
    return out
