"""Virtual-data synthesis.

* statistics-based initialisation (per-class mean/std images, x ~ N(mu, sigma))
* client-side distribution matching: per-class feature means of virtual
  images pulled towards those of real images under a frozen extractor
* server-side gradient matching: virtual images moved so the model's
  cross-entropy gradient on them lines up with the clients' averaged gradient
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .losses import cross_entropy, gradient_distance, mmd_per_class
from .models import extract_features, predict_logits


@dataclass(frozen=True)
class VirtualDataset:
    images: np.ndarray  # [K*ipc, C, H, W], class-major
    labels: np.ndarray  # [K*ipc]
    ipc: int
    pix_min: np.ndarray  # [C]
    pix_max: np.ndarray  # [C]

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        for name, value in (("images", images), ("labels", labels),
                            ("pix_min", np.asarray(self.pix_min, dtype=np.float64)),
                            ("pix_max", np.asarray(self.pix_max, dtype=np.float64))):
            object.__setattr__(self, name, value)
        if self.ipc < 1 or labels.shape[0] % self.ipc or images.shape[0] != labels.shape[0]:
            raise ContractViolation(f"virtual dataset: {images.shape[0]} images, {labels.shape[0]} labels, "
                                    f"ipc={self.ipc}")
        blocks = labels.reshape(-1, self.ipc)
        if (blocks != blocks[:, :1]).any() or len(set(blocks[:, 0].tolist())) != blocks.shape[0]:
            raise ContractViolation("virtual dataset: labels must be class-major with exactly ipc per class")

    @property
    def classes(self):
        return self.labels[::self.ipc].tolist()

    def __len__(self):
        return self.labels.shape[0]

    def with_images(self, images):
        images = np.clip(images, self.pix_min[None, :, None, None], self.pix_max[None, :, None, None])
        return VirtualDataset(images, self.labels, self.ipc, self.pix_min, self.pix_max)

    def class_index(self, k):
        i = self.classes.index(k)
        return np.arange(i * self.ipc, (i + 1) * self.ipc)


@dataclass(frozen=True)
class ClassStats:
    """Per-class mean and population-std images plus per-channel pixel bounds."""
    mean: dict
    std: dict
    count: dict
    pix_min: np.ndarray
    pix_max: np.ndarray

    @property
    def classes(self):
        return sorted(self.mean)


def class_stats(dataset):
    if len(dataset) == 0:
        raise ContractViolation("class_stats: empty dataset")
    mean, std, count = {}, {}, {}
    for k in dataset.classes():
        x = dataset.images[dataset.labels == k]
        mean[k] = x.mean(axis=0)
        std[k] = np.sqrt(((x - mean[k]) ** 2).mean(axis=0))
        count[k] = int(x.shape[0])
    lo, hi = dataset.channel_range()
    return ClassStats(mean, std, count, lo, hi)


def _order_free_mean(arrays):
    # sorting per element makes the sum independent of client order, bit for bit
    stack = np.sort(np.stack(arrays), axis=0)
    return stack.sum(axis=0) / len(arrays)


def aggregate_stats(client_stats):
    """Unweighted mean of client means and stds, per class, over the clients holding it."""
    client_stats = list(client_stats)
    if not client_stats:
        raise ContractViolation("aggregate_stats: no clients")
    classes = sorted(set().union(*(s.mean for s in client_stats)))
    mean, std, count = {}, {}, {}
    for k in classes:
        holders = [s for s in client_stats if k in s.mean]
        mean[k] = _order_free_mean([s.mean[k] for s in holders])
        std[k] = _order_free_mean([s.std[k] for s in holders])
        count[k] = sum(s.count[k] for s in holders)
    pix_min = np.min(np.stack([s.pix_min for s in client_stats]), axis=0)
    pix_max = np.max(np.stack([s.pix_max for s in client_stats]), axis=0)
    return ClassStats(mean, std, count, pix_min, pix_max)


def init_virtual(stats, ipc, pix_range=None, seed=0):
    """``ipc`` Gaussian draws per class around the class statistics, clamped."""
    if ipc < 1:
        raise ContractViolation("init_virtual: ipc must be >= 1")
    if not stats.mean:
        raise ContractViolation("init_virtual: empty statistics")
    lo, hi = (stats.pix_min, stats.pix_max) if pix_range is None else pix_range
    c = next(iter(stats.mean.values())).shape[0]
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (c,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (c,)).copy()
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for k in stats.classes:
        mu, sigma = stats.mean[k], stats.std[k]
        images.append(mu + sigma * rng.standard_normal((ipc,) + mu.shape))
        labels.append(np.full(ipc, k))
    images = np.clip(np.concatenate(images), lo[None, :, None, None], hi[None, :, None, None])
    return VirtualDataset(images, np.concatenate(labels), ipc, lo, hi)


# ---------------------------------------------------------------------------
# differentiable siamese augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentStrength:
    shift: float = 0.125  # fraction of the image side
    scale: float = 0.2  # horizontal scale jitter
    brightness: float = 0.2
    contrast: float = 0.2


NO_AUGMENT = AugmentStrength(0.0, 0.0, 0.0, 0.0)


def _shift_matrix(n, offset):
    m = np.zeros((n, n))
    for i in range(n):
        j = i - offset
        if 0 <= j < n:
            m[i, j] = 1.0
    return m


def _hscale_matrix(n, s):
    """Bilinear resampling of a length-n axis stretched by ``s`` about its centre."""
    m = np.zeros((n, n))
    c = (n - 1) / 2
    for i in range(n):
        src = (i - c) / s + c
        j = int(np.floor(src))
        f = src - j
        if 0 <= j < n:
            m[i, j] += 1 - f
        if 0 <= j + 1 < n and f > 0:
            m[i, j + 1] += f
    return m


def dsa_augment(batch, shared_seed, strength=AugmentStrength()):
    """Crop-shift, horizontal scale, brightness and contrast jitter.

    The parameters come from ``shared_seed`` alone, so real and virtual
    batches augmented with the same seed get the same transform. Everything
    is linear in the pixels and gradients flow through.
    """
    batch = T.as_tensor(batch)
    n, c, h, w = batch.shape
    rng = np.random.default_rng(shared_seed)
    max_h, max_w = int(round(strength.shift * h)), int(round(strength.shift * w))
    dy = int(rng.integers(-max_h, max_h + 1))
    dx = int(rng.integers(-max_w, max_w + 1))
    sx = 1.0 + rng.uniform(-strength.scale, strength.scale)
    bright = rng.uniform(-strength.brightness, strength.brightness)
    contrast = 1.0 + rng.uniform(-strength.contrast, strength.contrast)

    out = batch
    if dy or dx or sx != 1.0:
        cols = _shift_matrix(w, dx) @ _hscale_matrix(w, sx) if sx != 1.0 else _shift_matrix(w, dx)
        out = T.resample2d(out, _shift_matrix(h, dy), cols)
    if contrast != 1.0 and n:
        flat = T.reshape(out, (n, c * h * w))
        m = T.expand(T.scale(T.row_sum(flat), 1.0 / (c * h * w)), flat.shape)
        out = T.reshape(T.add(T.scale(T.sub(flat, m), contrast), m), (n, c, h, w))
    if bright != 0.0:
        out = T.add_scalar(out, bright)
    return out


# ---------------------------------------------------------------------------
# distribution matching
# ---------------------------------------------------------------------------

def _features_no_grad(params, images, chunk=32):
    # small chunks keep activations cache-resident; rows are independent so
    # the chunk size does not change which values are computed
    with T.no_grad():
        parts = [extract_features(params, T.Tensor(images[i:i + chunk])).data
                 for i in range(0, images.shape[0], chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, params.feature_dim))


def distribution_match(real, virtual, extractor, steps=200, lr=1.0, real_batch_per_class=32,
                       augment=False, seed=0, history=None):
    """Descend the per-class feature-mean MMD on the virtual pixels.

    ``extractor`` is used frozen. Per-step MMD values (before the update)
    are appended to ``history`` if given.
    """
    classes = virtual.classes
    if sorted(classes) != real.classes():
        raise ContractViolation(f"distribution_match: virtual classes {sorted(classes)} vs real "
                                f"classes {real.classes()}")
    if steps < 0:
        raise ContractViolation("distribution_match: steps must be >= 0")
    rng = np.random.default_rng(seed)
    by_class = {k: np.flatnonzero(real.labels == k) for k in classes}
    images = virtual.images.copy()
    lo = virtual.pix_min[None, :, None, None]
    hi = virtual.pix_max[None, :, None, None]
    for step in range(steps):
        picks = [rng.choice(by_class[k], size=min(real_batch_per_class, by_class[k].size), replace=False)
                 for k in classes]
        sizes = [p.size for p in picks]
        real_batch = T.Tensor(real.images[np.concatenate(picks)])
        x = T.leaf(images)
        x_in = x
        if augment:
            aug_seed = int(rng.integers(1 << 62))
            real_batch = dsa_augment(real_batch, aug_seed)
            x_in = dsa_augment(x, aug_seed)
        real_f = _features_no_grad(extractor, real_batch.data)
        bounds = np.cumsum([0] + sizes)
        real_feats = {k: T.Tensor(real_f[bounds[i]:bounds[i + 1]]) for i, k in enumerate(classes)}
        virt_f = extract_features(extractor, x_in)
        virt_feats = {k: T.gather(virt_f, virtual.class_index(k)) for k in classes}
        loss = mmd_per_class(real_feats, virt_feats).value
        if history is not None:
            history.append(loss.item())
        (g,) = T.backward(loss, [x])
        images = np.clip(images - lr * g.data, lo, hi)
    return virtual.with_images(images) if steps else virtual


def class_feature_means(params, ds, max_per_class=None):
    """class -> mean feature vector over (the first ``max_per_class``) samples of ``ds``."""
    labels = np.asarray(ds.labels)
    out = {}
    for k in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == k)
        if max_per_class is not None:
            idx = idx[:max_per_class]
        out[k] = _features_no_grad(params, ds.images[idx]).mean(axis=0)
    return out


def mean_distance(means_a, means_b):
    """Sum over shared classes of squared distances between class means."""
    total = 0.0
    for k in sorted(set(means_a) & set(means_b)):
        d = means_a[k] - means_b[k]
        total += float(d @ d)
    return total


def feature_mmd(params, a, b, max_per_class=None):
    """Sum over shared classes of the squared distance between mean features.

    ``a`` and ``b`` are any datasets with ``images``/``labels``. This is the
    inter-client heterogeneity statistic.
    """
    return mean_distance(class_feature_means(params, a, max_per_class),
                         class_feature_means(params, b, max_per_class))


# ---------------------------------------------------------------------------
# gradient matching
# ---------------------------------------------------------------------------

def ce_gradients(model, images, labels):
    """Mean cross-entropy gradient over a set, as name -> array."""
    leaves = model.tensors(requires_grad=True)
    loss = cross_entropy(predict_logits(model, T.Tensor(images), leaves), labels).value
    grads = T.backward(loss, list(leaves.values()))
    return {k: g.data for k, g in zip(leaves, grads)}


def gradient_match(global_virtual, target_grads, model, steps=2000, lr=0.1, seed=0, history=None):
    """Move virtual pixels so that grad_theta CE(virtual) matches ``target_grads``.

    ``model`` is not modified. Per-step distances (before the update) go to
    ``history`` if given.
    """
    arrays = model.arrays()
    if set(target_grads) != set(arrays):
        raise ContractViolation(f"gradient_match: target names {sorted(target_grads)} vs model "
                                f"{sorted(arrays)}")
    for k, v in arrays.items():
        if np.shape(target_grads[k]) != v.shape:
            raise ContractViolation(f"gradient_match: {k} target shape {np.shape(target_grads[k])} "
                                    f"vs {v.shape}")
    if steps < 0:
        raise ContractViolation("gradient_match: steps must be >= 0")
    labels = global_virtual.labels
    images = global_virtual.images.copy()
    lo = global_virtual.pix_min[None, :, None, None]
    hi = global_virtual.pix_max[None, :, None, None]
    targets = {k: np.asarray(target_grads[k], dtype=np.float64) for k in arrays}
    for step in range(steps):
        x = T.leaf(images)
        leaves = model.tensors(requires_grad=True)
        ce = cross_entropy(predict_logits(model, x, leaves), labels).value
        grads = T.backward(ce, list(leaves.values()), create_graph=True)
        dist = gradient_distance(dict(zip(leaves, grads)), targets).value
        if history is not None:
            history.append(dist.item())
        (g,) = T.backward(dist, [x])
        images = np.clip(images - lr * g.data, lo, hi)
    return global_virtual.with_images(images) if steps else global_virtual
