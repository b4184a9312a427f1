"""Scalar objectives used for local training and for distillation."""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .models import ModelParams, apply_head, extract_features


@dataclass
class LossValue:
    value: T.Tensor
    breakdown: dict = field(default_factory=dict)

    def item(self):
        return self.value.item()


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if n < 1 or labels.shape != (n,):
        raise ContractViolation(f"cross_entropy: {n} logit rows vs labels of shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractViolation(f"cross_entropy: labels must lie in [0, {k}), got range "
                                f"[{labels.min()}, {labels.max()}]")
    logp = T.log_softmax(logits)
    picked = T.gather(T.reshape(logp, (n * k,)), np.arange(n) * k + labels)
    value = T.scale(T.sum_all(picked), -1.0 / n)
    return LossValue(value, {"ce": value.item()})


def class_means(feats):
    """[n, d] -> [1, d] mean row."""
    if feats.shape[0] == 0:
        raise ContractViolation("class_means: empty class")
    return T.scale(T.reduce_to(feats, (1, feats.shape[1])), 1.0 / feats.shape[0])


def mmd_per_class(real_feats, virt_feats):
    """Sum over classes of the squared distance between feature means.

    Both arguments map class id -> [n_k, d] tensor (or are equally long lists).
    """
    if isinstance(real_feats, dict):
        if set(real_feats) != set(virt_feats):
            raise ContractViolation(f"mmd_per_class: class sets differ: {sorted(real_feats)} vs "
                                    f"{sorted(virt_feats)}")
        keys = sorted(real_feats)
        pairs = [(k, real_feats[k], virt_feats[k]) for k in keys]
    else:
        if len(real_feats) != len(virt_feats):
            raise ContractViolation("mmd_per_class: class lists differ in length")
        pairs = list(zip(range(len(real_feats)), real_feats, virt_feats))
    if not pairs:
        raise ContractViolation("mmd_per_class: no classes")
    total, breakdown = None, {}
    for k, r, v in pairs:
        if r.shape[0] == 0 or v.shape[0] == 0:
            raise ContractViolation(f"mmd_per_class: class {k} is empty on one side")
        d = T.sub(class_means(r), class_means(v))
        term = T.sum_all(T.mul(d, d))
        breakdown[f"class_{k}"] = term.item()
        total = term if total is None else T.add(total, term)
    return LossValue(total, breakdown)


def supcon(global_feats, global_labels, local_feats, local_labels, temperature=0.07, reduction="sum"):
    """Supervised contrastive loss over the pooled global + local batch.

    Features are L2-normalised; every sample needs at least one other sample
    of its class in the pool. ``reduction`` is "sum" over anchors or "mean"
    (the sum divided by the pooled size).
    """
    if reduction not in ("sum", "mean"):
        raise ContractViolation(f"supcon: reduction must be 'sum' or 'mean', got {reduction!r}")
    labels = np.concatenate([np.asarray(global_labels, dtype=np.int64),
                             np.asarray(local_labels, dtype=np.int64)])
    n = labels.shape[0]
    if n < 2:
        raise ContractViolation(f"supcon: pooled batch of size {n}; need at least 2")
    if temperature <= 0:
        raise ContractViolation("supcon: temperature must be positive")
    off = 1.0 - np.eye(n)
    pos = (labels[:, None] == labels[None, :]) * off
    counts = pos.sum(axis=1)
    if (counts == 0).any():
        bad = sorted(set(labels[counts == 0].tolist()))
        raise ContractViolation(f"supcon: class(es) {bad} have no positive pair in the pooled batch")

    z = T.l2_normalize(T.concat([global_feats, local_feats]))
    sim = T.scale(T.matmul(z, T.transpose(z)), 1.0 / temperature)
    # row max over a != i, held constant; the diagonal is pinned to it so exp stays bounded
    masked = np.where(off > 0, sim.data, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    shifted = T.add(T.mul(sim, T.Tensor(off)), T.Tensor(np.eye(n) * row_max))
    e = T.mul(T.exp(T.sub(shifted, T.Tensor(np.broadcast_to(row_max, (n, n))))), T.Tensor(off))
    log_denom = T.log(T.row_sum(e))
    weights = pos / counts[:, None]
    value = T.add_scalar(T.sub(T.sum_all(log_denom), T.sum_all(T.mul(sim, T.Tensor(weights)))),
                         float(row_max.sum()))
    if reduction == "mean":
        value = T.scale(value, 1.0 / n)
    return LossValue(value, {"con": value.item()})


def total_loss(params, local_images, local_labels, global_images, global_labels,
               lam=10.0, temperature=0.07, ce_includes_global=True, tensors=None, con_reduction="mean"):
    """Cross-entropy plus ``lam`` times the contrastive term against global anchors.

    The contrastive term is averaged over the pooled batch by default so that
    its scale matches the (mean) cross-entropy; ``con_reduction="sum"`` uses
    the plain sum over anchors.
    """
    local_images, global_images = T.as_tensor(local_images), T.as_tensor(global_images)
    if local_images.shape[0] == 0 or global_images.shape[0] == 0:
        raise ContractViolation("total_loss: both batches must be non-empty")
    local_labels = np.asarray(local_labels, dtype=np.int64)
    global_labels = np.asarray(global_labels, dtype=np.int64)
    nl = local_images.shape[0]
    feats = extract_features(params, T.concat([local_images, global_images]), tensors)
    local_f = T.gather(feats, np.arange(nl))
    global_f = T.gather(feats, np.arange(nl, feats.shape[0]))
    if ce_includes_global:
        ce = cross_entropy(apply_head(params, feats, tensors),
                           np.concatenate([local_labels, global_labels]))
    else:
        ce = cross_entropy(apply_head(params, local_f, tensors), local_labels)
    if lam == 0:
        return LossValue(ce.value, {"ce": ce.item(), "con": 0.0})
    con = supcon(global_f, global_labels, local_f, local_labels, temperature, con_reduction)
    value = T.add(ce.value, T.scale(con.value, lam))
    return LossValue(value, {"ce": ce.item(), "con": con.item()})


def _unit_scale(v):
    """``v`` times a power of two that brings its largest entry into [0.5, 1).

    Cosine ignores scale; this keeps the squared norms clear of underflow and
    overflow. Powers of two multiply exactly, and the factor is applied in
    steps so that subnormal inputs do not need an infinite one.
    """
    k = -int(np.frexp(np.abs(v.data).max())[1])
    while k:
        step = max(-1000, min(1000, k))
        v = T.scale(v, float(np.ldexp(1.0, step)))
        k -= step
    return v


def gradient_distance(grads_a, grads_b):
    """Sum over parameter tensors of (1 - cosine similarity).

    A zero tensor against a nonzero one contributes 1, two zeros contribute 0.
    Either side may hold tensors or arrays; gradients flow through tensors.
    """
    if set(grads_a) != set(grads_b):
        raise ContractViolation(f"gradient_distance: names differ: {sorted(grads_a)} vs {sorted(grads_b)}")
    total, breakdown = None, {}
    for name in grads_a:
        a, b = T.as_tensor(grads_a[name]), T.as_tensor(grads_b[name])
        if a.shape != b.shape:
            raise ContractViolation(f"gradient_distance: {name} shapes {a.shape} vs {b.shape}")
        za, zb = not np.any(a.data), not np.any(b.data)
        if za or zb:
            term = T.Tensor(0.0 if (za and zb) else 1.0)
        elif np.array_equal(a.data, b.data):
            # exact minimum: value and gradient are both zero
            term = T.Tensor(0.0)
        else:
            af, bf = _unit_scale(T.reshape(a, (a.size,))), _unit_scale(T.reshape(b, (b.size,)))
            dot = T.sum_all(T.mul(af, bf))
            norms = T.mul(T.sqrt(T.sum_all(T.mul(af, af))), T.sqrt(T.sum_all(T.mul(bf, bf))))
            term = T.add_scalar(T.scale(T.div(dot, norms), -1.0), 1.0)
        breakdown[name] = term.item()
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ContractViolation("gradient_distance: empty gradient sets")
    return LossValue(total, breakdown)


def prox_term(tensors, anchor, mu):
    """(mu / 2) * squared distance between parameter sets.

    ``tensors`` and ``anchor`` are ModelParams or name -> tensor/array maps.
    """
    if isinstance(tensors, ModelParams):
        tensors = tensors.tensors()
    if isinstance(anchor, ModelParams):
        anchor = anchor.arrays()
    if set(tensors) != set(anchor):
        raise ContractViolation("prox_term: parameter names differ")
    total = None
    for name, w in tensors.items():
        w = T.as_tensor(w)
        a = np.asarray(anchor[name], dtype=np.float64)
        if w.shape != a.shape:
            raise ContractViolation(f"prox_term: {name} shapes {w.shape} vs {a.shape}")
        d = T.sub(w, T.Tensor(a))
        term = T.sum_all(T.mul(d, d))
        total = term if total is None else T.add(total, term)
    value = T.scale(total, mu / 2.0)
    return LossValue(value, {"prox": value.item()})
