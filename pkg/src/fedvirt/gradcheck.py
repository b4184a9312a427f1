"""Central finite-difference checks of every primitive and loss.

``run_suite`` is what ``fedvirt gradcheck`` executes.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import cross_entropy, gradient_distance, mmd_per_class, prox_term, supcon, total_loss
from .models import convnet_init, mlp_init, predict_logits


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    coords_checked: int

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def grad_check(f, point, h=1e-5, tol=1e-4, max_coords=None, seed=0, name="f", floor=1e-6):
    """Compare ``backward`` against (f(x+h) - f(x-h)) / 2h coordinate by coordinate.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). With
    ``max_coords`` only a seeded random subset of coordinates is perturbed.
    """
    point = np.array(point, dtype=np.float64)
    x = T.leaf(point)
    (analytic,) = T.backward(f(x), [x])
    analytic = analytic.data.reshape(-1)

    coords = np.arange(point.size)
    if max_coords is not None and point.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(point.size, max_coords, replace=False))
    flat = point.reshape(-1)
    worst = 0.0
    # f may take gradients internally, so recording stays on here
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(T.leaf(point)).item()
        flat[i] = orig - h
        fm = f(T.leaf(point)).item()
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, err)
    return GradCheckReport(name, worst, tol, len(coords))


def _weighted(op, out_shape, rng):
    w = T.Tensor(rng.standard_normal(out_shape))
    return lambda x: T.sum_all(T.mul(op(x), w))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _gn_second_order_norm(x, g):
    """||d/dx <group_norm_grad(x, g), w>||^2; differentiating this needs the recorded adjoint."""
    probe = T.Tensor(np.linspace(-1.0, 1.0, x.size).reshape(x.shape))
    inner = T.sum_all(T.mul(T.group_norm_grad(x, T.Tensor(g), 3), probe))
    (gx,) = T.backward(inner, [x], create_graph=True)
    return T.sum_all(T.mul(gx, gx))


def _primitive_cases(rng):
    """(name, f, point) triples, one per primitive and input slot."""
    a = rng.standard_normal((3, 4))
    b = T.Tensor(rng.standard_normal((3, 4)))
    m = T.Tensor(rng.standard_normal((4, 5)))
    img = rng.standard_normal((2, 3, 6, 6))
    wconv = rng.standard_normal((4, 3, 3, 3)) * 0.3
    gconv = rng.standard_normal((2, 4, 6, 6))
    idx = np.array([2, 0, 2, 1])
    rows = rng.standard_normal((5, 6))
    cols = rng.standard_normal((4, 6))
    img2 = rng.standard_normal(img.shape)
    cases = [
        ("add", _weighted(lambda x: T.add(x, b), (3, 4), rng), a),
        ("sub", _weighted(lambda x: T.sub(b, x), (3, 4), rng), a),
        ("mul", _weighted(lambda x: T.mul(x, b), (3, 4), rng), a),
        ("div", _weighted(lambda x: T.div(b, x), (3, 4), rng), _away_from_zero(rng, (3, 4), 0.5)),
        ("div_numerator", _weighted(lambda x: T.div(x, T.add_scalar(T.mul(b, b), 1.0)), (3, 4), rng), a),
        ("scale", _weighted(lambda x: T.scale(x, -1.7), (3, 4), rng), a),
        ("add_scalar", _weighted(lambda x: T.add_scalar(x, 0.3), (3, 4), rng), a),
        ("scalar_broadcast", _weighted(lambda x: T.mul(b, T.sum_all(x)), (3, 4), rng), a),
        ("exp", _weighted(T.exp, (3, 4), rng), a),
        ("log", _weighted(T.log, (3, 4), rng), np.abs(a) + 0.5),
        ("sqrt", _weighted(T.sqrt, (3, 4), rng), np.abs(a) + 0.5),
        ("relu", _weighted(T.relu, (3, 4), rng), _away_from_zero(rng, (3, 4))),
        ("matmul_left", _weighted(lambda x: T.matmul(x, m), (3, 5), rng), a),
        ("matmul_right", _weighted(lambda x: T.matmul(T.transpose(m), x), (5, 4),
                                   rng), rng.standard_normal((4, 4))),
        ("transpose", _weighted(T.transpose, (4, 3), rng), a),
        ("reshape", _weighted(lambda x: T.reshape(x, (2, 6)), (2, 6), rng), a),
        ("expand", _weighted(lambda x: T.expand(x, (3, 4)), (3, 4), rng), rng.standard_normal((3, 1))),
        ("reduce_to", _weighted(lambda x: T.reduce_to(x, (1, 4)), (1, 4), rng), a),
        ("sum_mean", lambda x: T.add(T.sum_all(T.mul(x, x)), T.mean_all(x)), a),
        ("gather", _weighted(lambda x: T.gather(x, idx), (4, 4), rng), a),
        ("scatter_add", _weighted(lambda x: T.scatter_add(x, idx, 3), (3, 4), rng),
         rng.standard_normal((4, 4))),
        ("concat", _weighted(lambda x: T.concat([b, x, b]), (9, 4), rng), a),
        ("conv2d_input", _weighted(lambda x: T.conv2d(x, T.Tensor(wconv), 1, 1), (2, 4, 6, 6), rng), img),
        ("conv2d_weight", _weighted(lambda w: T.conv2d(T.Tensor(img), w, 1, 1), (2, 4, 6, 6), rng), wconv),
        ("conv2d_stride2", _weighted(lambda x: T.conv2d(x, T.Tensor(wconv), 2, 1), (2, 4, 3, 3), rng), img),
        ("conv2d_input_grad", _weighted(lambda g: T.conv2d_input_grad(g, T.Tensor(wconv), img.shape, 1, 1),
                                        img.shape, rng), gconv),
        ("conv2d_input_grad_w", _weighted(lambda w: T.conv2d_input_grad(T.Tensor(gconv), w, img.shape, 1, 1),
                                          img.shape, rng), wconv),
        ("conv2d_weight_grad", _weighted(lambda x: T.conv2d_weight_grad(x, T.Tensor(gconv), wconv.shape, 1, 1),
                                         wconv.shape, rng), img),
        ("conv2d_weight_grad_g", _weighted(lambda g: T.conv2d_weight_grad(T.Tensor(img), g, wconv.shape, 1, 1),
                                           wconv.shape, rng), gconv),
        ("avg_pool2d", _weighted(lambda x: T.avg_pool2d(x, 2), (2, 3, 3, 3), rng), img),
        ("avg_unpool2d", _weighted(lambda g: T.avg_unpool2d(g, 2, img.shape), img.shape, rng),
         rng.standard_normal((2, 3, 3, 3))),
        ("resample2d", _weighted(lambda x: T.resample2d(x, rows, cols), (2, 3, 5, 4), rng), img),
        ("channel_affine_x", _weighted(lambda x: T.channel_affine(x, T.Tensor(a[0, :3]), T.Tensor(a[1, :3])),
                                       img.shape, rng), img),
        ("channel_affine_gamma", _weighted(lambda s: T.channel_affine(T.Tensor(img), s, T.Tensor(a[1, :3])),
                                           img.shape, rng), rng.standard_normal(3)),
        ("channel_affine_beta", _weighted(lambda s: T.channel_affine(T.Tensor(img), T.Tensor(a[0, :3]), s),
                                          img.shape, rng), rng.standard_normal(3)),
        ("channel_scale", _weighted(lambda s: T.channel_scale(T.Tensor(img), s), img.shape, rng),
         rng.standard_normal(3)),
        ("group_norm", _weighted(lambda x: T.group_norm(x, 3), img.shape, rng), img),
        ("group_norm_one_group", _weighted(lambda x: T.group_norm(x, 1), img.shape, rng), img),
        ("group_norm_grad_x", _weighted(lambda x: T.group_norm_grad(x, T.Tensor(img2), 3), img.shape, rng), img),
        ("group_norm_grad_g", _weighted(lambda g: T.group_norm_grad(T.Tensor(img), g, 3), img.shape, rng), img2),
        ("group_norm_grad_third_order", lambda x: _gn_second_order_norm(x, img2), img),
        ("l2_normalize", _weighted(T.l2_normalize, (3, 4), rng), a),
        ("log_softmax", _weighted(T.log_softmax, (3, 4), rng), a),
        ("flatten", _weighted(T.flatten, (2, 108), rng), img),
    ]
    return cases


def _loss_cases(rng):
    labels = np.array([0, 1, 2, 0, 1, 2])
    logits = rng.standard_normal((6, 3))
    feats_other = T.Tensor(rng.standard_normal((6, 5)))
    real = [T.Tensor(rng.standard_normal((4, 5))) for _ in range(3)]
    mlp = mlp_init(12, 3, hidden=6, seed=int(rng.integers(1 << 30)), input_shape=(3, 2, 2))
    anchor = {k: v + rng.standard_normal(v.shape) for k, v in mlp.arrays().items()}
    local_imgs = rng.standard_normal((6, 3, 2, 2))
    global_imgs = T.Tensor(rng.standard_normal((6, 3, 2, 2)))
    target = {k: rng.standard_normal(v.shape) for k, v in mlp.arrays().items()}

    def mmd(x):
        virt = [T.gather(x, np.arange(2 * k, 2 * k + 2)) for k in range(3)]
        return mmd_per_class(real, virt).value

    def prox(w1):
        tensors = {**mlp.tensors(), "fc1.weight": w1}
        return prox_term(tensors, anchor, 0.7).value

    def total(x):
        return total_loss(mlp, x, labels, global_imgs, labels, lam=2.0, temperature=0.5).value

    def gdist(g):
        grads = {k: T.Tensor(v) for k, v in target.items()}
        grads["fc2.weight"] = g
        return gradient_distance(grads, {k: v * 1.3 + 0.1 for k, v in target.items()}).value

    return [
        ("loss_cross_entropy", lambda x: cross_entropy(x, labels).value, logits),
        ("loss_mmd", mmd, rng.standard_normal((6, 5))),
        ("loss_supcon_local", lambda x: supcon(feats_other, labels, x, labels, 0.5).value,
         rng.standard_normal((6, 5))),
        ("loss_supcon_global", lambda x: supcon(x, labels, feats_other, labels, 0.5).value,
         rng.standard_normal((6, 5))),
        ("loss_gradient_distance", gdist, rng.standard_normal(target["fc2.weight"].shape)),
        ("loss_prox", prox, rng.standard_normal(mlp.extractor["fc1.weight"].shape)),
        ("loss_total", total, local_imgs),
    ]


def _model_cases(rng):
    net = convnet_init(2, 3, width=4, image_side=8, seed=int(rng.integers(1 << 30)))
    images = rng.standard_normal((4, 2, 8, 8))
    labels = np.array([0, 1, 2, 1])

    def ce_pixels(x):
        return cross_entropy(predict_logits(net, x), labels).value

    def ce_conv2(w):
        tensors = {**net.tensors(), "conv2.weight": w}
        return cross_entropy(predict_logits(net, T.Tensor(images), tensors), labels).value

    small = mlp_init(12, 3, hidden=5, seed=int(rng.integers(1 << 30)), input_shape=(3, 2, 2))
    target = {k: rng.standard_normal(v.shape) for k, v in small.arrays().items()}
    small_labels = np.array([0, 1, 2, 0])

    def matched_gradients(x):
        leaves = small.tensors(requires_grad=True)
        ce = cross_entropy(predict_logits(small, x, leaves), small_labels).value
        grads = T.backward(ce, list(leaves.values()), create_graph=True)
        return gradient_distance(dict(zip(leaves, grads)), target).value

    tiny = convnet_init(1, 2, width=2, image_side=8, seed=int(rng.integers(1 << 30)))
    tiny_target = {k: rng.standard_normal(v.shape) for k, v in tiny.arrays().items()}

    def matched_convnet_gradients(x):
        leaves = tiny.tensors(requires_grad=True)
        ce = cross_entropy(predict_logits(tiny, x, leaves), np.array([0, 1])).value
        grads = T.backward(ce, list(leaves.values()), create_graph=True)
        return gradient_distance(dict(zip(leaves, grads)), tiny_target).value

    return [
        ("convnet_ce_pixels", ce_pixels, images),
        ("convnet_ce_conv2_weight", ce_conv2, net.extractor["conv2.weight"]),
        ("gradient_matching_second_order", matched_gradients, rng.standard_normal((4, 3, 2, 2))),
        ("gradient_matching_convnet_second_order", matched_convnet_gradients,
         rng.standard_normal((2, 1, 8, 8))),
    ]


def run_suite(points=5, seed=0, h=1e-5, tol=1e-4, max_coords=48):
    """Every check at ``points`` random points; returns one report per check."""
    reports = {}
    for p in range(points):
        rng = np.random.default_rng([seed, p])
        for name, f, x in _primitive_cases(rng) + _loss_cases(rng) + _model_cases(rng):
            r = grad_check(f, x, h=h, tol=tol, max_coords=max_coords, seed=p, name=name)
            prev = reports.get(name)
            if prev is None or r.max_rel_error > prev.max_rel_error:
                reports[name] = GradCheckReport(name, r.max_rel_error, tol,
                                                r.coords_checked + (prev.coords_checked if prev else 0))
            else:
                prev.coords_checked += r.coords_checked
    return list(reports.values())
