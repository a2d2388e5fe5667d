"""Task losses built on the autodiff tapeable ops.

Segmentation combines BCE, soft Dice and focal terms with equal weights;
detection combines objectness BCE, a focal objectness term and smooth-L1
box regression that is skipped entirely on empty images.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import Sample

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
DICE_EPS = 1e-7


def _bce_from_probs(g: T.Graph, p: T.Var, target: np.ndarray) -> T.Var:
    y = g.constant(target)
    one = g.constant(np.ones_like(target))
    term = T.add(T.mul(y, T.log(p)), T.mul(T.sub(one, y), T.log(T.sub(one, p))))
    return T.scale(T.mean_all(term), -1.0)


def _focal_from_probs(g: T.Graph, p: T.Var, target: np.ndarray) -> T.Var:
    y = g.constant(target)
    one = g.constant(np.ones_like(target))
    pt = T.add(T.mul(p, y), T.mul(T.sub(one, p), T.sub(one, y)))
    alpha_t = g.constant((FOCAL_ALPHA * target
                          + (1.0 - FOCAL_ALPHA) * (1.0 - target)).astype(np.float32))
    gap = T.sub(one, pt)
    weight = T.mul(alpha_t, T.mul(gap, gap))  # gamma = 2
    return T.scale(T.mean_all(T.mul(weight, T.log(pt))), -1.0)


def classification_loss(g: T.Graph, logits: T.Var, label: int) -> T.Var:
    """Softmax cross-entropy for a single sample."""
    logp = T.log(T.softmax(logits, axis=-1))
    return T.scale(T.narrow(logp, 0, int(label), 1), -1.0)


def segmentation_loss(g: T.Graph, mask_logits: T.Var, mask: np.ndarray) -> T.Var:
    p = T.sigmoid(mask_logits)
    bce = _bce_from_probs(g, p, mask)
    inter = T.sum_all(T.mul(p, g.constant(mask)))
    denom = T.add(T.sum_all(p), g.constant([float(mask.sum()) + DICE_EPS]))
    dice = T.sub(g.constant([1.0]), T.div(T.scale(inter, 2.0), denom))
    focal = _focal_from_probs(g, p, mask)
    return T.add(T.add(bce, T.reshape(dice, (1,))), focal)


def detection_loss(g: T.Graph, pred: T.Var, box: np.ndarray, objectness: int) -> T.Var:
    obj_logit = T.narrow(pred, 0, 4, 1)
    obj_p = T.sigmoid(obj_logit)
    target = np.array([float(objectness)], dtype=np.float32)
    loss = T.add(_bce_from_probs(g, obj_p, target),
                 _focal_from_probs(g, obj_p, target))
    if objectness:  # box terms are masked out on empty images
        box_pred = T.narrow(pred, 0, 0, 4)
        loss = T.add(loss, T.sum_all(T.huber(box_pred, box)))
    return loss


def sample_loss(g: T.Graph, prediction: T.Var, sample: Sample) -> T.Var:
    if sample.task == "classification":
        return classification_loss(g, prediction, sample.label)
    if sample.task == "segmentation":
        return segmentation_loss(g, prediction, sample.label)
    if sample.task == "detection":
        box, obj = sample.label
        return detection_loss(g, prediction, box, obj)
    raise ValueError(f"unknown task kind {sample.task!r}")


def batch_mean(losses: list[T.Var]) -> T.Var:
    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    return T.scale(total, 1.0 / len(losses))
