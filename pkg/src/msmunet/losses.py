"""Segmentation losses, deep-supervision aggregation and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, clip, log

DICE_EPS = 1e-5
PROB_CLAMP = 1e-7


def _check_binary(target: np.ndarray, what: str) -> None:
    if not np.all((target == 0) | (target == 1)):
        raise ValueError(f"{what} must be binary (0/1)")


def dice_loss(pred_prob: Tensor, target) -> Tensor:
    """1 - (2Σpt + ε)/(Σp + Σt + ε) per image, averaged over the batch."""
    target = np.asarray(getattr(target, "data", target), dtype=float)
    _check_binary(target, "dice target")
    if target.shape != pred_prob.shape:
        raise ValueError(f"dice: prediction {pred_prob.shape} and target {target.shape} differ")
    axes = tuple(range(1, pred_prob.ndim))
    t = Tensor(target)
    inter = (pred_prob * t).sum(axis=axes)
    denom = pred_prob.sum(axis=axes) + float(DICE_EPS) + Tensor(target.sum(axis=axes))
    score = (inter * 2.0 + DICE_EPS) / denom
    return (1.0 - score).mean()


def edge_weights(edge: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-image (w0, w1): w0 is the edge-pixel fraction, w1 = 1 - w0."""
    edge = np.asarray(edge, dtype=float)
    axes = tuple(range(1, edge.ndim))
    w0 = edge.sum(axis=axes) / np.prod(edge.shape[1:])
    return w0, 1.0 - w0


def edge_bce(pred_prob: Tensor, edge, swap_edge_weights: bool = False) -> Tensor:
    """Class-weighted binary cross-entropy for edge maps.

    L = -Σ[w0·E·log P + w1·(1-E)·log(1-P)] / (W·H) per image, batch mean.
    ``swap_edge_weights`` gives the edge class w1 and background w0 instead.
    """
    edge = np.asarray(getattr(edge, "data", edge), dtype=float)
    _check_binary(edge, "edge label")
    if edge.shape != pred_prob.shape:
        raise ValueError(f"edge_bce: prediction {pred_prob.shape} and label {edge.shape} differ")
    w0, w1 = edge_weights(edge)
    if swap_edge_weights:
        w0, w1 = w1, w0
    bshape = (-1,) + (1,) * (edge.ndim - 1)
    pos = Tensor(w0.reshape(bshape) * edge)
    neg = Tensor(w1.reshape(bshape) * (1.0 - edge))
    p = clip(pred_prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = pos * log(p) + neg * log(1.0 - p)
    per_image = terms.sum(axis=tuple(range(1, edge.ndim))) * (-1.0 / np.prod(edge.shape[1:]))
    return per_image.mean()


def aux_loss(
    maps: Sequence[Tensor],
    targets: Sequence,
    weights: Sequence[float],
    base_loss: Callable[[Tensor, np.ndarray], Tensor],
) -> Tensor:
    """Σ_k weight_k · base_loss(map_k, target_k); zero when there are no maps."""
    if len(maps) == 0:
        return Tensor(0.0)
    if len(weights) != len(maps) or len(targets) != len(maps):
        raise ValueError(f"aux_loss: {len(maps)} maps, {len(targets)} targets, {len(weights)} weights")
    total = None
    for m, t, w in zip(maps, targets, weights):
        term = base_loss(m, t) * float(w)
        total = term if total is None else total + term
    return total


def downsample_nearest(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour reduction of (B,1,H,W) binary maps (cell centres)."""
    if factor == 1:
        return mask
    return mask[..., factor // 2 :: factor, factor // 2 :: factor]


def downsample_max(edge: np.ndarray, factor: int) -> np.ndarray:
    """Any-pixel reduction; keeps thin edge maps binary without dropping them."""
    if factor == 1:
        return edge
    b, c, h, w = edge.shape
    return edge.reshape(b, c, h // factor, factor, w // factor, factor).max(axis=(3, 5))


@dataclass
class LossReport:
    area: float = 0.0
    edge: float = 0.0
    aux_area: float = 0.0
    aux_edge: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {"area": self.area, "aux_area": self.aux_area, "edge": self.edge,
                "aux_edge": self.aux_edge, "total": self.total}


def total_loss(outputs, mask: np.ndarray, edge: np.ndarray | None, weights=(0.6, 0.3, 0.1),
               swap_edge_weights: bool = False) -> tuple[Tensor, LossReport]:
    """Unweighted sum of area, auxiliary area, edge and auxiliary edge terms.

    ``outputs`` is a ModelOutputs; absent branches contribute zero.
    """
    from .model import logits_to_prob

    mask = np.asarray(mask, dtype=float)
    full = mask.shape[-1]
    area = dice_loss(outputs.area_prob(), mask)
    terms = {"area": area}
    if outputs.aux_area:
        probs = [logits_to_prob(a) for a in outputs.aux_area]
        targets = [downsample_nearest(mask, full // p.shape[-1]) for p in probs]
        terms["aux_area"] = aux_loss(probs, targets, weights, dice_loss)
    if outputs.edge_prob is not None:
        if edge is None:
            raise ValueError("edge outputs present but no edge labels supplied")
        edge = np.asarray(edge, dtype=float)

        def bce(p, e):
            return edge_bce(p, e, swap_edge_weights)

        terms["edge"] = bce(outputs.edge_prob, edge)
        if outputs.aux_edge:
            targets = [downsample_max(edge, full // p.shape[-1]) for p in outputs.aux_edge]
            terms["aux_edge"] = aux_loss(outputs.aux_edge, targets, weights, bce)
    total = None
    for key in ("area", "aux_area", "edge", "aux_edge"):
        if key in terms:
            total = terms[key] if total is None else total + terms[key]
    values = {k: float(v.item()) for k, v in terms.items()}
    report = LossReport(**values)
    report.total = report.area + report.aux_area + report.edge + report.aux_edge
    return total, report


@dataclass
class MetricReport:
    dsc: float
    precision: float
    recall: float
    per_image: list[tuple[float, float, float]] = field(default_factory=list)


def segmentation_metrics(pred_prob, target, threshold: float = 0.5) -> MetricReport:
    """Per-image DSC / precision / recall of the thresholded prediction.

    An image with an empty target and an empty prediction scores 1 on all three.
    """
    pred = np.asarray(getattr(pred_prob, "data", pred_prob), dtype=float) > threshold
    tgt = np.asarray(getattr(target, "data", target)) > 0.5
    if pred.shape != tgt.shape:
        raise ValueError(f"metrics: prediction {pred.shape} and target {tgt.shape} differ")
    if pred.ndim == 2:
        pred, tgt = pred[None], tgt[None]
    per = []
    for p, t in zip(pred, tgt):
        tp = int(np.sum(p & t))
        fp = int(np.sum(p & ~t))
        fn = int(np.sum(~p & t))
        dsc = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        prec = (1.0 if fn == 0 else 0.0) if tp + fp == 0 else tp / (tp + fp)
        rec = (1.0 if fp == 0 else 0.0) if tp + fn == 0 else tp / (tp + fn)
        per.append((dsc, prec, rec))
    arr = np.array(per)
    return MetricReport(float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean()), per)
