"""Instance-aware scoring: AJI, foreground Dice and the cross-domain average."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ScoreRecord:
    dataset: str
    image_id: str
    aji: float
    dice: float


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Binary foreground Dice; 1.0 when both maps are empty."""
    pred, gt = _check(pred, gt)
    p, g = pred > 0, gt > 0
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def _contingency(pred: np.ndarray, gt: np.ndarray):
    """Intersection table between gt ids (rows) and pred ids (cols), plus sizes."""
    gt_ids, gt_inv = np.unique(gt, return_inverse=True)
    pr_ids, pr_inv = np.unique(pred, return_inverse=True)
    table = np.zeros((len(gt_ids), len(pr_ids)), dtype=np.int64)
    np.add.at(table, (gt_inv.ravel(), pr_inv.ravel()), 1)
    gt_keep, pr_keep = gt_ids > 0, pr_ids > 0
    gt_sizes = table.sum(axis=1)[gt_keep]
    pr_sizes = table.sum(axis=0)[pr_keep]
    return table[np.ix_(gt_keep, pr_keep)], gt_sizes, pr_sizes


def aji(pred: np.ndarray, gt: np.ndarray) -> float:
    """Aggregated Jaccard Index with one-to-one greedy matching.

    Ground-truth instances are visited in ascending id; each takes the unused
    prediction of highest IoU (ties to the smaller prediction id). Predictions
    never taken are added to the union. Both maps empty scores 1.0.
    """
    pred, gt = _check(pred, gt)
    inter, gt_sizes, pr_sizes = _contingency(pred, gt)
    if len(gt_sizes) == 0 and len(pr_sizes) == 0:
        return 1.0
    used = np.zeros(len(pr_sizes), dtype=bool)
    total_inter = 0
    total_union = 0
    for g in range(len(gt_sizes)):
        union = gt_sizes[g] + pr_sizes - inter[g]
        iou = np.where(used, -1.0, inter[g] / union)
        best = int(np.argmax(iou)) if len(iou) else -1
        if best >= 0 and iou[best] > 0:
            used[best] = True
            total_inter += int(inter[g, best])
            total_union += int(union[best])
        else:
            total_union += int(gt_sizes[g])
    total_union += int(pr_sizes[~used].sum())
    return total_inter / total_union if total_union else 0.0


def score(pred: np.ndarray, gt: np.ndarray, dataset: str = "",
          image_id: str = "") -> ScoreRecord:
    return ScoreRecord(dataset, image_id, aji(pred, gt), dice(pred, gt))


def cross_domain_average(records: Iterable[ScoreRecord],
                         held_out: Sequence[str]) -> tuple[float, float]:
    """Mean over ``held_out`` domains of each domain's mean (AJI, Dice)."""
    if not held_out:
        raise ValueError("no held-out domains given")
    per_domain: dict[str, list[ScoreRecord]] = defaultdict(list)
    for r in records:
        per_domain[r.dataset].append(r)
    ajis, dices = [], []
    for d in held_out:
        rs = per_domain.get(d)
        if not rs:
            raise ValueError(f"domain {d!r} has no score records")
        ajis.append(np.mean([r.aji for r in rs]))
        dices.append(np.mean([r.dice for r in rs]))
    return float(np.mean(ajis)), float(np.mean(dices))


def domain_means(records: Iterable[ScoreRecord]) -> dict[str, tuple[float, float]]:
    per_domain: dict[str, list[ScoreRecord]] = defaultdict(list)
    for r in records:
        per_domain[r.dataset].append(r)
    return {d: (float(np.mean([r.aji for r in rs])), float(np.mean([r.dice for r in rs])))
            for d, rs in sorted(per_domain.items())}
