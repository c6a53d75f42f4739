"""Two-pass inference with sliding-window tiling, and contour-subtraction instance decoding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from skimage.segmentation import relabel_sequential, watershed

from .data import Sample
from .metrics import ScoreRecord, score
from .network import DARCNet

TILE = 224
STRIDE = 112
MIN_AREA = 10


@dataclass
class PredictionMaps:
    seg: np.ndarray  # H x W in [0, 1]
    contour: np.ndarray  # H x W in [0, 1]
    rho: float | None = None  # mean predicted ratio over windows; None for baselines


def _tile_starts(length: int, tile: int, stride: int) -> list[int]:
    if length <= tile:
        return [0]
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def _pad_to_multiple(x: torch.Tensor, m: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


@torch.no_grad()
def _window_logits(model: DARCNet, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, float | None]:
    x, (h, w) = _pad_to_multiple(x, model.cfg.min_size)
    rho = None
    if model.cfg.is_darc:
        rho = torch.sigmoid(model.ratio_logit(x))
    seg, cnt = model.segment(x, rho)
    return seg[0, :h, :w], cnt[0, :h, :w], None if rho is None else float(rho[0])


@torch.no_grad()
def two_pass_infer(model: DARCNet, image: np.ndarray, tile: int = TILE,
                   stride: int = STRIDE) -> PredictionMaps:
    """Recolor the whole image, then per window: ratio pass, conditioned segmentation pass.

    Windows overlap by ``tile - stride`` and their logits are averaged.
    """
    if model.training:
        raise RuntimeError("call model.eval() before inference")
    image = np.asarray(image)
    h, w = image.shape[:2]
    m = model.cfg.min_size
    if h < m or w < m:
        raise ValueError(f"image {h}x{w} is smaller than the minimum size {m}x{m}")
    if tile % m:
        raise ValueError(f"tile size {tile} must be divisible by {m}")
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)[None]
    x = model.recolor(x)

    if h <= tile and w <= tile:
        seg, cnt, rho = _window_logits(model, x)
        return PredictionMaps(torch.sigmoid(seg).numpy(), torch.sigmoid(cnt).numpy(), rho)

    seg_sum = torch.zeros(h, w, dtype=dtype)
    cnt_sum = torch.zeros(h, w, dtype=dtype)
    hits = torch.zeros(h, w, dtype=dtype)
    rhos = []
    for y0 in _tile_starts(h, tile, stride):
        for x0 in _tile_starts(w, tile, stride):
            win = x[:, :, y0:y0 + tile, x0:x0 + tile]
            seg, cnt, rho = _window_logits(model, win)
            wh, ww = seg.shape
            seg_sum[y0:y0 + wh, x0:x0 + ww] += seg
            cnt_sum[y0:y0 + wh, x0:x0 + ww] += cnt
            hits[y0:y0 + wh, x0:x0 + ww] += 1
            if rho is not None:
                rhos.append(rho)
    seg = torch.sigmoid(seg_sum / hits).numpy()
    cnt = torch.sigmoid(cnt_sum / hits).numpy()
    return PredictionMaps(seg, cnt, float(np.mean(rhos)) if rhos else None)


def extract_instances(maps: PredictionMaps, tau_seg: float = 0.5, tau_cnt: float = 0.5,
                      min_area: int = MIN_AREA) -> np.ndarray:
    """Seg minus contour gives markers; markers are grown back over the seg mask.

    Markers are 4-connected components of ``seg > tau_seg`` minus
    ``contour > tau_cnt``. Every foreground pixel goes to its geodesically
    nearest marker; foreground components holding no marker become instances
    of their own. Instances smaller than ``min_area`` are dropped and ids
    relabeled to ``1..K``.
    """
    fg = np.asarray(maps.seg) > tau_seg
    markers_mask = fg & ~(np.asarray(maps.contour) > tau_cnt)
    markers, n = ndimage.label(markers_mask)
    if n:
        labels = watershed(np.zeros(fg.shape), markers, mask=fg, connectivity=1)
    else:
        labels = np.zeros(fg.shape, dtype=np.int64)
    orphans, n_orphans = ndimage.label(fg & (labels == 0))
    if n_orphans:
        labels = np.where(orphans > 0, orphans + n, labels)
    if min_area > 0 and labels.any():
        sizes = np.bincount(labels.ravel())
        small = sizes < min_area
        small[0] = False
        labels[small[labels]] = 0
    out, _, _ = relabel_sequential(labels.astype(np.int64))
    return out.astype(np.int32)


def predict_instances(model: DARCNet, image: np.ndarray, tau_seg: float = 0.5,
                      tau_cnt: float = 0.5, min_area: int = MIN_AREA) -> np.ndarray:
    return extract_instances(two_pass_infer(model, image), tau_seg, tau_cnt, min_area)


def evaluate(model: DARCNet, samples: Sequence[Sample], tau_seg: float = 0.5,
             tau_cnt: float = 0.5, min_area: int = MIN_AREA) -> list[ScoreRecord]:
    """Score every sample; one record per image."""
    return [score(predict_instances(model, s.image, tau_seg, tau_cnt, min_area), s.labels,
                  s.domain, s.image_id) for s in samples]
