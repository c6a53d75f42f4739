"""Losses, patch sampling, augmentation, schedule and the two-pass training step."""
from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data import Sample, ground_truth_ratio, labels_to_contour
from .network import DARCNet

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "seg_bce", "contour_bce", "rph_bce", "rph_mse", "lr")


@dataclass
class TrainConfig:
    batch_size: int = 4
    iterations: int = 40_000
    lr_initial: float = 1e-3
    lr_final: float = 1e-5
    patch_size: int = 224
    rph_weight: float = 1.0
    contour_thickness: int = 2
    augment_flip: bool = True
    augment_color: bool = True
    augment_blur: bool = True
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.iterations < 1 or self.patch_size < 1:
            raise ValueError("batch_size, iterations and patch_size must be positive")
        if not self.lr_initial >= self.lr_final > 0:
            raise ValueError("learning rate must decay from lr_initial down to lr_final > 0")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LossBreakdown:
    seg_bce: float
    contour_bce: float
    rph_bce: float
    rph_mse: float
    total: float


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr_initial`` at step 0 to ``lr_final`` at ``cfg.iterations``."""
    t = min(max(step, 0), cfg.iterations) / cfg.iterations
    return cfg.lr_final + 0.5 * (cfg.lr_initial - cfg.lr_final) * (1.0 + math.cos(math.pi * t))


# -- losses ------------------------------------------------------------------

def rph_terms(rho: torch.Tensor, rho_g: torch.Tensor, ds_pred: Sequence[torch.Tensor],
              ds_gt: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """``(BCE(rho, rho_g), MSE(f(rho), f(rho_g)))``; the MSE is averaged over layers."""
    rho = torch.as_tensor(rho)
    rho_g = torch.as_tensor(rho_g, dtype=rho.dtype)
    if torch.any((rho_g < 0) | (rho_g > 1)):
        raise ValueError("ground-truth ratio must lie in [0, 1]")
    if len(ds_pred) != len(ds_gt):
        raise ValueError(f"{len(ds_pred)} predicted residuals vs {len(ds_gt)} targets")
    bce = F.binary_cross_entropy(rho, rho_g)
    if not ds_pred:
        return bce, rho.new_zeros(())
    mse = torch.stack([F.mse_loss(p, g) for p, g in zip(ds_pred, ds_gt)]).mean()
    return bce, mse


def rph_loss(rho: torch.Tensor, rho_g: torch.Tensor, ds_pred: Sequence[torch.Tensor],
             ds_gt: Sequence[torch.Tensor]) -> torch.Tensor:
    bce, mse = rph_terms(rho, rho_g, ds_pred, ds_gt)
    return bce + mse


def compute_losses(model: DARCNet, images: torch.Tensor, seg_target: torch.Tensor,
                   cnt_target: torch.Tensor, rho_g: torch.Tensor,
                   rph_weight: float = 1.0) -> dict[str, torch.Tensor]:
    """Full training graph for one batch; returns the loss terms and their weighted total.

    DARC variants: recolor -> ratio pass with running residuals -> segmentation
    pass conditioned on the ground-truth ratio. Baselines: one plain pass.
    """
    x = model.recolor(images)
    zero = images.new_zeros(())
    if model.cfg.is_darc:
        rho_hat = torch.sigmoid(model.ratio_logit(x))
        seg, cnt = model.segment(x, rho_g)
        rph_bce, rph_mse = rph_terms(rho_hat, rho_g, model.residuals(rho_hat),
                                     model.residuals(rho_g))
    else:
        seg, cnt = model.segment(x, None)
        rph_bce, rph_mse = zero, zero
    seg_bce = F.binary_cross_entropy_with_logits(seg, seg_target)
    cnt_bce = F.binary_cross_entropy_with_logits(cnt, cnt_target)
    total = seg_bce + cnt_bce + rph_weight * (rph_bce + rph_mse)
    return {"seg_bce": seg_bce, "contour_bce": cnt_bce, "rph_bce": rph_bce,
            "rph_mse": rph_mse, "total": total}


# -- data pipeline -------------------------------------------------------------

def augment(patch: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
            flip: bool = True, color: bool = True,
            blur: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Random flips/rot90 on both arrays; color jitter and Gaussian blur on the patch only."""
    if flip:
        if rng.random() < 0.5:
            patch, labels = patch[:, ::-1], labels[:, ::-1]
        if rng.random() < 0.5:
            patch, labels = patch[::-1], labels[::-1]
        k = int(rng.integers(4))
        patch, labels = np.rot90(patch, k), np.rot90(labels, k)
    patch = np.ascontiguousarray(patch, dtype=np.float64)
    labels = np.ascontiguousarray(labels)
    if color:
        gain = rng.uniform(0.9, 1.1, size=3)
        offset = rng.uniform(-0.08, 0.08, size=3)
        contrast = rng.uniform(0.8, 1.2)
        mean = patch.mean(axis=(0, 1), keepdims=True)
        patch = (patch - mean) * contrast + mean
        patch = np.clip(patch * gain + offset, 0.0, 1.0)
    if blur and rng.random() < 0.5:
        sigma = rng.uniform(0.1, 1.0)
        patch = ndimage.gaussian_filter(patch, sigma=(sigma, sigma, 0), mode="reflect")
        patch = np.clip(patch, 0.0, 1.0)
    return patch, labels


def random_crop(sample: Sample, size: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    image, labels = sample.image, sample.labels
    h, w = labels.shape
    if h < size or w < size:
        ph, pw = max(size - h, 0), max(size - w, 0)
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")
        labels = np.pad(labels, ((0, ph), (0, pw)), mode="constant")
        h, w = labels.shape
    y0 = int(rng.integers(h - size + 1))
    x0 = int(rng.integers(w - size + 1))
    return image[y0:y0 + size, x0:x0 + size], labels[y0:y0 + size, x0:x0 + size]


class PatchSampler:
    """Deterministic stream of augmented training batches from a sample list."""

    def __init__(self, samples: Sequence[Sample], cfg: TrainConfig) -> None:
        if not samples:
            raise ValueError("no training samples")
        self.samples = list(samples)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    def batch(self, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        imgs, segs, cnts, ratios = [], [], [], []
        for _ in range(cfg.batch_size):
            sample = self.samples[int(self.rng.integers(len(self.samples)))]
            patch, labels = random_crop(sample, cfg.patch_size, self.rng)
            patch, labels = augment(patch, labels, self.rng, cfg.augment_flip,
                                    cfg.augment_color, cfg.augment_blur)
            imgs.append(patch.transpose(2, 0, 1))
            segs.append(labels > 0)
            cnts.append(labels_to_contour(labels, cfg.contour_thickness))
            ratios.append(ground_truth_ratio(labels))
        return {
            "images": torch.from_numpy(np.stack(imgs)).to(dtype),
            "seg": torch.from_numpy(np.stack(segs)).to(dtype),
            "contour": torch.from_numpy(np.stack(cnts)).to(dtype),
            "rho_g": torch.tensor(ratios, dtype=dtype),
        }


# -- training ------------------------------------------------------------------

def train_step(model: DARCNet, batch: dict[str, torch.Tensor],
               optimizer: torch.optim.Optimizer, rph_weight: float = 1.0) -> LossBreakdown:
    if not model.training:
        raise RuntimeError("train_step needs the model in training mode")
    for key, value in batch.items():
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"non-finite values in training batch '{key}'")
    losses = compute_losses(model, batch["images"], batch["seg"], batch["contour"],
                            batch["rho_g"], rph_weight)
    total = losses["total"]
    if not torch.isfinite(total):
        detail = ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in losses.items())
        raise FloatingPointError(f"non-finite training loss ({detail})")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return LossBreakdown(**{k: float(v.detach()) for k, v in losses.items()})


def train(model: DARCNet, samples: Sequence[Sample], cfg: TrainConfig,
          log_path: Path | str | None = None, checkpoint_path: Path | str | None = None,
          start_iteration: int = 0) -> list[dict[str, float]]:
    """Run ``cfg.iterations`` steps with Adam and cosine LR decay; returns the loss log."""
    from .checkpoint import save_checkpoint

    model.train()
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_initial)
    sampler = PatchSampler(samples, cfg)
    history: list[dict[str, float]] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for it in range(start_iteration, cfg.iterations):
            lr = learning_rate(it, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            out = train_step(model, sampler.batch(dtype), optimizer, cfg.rph_weight)
            row = {"iteration": it + 1, "seg_bce": out.seg_bce, "contour_bce": out.contour_bce,
                   "rph_bce": out.rph_bce, "rph_mse": out.rph_mse, "lr": lr}
            history.append(row)
            if writer is not None:
                writer.writerow([row[c] if c == "iteration" else repr(row[c]) for c in LOG_COLUMNS])
            if (it + 1) % max(1, cfg.iterations // 20) == 0:
                log.info("iter %d seg %.4f cnt %.4f rph %.4f/%.4f lr %.2e", it + 1,
                         out.seg_bce, out.contour_bce, out.rph_bce, out.rph_mse, lr)
            if (checkpoint_path is not None and cfg.checkpoint_every > 0
                    and (it + 1) % cfg.checkpoint_every == 0):
                save_checkpoint(checkpoint_path, model, it + 1, cfg)
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, cfg.iterations, cfg)
    return history
