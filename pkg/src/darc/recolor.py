"""Re-coloring: grayscale -> learned colorization -> rank-preserving sort matching.

Images handled by the numpy helpers are ``H x W x C`` floats in ``[0, 1]``.
The torch helpers work on batched ``N x C x H x W`` tensors so they can sit
inside the network graph.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

# ITU-R BT.601 luma weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _as_hwc(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {image.shape}")
    return image


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Convert an RGB ``H x W x 3`` image to a single-channel ``H x W x 1`` luma image."""
    image = _as_hwc(image)
    if image.shape[2] != 3:
        raise ValueError(f"to_grayscale needs 3 channels, got {image.shape[2]}")
    wr, wg, wb = LUMA_WEIGHTS
    # green + blue first: this order sums the weights to exactly 1.0
    gray = wr * image[:, :, 0] + (wg * image[:, :, 1] + wb * image[:, :, 2])
    return np.clip(gray, 0.0, 1.0)[:, :, None]


def rank_map(image: np.ndarray) -> np.ndarray:
    """Per-channel rank of every pixel, ``ArgSort(ArgSort(I))`` with stable ties.

    Returns an ``HW x C`` integer array; each column is a permutation of ``0..HW-1``.
    """
    image = _as_hwc(image)
    flat = image.reshape(-1, image.shape[2])
    order = np.argsort(flat, axis=0, kind="stable")
    return np.argsort(order, axis=0, kind="stable")


def sort_match(image: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Give ``image`` the exact per-channel value distribution of ``reference``.

    The k-th smallest pixel of ``image`` (per channel, ties broken by raster
    index) receives the k-th smallest value of ``reference``.
    """
    image = _as_hwc(image)
    reference = _as_hwc(reference)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {reference.shape}")
    h, w, c = image.shape
    ranks = rank_map(image)
    sorted_values = np.sort(reference.reshape(-1, c), axis=0)
    out = np.take_along_axis(sorted_values, ranks, axis=0)
    return out.reshape(h, w, c)


def rgb_to_gray_tensor(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] != 3:
        raise ValueError(f"expected N x 3 x H x W, got {tuple(x.shape)}")
    wr, wg, wb = LUMA_WEIGHTS
    gray = wr * x[:, 0:1] + (wg * x[:, 1:2] + wb * x[:, 2:3])
    return gray.clamp(0.0, 1.0)


def sort_match_tensor(image: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Batched sort matching on ``N x C x H x W`` tensors.

    Gradients reach ``reference`` through its sorted values; the permutation
    taken from ``image`` is treated as a constant.
    """
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {tuple(image.shape)} vs {tuple(reference.shape)}")
    n, c, h, w = image.shape
    flat = image.detach().reshape(n, c, h * w)
    order = torch.sort(flat, dim=-1, stable=True).indices
    ranks = torch.sort(order, dim=-1, stable=True).indices
    sorted_values = torch.sort(reference.reshape(n, c, h * w), dim=-1, stable=True).values
    return torch.gather(sorted_values, -1, ranks).reshape(n, c, h, w)


class ColorizerBlock(nn.Module):
    def __init__(self, width: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv2(torch.relu(self.conv1(x)))
        return torch.relu(x + h)


class Colorizer(nn.Module):
    """Module mapping a 1-channel image to a 3-channel image in ``[0, 1]``.

    3x3 stem, one residual block, 1x1 projection to RGB, sigmoid.
    """

    def __init__(self, width: int = 16) -> None:
        super().__init__()
        self.stem = nn.Conv2d(1, width, 3, padding=1)
        self.block = ColorizerBlock(width)
        self.head = nn.Conv2d(width, 3, 1)

    def forward(self, gray: torch.Tensor) -> torch.Tensor:
        h = self.block(torch.relu(self.stem(gray)))
        return torch.sigmoid(self.head(h))


def recolor_tensor(x: torch.Tensor, colorizer: nn.Module) -> torch.Tensor:
    reference = colorizer(rgb_to_gray_tensor(x))
    return sort_match_tensor(x, reference)


def recolor(image: np.ndarray, colorizer: nn.Module) -> np.ndarray:
    """Re-color a single ``H x W x 3`` image with ``colorizer``; returns ``H x W x 3``."""
    image = _as_hwc(image)
    if image.shape[2] != 3:
        raise ValueError(f"recolor needs an RGB image, got {image.shape[2]} channels")
    param = next(colorizer.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)[None]
    with torch.no_grad():
        out = recolor_tensor(x, colorizer)
    return out[0].permute(1, 2, 0).cpu().numpy()
