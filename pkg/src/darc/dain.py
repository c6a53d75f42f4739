"""Instance normalization whose statistics are re-estimated from a ratio-driven residual.

Feature maps are ``N x C x H x W``. Statistics and residuals are ``N x C``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

EPS = 1e-5
DEFAULT_ALPHA = 0.1
# Bound on the log-scale correction of delta; keeps exp() finite and positive.
LOG_SCALE_LIMIT = 20.0


class FeatureStats(NamedTuple):
    mu: torch.Tensor
    delta: torch.Tensor


def instance_stats(x: torch.Tensor, eps: float = EPS) -> FeatureStats:
    """Per-sample, per-channel spatial mean and ``sqrt(biased var + eps)``."""
    mu = x.mean(dim=(2, 3))
    var = ((x - mu[:, :, None, None]) ** 2).mean(dim=(2, 3))
    return FeatureStats(mu, torch.sqrt(var + eps))


def normalize(x: torch.Tensor, stats: FeatureStats) -> torch.Tensor:
    return (x - stats.mu[:, :, None, None]) / stats.delta[:, :, None, None]


class ChannelMLP(nn.Module):
    """Per-channel two-layer map ``(C, in_features) -> C``.

    Each channel owns its own small MLP, so the whole map costs ``O(C)``
    parameters. The output layer starts at zero.
    """

    def __init__(self, channels: int, in_features: int = 3, hidden: int = 2) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.w1 = nn.Parameter(torch.empty(channels, in_features, hidden).uniform_(-bound, bound))
        self.b1 = nn.Parameter(torch.empty(channels, hidden).uniform_(-bound, bound))
        self.w2 = nn.Parameter(torch.zeros(channels, hidden))
        self.b2 = nn.Parameter(torch.zeros(channels))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(torch.einsum("nci,cih->nch", feats, self.w1) + self.b1)
        return torch.einsum("nch,ch->nc", h, self.w2) + self.b2


class StatEstimator(nn.Module):
    """Re-estimates ``(mu, delta)`` from ``(mu, delta, ds)`` as residual corrections.

    ``mu' = mu + M_mu`` and ``delta' = delta * exp(M_delta)``. With the output
    layers at zero both corrections vanish exactly, which is plain IN.
    """

    def __init__(self, channels: int, hidden: int = 2) -> None:
        super().__init__()
        self.mu_net = ChannelMLP(channels, 3, hidden)
        self.delta_net = ChannelMLP(channels, 3, hidden)

    def forward(self, stats: FeatureStats, ds: torch.Tensor) -> FeatureStats:
        feats = torch.stack([stats.mu, stats.delta, ds.expand_as(stats.mu)], dim=-1)
        mu = stats.mu + self.mu_net(feats)
        log_scale = self.delta_net(feats).clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
        return FeatureStats(mu, stats.delta * torch.exp(log_scale))


def reestimate(stats: FeatureStats, ds: torch.Tensor, est: StatEstimator) -> FeatureStats:
    if ds.shape[-1] != stats.mu.shape[-1]:
        raise ValueError(f"residual has {ds.shape[-1]} channels, stats have {stats.mu.shape[-1]}")
    return est(stats, ds)


def update_running(ds_ra: torch.Tensor, ds: torch.Tensor, alpha: float,
                   training: bool = True) -> torch.Tensor:
    """One EMA step ``(1 - alpha) * ds_ra + alpha * ds``.

    ``ds`` may carry a leading batch axis; it is averaged first.
    """
    if not training:
        raise RuntimeError("running residual is frozen outside training")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if ds.dim() == 2:
        ds = ds.mean(dim=0)
    return (1.0 - alpha) * ds_ra + alpha * ds


class RatioProjection(nn.Module):
    """``f``: scalar ratio -> C-vector residual (a 1x1 conv on a 1x1 map)."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.linear = nn.Linear(1, channels)

    def forward(self, rho: torch.Tensor) -> torch.Tensor:
        return self.linear(rho.reshape(-1, 1))


def residual_from_ratio(rho: torch.Tensor | float, proj: RatioProjection) -> torch.Tensor:
    rho_t = torch.as_tensor(rho, dtype=proj.linear.weight.dtype)
    if torch.any((rho_t < 0) | (rho_t > 1)) or not torch.all(torch.isfinite(rho_t)):
        raise ValueError("ratio must lie in [0, 1]")
    return proj(rho_t)


def dain_forward(x: torch.Tensor, ds: torch.Tensor | None, ds_ra: torch.Tensor,
                 est: StatEstimator, eps: float = EPS) -> torch.Tensor:
    """Normalize ``x`` with statistics re-estimated from ``ds`` (or ``ds_ra`` when absent).

    No affine and no buffer update; see :class:`DAIN` for the layer.
    """
    stats = instance_stats(x, eps)
    residual = ds_ra.expand_as(stats.mu) if ds is None else ds
    return normalize(x, reestimate(stats, residual, est))


class InstanceNorm(nn.Module):
    """Plain IN with learned per-channel affine, sharing DAIN's arithmetic."""

    def __init__(self, channels: int, eps: float = EPS) -> None:
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = normalize(x, instance_stats(x, self.eps))
        return y * self.weight[:, None, None] + self.bias[:, None, None]


class DAIN(nn.Module):
    """Distribution-aware instance normalization layer.

    ``forward(x, rho)`` uses ``f(rho)`` as the residual and, while training,
    folds it into the running residual; ``forward(x)`` uses the running residual.
    """

    def __init__(self, channels: int, alpha: float = DEFAULT_ALPHA, eps: float = EPS,
                 hidden: int = 2) -> None:
        super().__init__()
        self.alpha = alpha
        self.eps = eps
        self.estimator = StatEstimator(channels, hidden)
        self.proj = RatioProjection(channels)
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("ds_ra", torch.zeros(channels))

    def residual(self, rho: torch.Tensor) -> torch.Tensor:
        return residual_from_ratio(rho, self.proj)

    def forward(self, x: torch.Tensor, rho: torch.Tensor | None = None) -> torch.Tensor:
        ds = None if rho is None else self.residual(rho)
        y = dain_forward(x, ds, self.ds_ra, self.estimator, self.eps)
        if ds is not None and self.training:
            with torch.no_grad():
                self.ds_ra.copy_(update_running(self.ds_ra, ds.detach(), self.alpha))
        return y * self.weight[:, None, None] + self.bias[:, None, None]
