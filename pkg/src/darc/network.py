"""U-Net with residual blocks, optional re-coloring, DAIN layers and a ratio head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from .dain import DAIN, DEFAULT_ALPHA, EPS, InstanceNorm
from .recolor import Colorizer, recolor_tensor

VARIANTS = ("baseline-bn", "baseline-in", "darc-all", "darc-enc")
# Base width at which baseline-in lands near 5.0M parameters (depth 4).
REFERENCE_WIDTH = 25


@dataclass
class ModelConfig:
    variant: str = "darc-enc"
    width: int = REFERENCE_WIDTH
    depth: int = 4
    colorizer_width: int = 16
    estimator_hidden: int = 2
    rph_hidden: int = 128
    tau_seg: float = 0.5
    tau_cnt: float = 0.5
    alpha: float = DEFAULT_ALPHA
    eps: float = EPS

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def is_darc(self) -> bool:
        return self.variant.startswith("darc")

    @property
    def min_size(self) -> int:
        return 2 ** self.depth

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _norm(kind: str, channels: int, cfg: ModelConfig) -> nn.Module:
    if kind == "bn":
        return nn.BatchNorm2d(channels, eps=cfg.eps)
    if kind == "in":
        return InstanceNorm(channels, cfg.eps)
    if kind == "dain":
        return DAIN(channels, cfg.alpha, cfg.eps, cfg.estimator_hidden)
    raise ValueError(kind)


def _apply_norm(norm: nn.Module, x: torch.Tensor, rho: torch.Tensor | None) -> torch.Tensor:
    if isinstance(norm, DAIN):
        return norm(x, rho)
    return norm(x)


class ResBlock(nn.Module):
    """conv-norm-relu-conv-norm plus (projected) identity; DA-ResBlock when norms are DAIN."""

    def __init__(self, cin: int, cout: int, norm: str, cfg: ModelConfig) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.norm1 = _norm(norm, cout, cfg)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _norm(norm, cout, cfg)
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x: torch.Tensor, rho: torch.Tensor | None = None) -> torch.Tensor:
        h = torch.relu(_apply_norm(self.norm1, self.conv1(x), rho))
        h = _apply_norm(self.norm2, self.conv2(h), rho)
        return torch.relu(h + self.skip(x))


class RatioHead(nn.Module):
    """Global average pool -> hidden linear -> scalar logit (zero-initialized output)."""

    def __init__(self, channels: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        pooled = feat.mean(dim=(2, 3))
        return self.fc2(torch.relu(self.fc1(pooled))).squeeze(-1)


class DARCNet(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        enc_norm, dec_norm = {
            "baseline-bn": ("bn", "bn"),
            "baseline-in": ("in", "in"),
            "darc-all": ("dain", "dain"),
            "darc-enc": ("dain", "bn"),
        }[cfg.variant]
        widths = [cfg.width * 2 ** i for i in range(cfg.depth + 1)]
        self.widths = widths

        self.colorizer = Colorizer(cfg.colorizer_width) if cfg.is_darc else None
        self.encoder = nn.ModuleList()
        cin = 3
        for w in widths:
            self.encoder.append(ResBlock(cin, w, enc_norm, cfg))
            cin = w
        self.decoder = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.decoder.append(ResBlock(cin + widths[i], widths[i], dec_norm, cfg))
            cin = widths[i]
        self.seg_head = nn.Conv2d(widths[0], 1, 1)
        self.cnt_head = nn.Conv2d(widths[0], 1, 1)
        for head in (self.seg_head, self.cnt_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.ratio_head = RatioHead(widths[-1], cfg.rph_hidden) if cfg.is_darc else None

    # -- building blocks -------------------------------------------------
    def dain_layers(self) -> list[DAIN]:
        return [m for m in self.modules() if isinstance(m, DAIN)]

    def residuals(self, rho: torch.Tensor) -> list[torch.Tensor]:
        """``f_l(rho)`` for every DAIN layer, in module order."""
        return [layer.residual(rho) for layer in self.dain_layers()]

    def recolor(self, x: torch.Tensor) -> torch.Tensor:
        if self.colorizer is None:
            return x
        return recolor_tensor(x, self.colorizer)

    def encode(self, x: torch.Tensor, rho: torch.Tensor | None = None) -> list[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.encoder):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x, rho)
            feats.append(x)
        return feats

    def decode(self, feats: list[torch.Tensor],
               rho: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        x = feats[-1]
        for block, skip in zip(self.decoder, reversed(feats[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1), rho)
        return self.seg_head(x).squeeze(1), self.cnt_head(x).squeeze(1)

    def check_input(self, x: torch.Tensor) -> None:
        m = self.cfg.min_size
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W, got {tuple(x.shape)}")
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {m}")

    # -- the two passes --------------------------------------------------
    def ratio_logit(self, x: torch.Tensor) -> torch.Tensor:
        """Pass 1 on an already re-colored batch: encoder with running residuals -> logit."""
        if self.ratio_head is None:
            raise RuntimeError(f"variant {self.cfg.variant} has no ratio head")
        return self.ratio_head(self.encode(x, None)[-1])

    def segment(self, x: torch.Tensor,
                rho: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Pass 2 on an already re-colored batch: seg and contour logits ``N x H x W``."""
        if self.cfg.is_darc and rho is None:
            raise ValueError("darc variants need a ratio for the segmentation pass")
        return self.decode(self.encode(x, rho), rho)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        """Full inference graph: recolor -> ratio -> segmentation. Returns logits and rho."""
        self.check_input(x)
        x = self.recolor(x)
        rho = None
        if self.cfg.is_darc:
            rho = torch.sigmoid(self.ratio_logit(x))
        seg, cnt = self.segment(x, rho)
        return seg, cnt, rho


def build_model(config: ModelConfig) -> DARCNet:
    return DARCNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def darc_overhead_parameters(model: DARCNet) -> int:
    """Parameters added on top of the plain U-Net: colorizer, estimators, projections, ratio head."""
    extra = 0
    if model.colorizer is not None:
        extra += count_parameters(model.colorizer)
    if model.ratio_head is not None:
        extra += count_parameters(model.ratio_head)
    for layer in model.dain_layers():
        extra += count_parameters(layer.estimator) + count_parameters(layer.proj)
    return extra


def forward_pass1(model: DARCNet, recolored: torch.Tensor) -> torch.Tensor:
    """Ratio prediction ``rho`` in (0, 1) for each image of a re-colored batch."""
    return torch.sigmoid(model.ratio_logit(recolored))


def forward_pass2(model: DARCNet, recolored: torch.Tensor,
                  rho: torch.Tensor | float | None) -> tuple[torch.Tensor, torch.Tensor]:
    """Segmentation and contour probabilities ``N x H x W`` conditioned on ``rho``."""
    if rho is not None:
        rho = torch.as_tensor(rho, dtype=recolored.dtype).reshape(-1)
        if torch.any((rho < 0) | (rho > 1)):
            raise ValueError("ratio must lie in [0, 1]")
        if rho.numel() == 1 and recolored.shape[0] > 1:
            rho = rho.expand(recolored.shape[0])
    seg, cnt = model.segment(recolored, rho)
    return torch.sigmoid(seg), torch.sigmoid(cnt)
