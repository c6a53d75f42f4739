"""Shared builders for tests that exercise the full training graph."""
from __future__ import annotations

import numpy as np
import torch

from darc.network import ModelConfig, build_model
from darc.train import compute_losses


def randomize_zero_layers(model, scale: float = 0.3, seed: int = 0) -> None:
    """Give every zero-initialized layer random weights so all gradient paths are live."""
    g = torch.Generator().manual_seed(seed)

    def fill(t):
        t.copy_(scale * torch.randn(t.shape, generator=g, dtype=t.dtype))

    with torch.no_grad():
        for layer in model.dain_layers():
            for net in (layer.estimator.mu_net, layer.estimator.delta_net):
                fill(net.w2)
                fill(net.b2)
        for head in (model.seg_head, model.cnt_head):
            fill(head.weight)
        if model.ratio_head is not None:
            fill(model.ratio_head.fc2.weight)


def tiny_batch(n: int = 2, size: int = 16, seed: int = 0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    images = torch.from_numpy(rng.random((n, 3, size, size))).to(dtype)
    seg = torch.from_numpy(rng.random((n, size, size)) < 0.3).to(dtype)
    cnt = torch.from_numpy(rng.random((n, size, size)) < 0.1).to(dtype)
    return {"images": images, "seg": seg, "contour": cnt, "rho_g": seg.mean(dim=(1, 2))}


def two_pass_gradient_errors(variant: str = "darc-all", seed: int = 0, h: float = 1e-6,
                             n_directions: int = 3, n_coords: int = 6) -> list[float]:
    """Relative errors between autograd and central differences of the full training loss.

    Checks directional derivatives over all parameters, directional derivatives
    over the input image and a handful of single parameter coordinates.
    """
    torch.manual_seed(seed)
    model = build_model(ModelConfig(variant=variant, width=4, depth=2, colorizer_width=4,
                                    rph_hidden=8)).double().train()
    randomize_zero_layers(model, seed=seed)
    batch = tiny_batch(seed=seed)
    params = [p for p in model.parameters() if p.requires_grad]
    buffers = {k: v.clone() for k, v in model.named_buffers()}

    def restore():
        with torch.no_grad():
            for k, v in model.named_buffers():
                v.copy_(buffers[k])

    def loss(images=None):
        restore()  # the training pass mutates running buffers
        imgs = batch["images"] if images is None else images
        return compute_losses(model, imgs, batch["seg"], batch["contour"], batch["rho_g"])["total"]

    images = batch["images"].clone().requires_grad_(True)
    model.zero_grad()
    loss(images).backward()
    grads = [p.grad.detach().clone() for p in params]
    img_grad = images.grad.detach().clone()

    rng = torch.Generator().manual_seed(seed + 1)
    errors = []

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    with torch.no_grad():
        for _ in range(n_directions):
            dirs = [torch.randn(p.shape, generator=rng, dtype=p.dtype) for p in params]
            norm = torch.sqrt(sum((d * d).sum() for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            for p, d in zip(params, dirs):
                p.add_(h * d)
            fp = float(loss())
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
            fm = float(loss())
            for p, d in zip(params, dirs):
                p.add_(h * d)
            errors.append(rel(analytic, (fp - fm) / (2 * h)))

            d = torch.randn(images.shape, generator=rng, dtype=images.dtype)
            d /= d.norm()
            base = batch["images"]
            fp = float(loss(base + h * d))
            fm = float(loss(base - h * d))
            errors.append(rel(float((img_grad * d).sum()), (fp - fm) / (2 * h)))

        # single coordinates, picked among the larger gradient entries
        flat = [(i, j) for i, g in enumerate(grads) for j in torch.topk(
            g.abs().reshape(-1), min(2, g.numel())).indices.tolist()]
        picks = torch.randperm(len(flat), generator=rng)[:n_coords].tolist()
        for k in picks:
            i, j = flat[k]
            p = params[i].view(-1)
            old = float(p[j])
            p[j] = old + h
            fp = float(loss())
            p[j] = old - h
            fm = float(loss())
            p[j] = old
            errors.append(rel(float(grads[i].view(-1)[j]), (fp - fm) / (2 * h)))
    restore()
    return errors
