"""Dataset I/O, contour ground truth and a synthetic multi-domain nucleus generator.

On-disk layout::

    <root>/<domain>/images/<id>.png   8-bit RGB
    <root>/<domain>/labels/<id>.png   16-bit instance ids, 0 = background
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.segmentation import relabel_sequential


class DatasetError(ValueError):
    pass


class SynthError(RuntimeError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    labels: np.ndarray  # H x W int32
    domain: str = ""
    image_id: str = ""

    def __post_init__(self) -> None:
        if self.image.shape[:2] != self.labels.shape:
            raise DatasetError(
                f"{self.domain}/{self.image_id}: image {self.image.shape[:2]} "
                f"and labels {self.labels.shape} are not aligned")


def relabel(labels: np.ndarray) -> np.ndarray:
    """Map instance ids to the contiguous range ``1..K`` preserving id order."""
    out, _, _ = relabel_sequential(np.asarray(labels).astype(np.int64))
    return out.astype(np.int32)


def ground_truth_ratio(labels: np.ndarray) -> float:
    """Fraction of foreground pixels."""
    labels = np.asarray(labels)
    return float(np.count_nonzero(labels)) / labels.size


def labels_to_contour(labels: np.ndarray, thickness: int = 2) -> np.ndarray:
    """Instance pixels within ``thickness`` (chessboard distance) of a different label.

    Boundaries between touching instances are marked on both sides; the image
    edge does not count as a boundary.
    """
    labels = np.asarray(labels)
    if thickness < 1 or not labels.any():
        return np.zeros(labels.shape, dtype=bool)
    size = 2 * thickness + 1
    hi = ndimage.maximum_filter(labels, size=size, mode="nearest")
    lo = ndimage.minimum_filter(labels, size=size, mode="nearest")
    return (labels > 0) & ((hi != labels) | (lo != labels))


# -- PNG I/O ---------------------------------------------------------------

def read_image(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path: Path | str, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    arr8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr8).save(path)


def read_labels(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise DatasetError(f"{path}: label image must be single-channel")
    return arr.astype(np.int32)


def write_labels(path: Path | str, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise DatasetError(f"{path}: label ids must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def _is_domain_dir(path: Path) -> bool:
    return (path / "images").is_dir() and (path / "labels").is_dir()


def _load_domain(path: Path) -> list[Sample]:
    images = {p.stem: p for p in sorted((path / "images").glob("*.png"))}
    labels = {p.stem: p for p in sorted((path / "labels").glob("*.png"))}
    for stem in sorted(set(images) ^ set(labels)):
        side = "label" if stem in images else "image"
        raise DatasetError(f"{path.name}/{stem}: missing {side} file")
    samples = []
    for stem in sorted(images):
        img = read_image(images[stem])
        lab = read_labels(labels[stem])
        if img.shape[:2] != lab.shape:
            raise DatasetError(
                f"{labels[stem]}: shape {lab.shape} does not match image {img.shape[:2]}")
        samples.append(Sample(img, relabel(lab), path.name, stem))
    return samples


def load_dataset(root: Path | str) -> list[Sample]:
    """Load one domain directory, or every domain directory under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    if _is_domain_dir(root):
        return _load_domain(root)
    samples: list[Sample] = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if _is_domain_dir(sub):
            samples.extend(_load_domain(sub))
    return samples


def save_dataset(root: Path | str, samples: list[Sample]) -> None:
    root = Path(root)
    for s in samples:
        domain_dir = root / (s.domain or "default")
        (domain_dir / "images").mkdir(parents=True, exist_ok=True)
        (domain_dir / "labels").mkdir(parents=True, exist_ok=True)
        write_image(domain_dir / "images" / f"{s.image_id}.png", s.image)
        write_labels(domain_dir / "labels" / f"{s.image_id}.png", s.labels)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round an image to the 8-bit grid so it survives a PNG round trip bit-exactly."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


# -- synthetic generator ---------------------------------------------------

@dataclass
class DomainStyle:
    name: str
    background: tuple[float, float, float]
    nucleus: tuple[float, float, float]
    density: float = 1.0


def default_domains() -> list[DomainStyle]:
    return [
        # H&E-like: pink background, purple nuclei
        DomainStyle("A", (0.92, 0.72, 0.82), (0.35, 0.18, 0.50), 1.0),
        # IHC-like: pale background, brown nuclei, sparser
        DomainStyle("B", (0.90, 0.88, 0.80), (0.45, 0.28, 0.15), 0.5),
        # dark-field-ish: bluish background, pale nuclei, denser
        DomainStyle("C", (0.30, 0.35, 0.55), (0.85, 0.85, 0.70), 1.6),
    ]


@dataclass
class SynthConfig:
    size: int = 128
    images_per_domain: int = 8
    count_range: tuple[int, int] = (15, 30)
    axis_range: tuple[float, float] = (4.0, 9.0)
    noise: float = 0.04
    texture: float = 0.08
    max_tries: int = 200
    seed: int = 0
    domains: list[DomainStyle] = field(default_factory=default_domains)

    def __post_init__(self) -> None:
        if len(self.domains) < 2:
            raise ValueError("need at least two domains")
        if len({d.name for d in self.domains}) != len(self.domains):
            raise ValueError("domain names must be unique")
        if self.count_range[0] > self.count_range[1] or self.count_range[0] < 0:
            raise ValueError(f"bad count_range {self.count_range}")
        if not 1.0 <= self.axis_range[0] <= self.axis_range[1]:
            raise ValueError(f"bad axis_range {self.axis_range}")


def _ellipse_mask(size: int, cy: float, cx: float, a: float, b: float,
                  theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    mask = u * u + v * v <= 1.0
    lab, n = ndimage.label(mask)
    if n > 1:
        sizes = ndimage.sum_labels(mask, lab, index=np.arange(1, n + 1))
        mask = lab == (1 + int(np.argmax(sizes)))
    return mask


def _place_instances(rng: np.random.Generator, cfg: SynthConfig, count: int,
                     where: str) -> np.ndarray:
    labels = np.zeros((cfg.size, cfg.size), dtype=np.int32)
    for k in range(1, count + 1):
        for _ in range(cfg.max_tries):
            a = rng.uniform(*cfg.axis_range)
            b = rng.uniform(max(cfg.axis_range[0], 0.6 * a), a)
            cy, cx = rng.uniform(0, cfg.size - 1, size=2)
            mask = _ellipse_mask(cfg.size, cy, cx, a, b, rng.uniform(0, np.pi))
            if mask.any() and not (labels[mask] > 0).any():
                labels[mask] = k
                break
        else:
            raise SynthError(
                f"{where}: could not place instance {k} of {count} after "
                f"{cfg.max_tries} tries; lower the density or count range")
    return labels


def _render(rng: np.random.Generator, cfg: SynthConfig, labels: np.ndarray,
            style: DomainStyle) -> np.ndarray:
    fg = labels > 0
    # soft nucleus presence with darker rims and internal texture
    presence = ndimage.gaussian_filter(fg.astype(np.float64), 0.7)
    texture = ndimage.gaussian_filter(rng.standard_normal(labels.shape), 1.0)
    presence = np.clip(presence * (1.0 + cfg.texture * texture / (texture.std() + 1e-12)), 0, 1)
    bg_texture = ndimage.gaussian_filter(rng.standard_normal(labels.shape), 4.0)
    bg_texture /= bg_texture.std() + 1e-12
    bg = np.asarray(style.background)[None, None, :] * (1.0 + 0.04 * bg_texture[..., None])
    nuc = np.asarray(style.nucleus)[None, None, :]
    image = bg * (1.0 - presence[..., None]) + nuc * presence[..., None]
    image = image + cfg.noise * rng.standard_normal(image.shape)
    return quantize(image)


def synth_generate(config: SynthConfig, stream: int = 0) -> list[Sample]:
    """Generate ``images_per_domain`` samples for every domain.

    Output is a pure function of ``(config, stream)``; use distinct streams
    for train and validation splits.
    """
    samples = []
    for d_index, style in enumerate(config.domains):
        rng = np.random.default_rng([config.seed, stream, d_index])
        for i in range(config.images_per_domain):
            base = rng.integers(config.count_range[0], config.count_range[1] + 1)
            count = int(round(base * style.density))
            labels = _place_instances(rng, config, count, f"domain {style.name} image {i}")
            image = _render(rng, config, labels, style)
            samples.append(Sample(image, labels, style.name, f"{style.name}_{i:04d}"))
    return samples
