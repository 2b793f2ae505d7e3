"""Deterministic semantic-prior provider.

Stands in for a heavyweight promptable segmenter: Otsu thresholding plus
4-connected components yields region masks, masked copies of the source
act as semantic patches, and two small frozen seeded networks provide a
semantic feature encoder and a per-pixel class predictor. Everything is
a pure function of its inputs and a seed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .imageio import quantize
from .instrumentation import bump

log = logging.getLogger(__name__)

# Default seeds for the frozen stand-in networks. Fixed constants so the
# provider behaves like a pretrained component, independent of run seeds.
ENCODER_SEED = 101
SEGMENT_SEED = 202


@dataclass
class MaskSet:
    """Binary region masks for one source image, largest area first."""

    masks: list[np.ndarray]
    source_modality: str
    areas: list[int]
    degenerate: bool = False

    def __post_init__(self):
        for m in self.masks:
            if m.dtype != bool:
                raise ContractError("masks must be boolean arrays")
        if self.areas != sorted(self.areas, reverse=True):
            raise ContractError("masks must be ordered by descending area")

    def union(self) -> np.ndarray:
        out = np.zeros(self.masks[0].shape, dtype=bool)
        for m in self.masks:
            out |= m
        return out


@dataclass
class PatchSet:
    """Masked copies of the source image, aligned with a MaskSet."""

    patches: list[np.ndarray]
    source_modality: str


def otsu_threshold(img: np.ndarray) -> int | None:
    """Otsu's threshold over the 256-bin histogram of an image in [0, 1].

    Returns the 8-bit level t maximizing between-class variance; pixels
    with quantized value > t are foreground. None when the image has no
    contrast (single occupied bin).
    """
    levels = quantize(img)
    hist = np.bincount(levels.reshape(-1), minlength=256).astype(np.float64)
    total = hist.sum()
    if np.count_nonzero(hist) < 2:
        return None
    omega = np.cumsum(hist) / total                 # class-0 mass for t = 0..255
    mu = np.cumsum(hist * np.arange(256)) / total   # first moment
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_total * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    return int(np.argmax(sigma_b))


def _components(binary: np.ndarray) -> list[tuple[int, int, np.ndarray]]:
    """4-connected components of a boolean map as (area, first_pixel, mask)."""
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    labels, n = ndimage.label(binary, structure=structure)
    out = []
    flat = labels.reshape(-1)
    for lbl in range(1, n + 1):
        mask = labels == lbl
        area = int(mask.sum())
        first = int(np.argmax(flat == lbl))
        out.append((area, first, mask))
    return out


def generate_masks(img: np.ndarray, top_k: int, min_area: int,
                   modality: str) -> MaskSet:
    """Region masks from Otsu + 4-connected components, both polarities.

    Components of the foreground and the background are pooled, filtered
    by `min_area`, and the `top_k` largest kept (ties broken by first
    pixel in row-major order). When nothing survives, a single whole-image
    mask is returned with `degenerate=True`.
    """
    bump("provider")
    if img.ndim != 2:
        raise ContractError(f"generate_masks needs a grayscale (H, W) image, got {img.shape}")
    if top_k < 1 or min_area < 1:
        raise ContractError(f"top_k and min_area must be positive, got {top_k}, {min_area}")
    t = otsu_threshold(img)
    if t is None:
        return MaskSet([np.ones(img.shape, dtype=bool)], modality,
                       [int(img.size)], degenerate=True)
    fg = quantize(img) > t
    comps = _components(fg) + _components(~fg)
    comps = [c for c in comps if c[0] >= min_area]
    if not comps:
        return MaskSet([np.ones(img.shape, dtype=bool)], modality,
                       [int(img.size)], degenerate=True)
    comps.sort(key=lambda c: (-c[0], c[1]))
    comps = comps[:top_k]
    return MaskSet([c[2] for c in comps], modality, [c[0] for c in comps])


def random_rect_masks(img: np.ndarray, top_k: int, rng: np.random.Generator,
                      modality: str) -> MaskSet:
    """Seeded random rectangles standing in for semantic regions.

    This is the ablation that removes the segmentation prior: patches
    become arbitrary crops with no relation to image content.
    """
    bump("provider")
    h, w = img.shape
    rects = []
    for _ in range(top_k):
        rh = int(rng.integers(max(1, h // 4), max(2, 3 * h // 4) + 1))
        rw = int(rng.integers(max(1, w // 4), max(2, 3 * w // 4) + 1))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        m = np.zeros((h, w), dtype=bool)
        m[r0:r0 + rh, c0:c0 + rw] = True
        rects.append((int(m.sum()), r0 * w + c0, m))
    rects.sort(key=lambda c: (-c[0], c[1]))
    return MaskSet([r[2] for r in rects], modality, [r[0] for r in rects])


def make_patches(img: np.ndarray, masks: MaskSet) -> PatchSet:
    """Elementwise mask application: patch_i = img * mask_i."""
    bump("provider")
    if any(m.shape != img.shape for m in masks.masks):
        raise ContractError("mask shape does not match image")
    return PatchSet([img * m for m in masks.masks], masks.source_modality)


def _kaiming_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (c_in * k * k))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k))


class FrozenEncoder:
    """Three strided conv layers with fixed seeded weights.

    Spatial sides halve per layer (16 -> 8 -> 4 -> 2); channels grow
    1 -> 8 -> 16 -> 32. Weights never receive gradients, but the forward
    pass is differentiable with respect to its input.
    """

    CHANNELS = (8, 16, 32)

    def __init__(self, seed: int = ENCODER_SEED):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 1
        for c_out in self.CHANNELS:
            self.weights.append(Tensor(_kaiming_conv(rng, c_out, c_in, 3),
                                       name=f"frozen_enc.conv{len(self.weights)}"))
            c_in = c_out

    def forward(self, x: Tensor) -> list[Tensor]:
        """All three per-layer feature maps of a (1, H, W) tensor."""
        feats = []
        cur = x
        for w in self.weights:
            cur = ad.leaky_relu(ad.conv2d(cur, w, padding=1, stride=2))
            feats.append(cur)
        return feats

    def encode_image(self, img: np.ndarray) -> list[np.ndarray]:
        bump("provider")
        return [f.data for f in self.forward(Tensor(img[None]))]


class SegmentationStub:
    """Frozen seeded conv head emitting a per-pixel class distribution."""

    def __init__(self, n_classes: int = 4, seed: int = SEGMENT_SEED):
        if n_classes < 2:
            raise ContractError(f"need at least 2 classes, got {n_classes}")
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.w1 = Tensor(_kaiming_conv(rng, 8, 1, 3), name="segstub.conv0")
        self.w2 = Tensor(_kaiming_conv(rng, n_classes, 8, 3), name="segstub.conv1")

    def forward(self, x: Tensor) -> Tensor:
        """(1, H, W) -> (C, H, W) probabilities summing to 1 over classes."""
        h = ad.leaky_relu(ad.conv2d(x, self.w1, padding=1))
        logits = ad.conv2d(h, self.w2, padding=1)
        c, hh, ww = logits.shape
        cols = ad.transpose2d(ad.reshape(logits, (c, hh * ww)))   # pixels as rows
        probs = ad.transpose2d(ad.softmax_rows(cols))
        return ad.reshape(probs, (c, hh, ww))

    def predict_image(self, img: np.ndarray) -> np.ndarray:
        bump("provider")
        return self.forward(Tensor(img[None])).data


def synth_labels(masks_vis: MaskSet, masks_ir: MaskSet, n_classes: int) -> np.ndarray:
    """Integer label map from mask rank: background 0, mask i gets class
    (i mod (n_classes - 1)) + 1 by combined descending-area rank; overlaps
    resolve to the smaller mask."""
    ranked = []
    for src_idx, ms in enumerate((masks_vis, masks_ir)):
        for j, (mask, area) in enumerate(zip(ms.masks, ms.areas)):
            ranked.append((area, src_idx, j, mask))
    ranked.sort(key=lambda r: (-r[0], r[1], r[2]))
    labels = np.zeros(masks_vis.masks[0].shape, dtype=np.int64)
    for rank, (_, _, _, mask) in enumerate(ranked):
        labels[mask] = (rank % (n_classes - 1)) + 1   # later = smaller wins overlaps
    return labels


def load_injected_masks(directory, stem: str, modality: str,
                        shape: tuple[int, int]) -> MaskSet | None:
    """External mask override: `<stem>.<modality>.mask<N>.pgm`, 0/255 valued.

    Files are read in ascending N; missing N0 means no injection. Masks
    are reordered by descending area like the generated ones.
    """
    from .imageio import load_image
    found = []
    n = 0
    while True:
        path = directory / f"{stem}.{modality}.mask{n}.pgm"
        if not path.exists():
            break
        img = load_image(path)
        vals = quantize(img.data)
        if not np.all(np.isin(vals, (0, 255))):
            raise ContractError(f"injected mask {path} is not binary 0/255")
        if img.data.shape != shape:
            raise ContractError(f"injected mask {path} shape {img.data.shape} != image {shape}")
        m = vals == 255
        found.append((int(m.sum()), n, m))
        n += 1
    if not found:
        return None
    found.sort(key=lambda c: (-c[0], c[1]))
    return MaskSet([f[2] for f in found], modality, [f[0] for f in found])


@dataclass
class PriorProvider:
    """Bundles mask generation policy with the frozen networks."""

    top_k: int = 4
    min_area: int = 8
    random_patches: bool = False
    encoder: FrozenEncoder = field(default_factory=FrozenEncoder)
    stub: SegmentationStub = field(default_factory=SegmentationStub)
    inject_dir: object = None

    def masks_for(self, img: np.ndarray, modality: str, stem: str = "",
                  rng: np.random.Generator | None = None) -> MaskSet:
        if self.inject_dir is not None and stem:
            injected = load_injected_masks(self.inject_dir, stem, modality, img.shape)
            if injected is not None:
                bump("provider")
                return injected
        if self.random_patches:
            if rng is None:
                raise ContractError("random_patches mode needs an rng")
            return random_rect_masks(img, self.top_k, rng, modality)
        return generate_masks(img, self.top_k, self.min_area, modality)
