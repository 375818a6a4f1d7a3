"""Strong data augmentation: mix two slices under one binary mask.

A mask selects, per position, which donor slice supplies the value. The same
mask must be applied to the data, the pseudo-labels and the confidence
regions of a pair so the three stay pixel-aligned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .confidence import ConfidenceRegions
from .errors import ConfigError, InputError
from .volume import IGNORE_LABEL

log = logging.getLogger(__name__)

MIX_KINDS = ("cutmix", "classmix")


@dataclass(frozen=True)
class SdaConfig:
    kind: str = "cutmix"
    area_fraction: float = 0.25
    enabled_labeled: bool = False
    enabled_unlabeled: bool = True

    def __post_init__(self):
        if self.kind not in MIX_KINDS:
            raise ConfigError(f"sda kind must be one of {MIX_KINDS}, got {self.kind!r}")
        if not 0.0 < self.area_fraction < 1.0:
            raise ConfigError(
                f"area_fraction must be in (0,1), got {self.area_fraction}"
            )


@dataclass
class MixMask:
    """Boolean donor selector: True keeps slice A, False takes slice B."""

    mask: np.ndarray
    kind: str
    partner_index: int = -1

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise InputError(f"mix mask must be 2D, got {self.mask.ndim}D")

    def inverted(self) -> "MixMask":
        return replace(self, mask=~self.mask)


def cutmix_mask(height: int, width: int, area_fraction: float, seed: int) -> MixMask:
    """Ones except one uniformly placed rectangle covering ~area_fraction."""
    if not 0.0 < area_fraction < 1.0:
        raise ConfigError(f"area_fraction must be in (0,1), got {area_fraction}")
    rng = np.random.default_rng(seed)
    side = math.sqrt(area_fraction)
    rect_h = min(int(round(height * side)), height)
    rect_w = min(int(round(width * side)), width)
    mask = np.ones((height, width), dtype=bool)
    if rect_h > 0 and rect_w > 0:
        top = int(rng.integers(0, height - rect_h + 1))
        left = int(rng.integers(0, width - rect_w + 1))
        mask[top : top + rect_h, left : left + rect_w] = False
    return MixMask(mask, "cutmix")


def classmix_mask(pseudo_label_b: np.ndarray, seed: int) -> MixMask:
    """Zero the mask on half (rounded up) of the donor's label classes."""
    pseudo_label_b = np.asarray(pseudo_label_b)
    if pseudo_label_b.ndim != 2:
        raise InputError(f"pseudo label map must be 2D, got {pseudo_label_b.ndim}D")
    present = np.unique(pseudo_label_b)
    present = present[present != IGNORE_LABEL]
    if present.size == 0:
        raise InputError("pseudo label map has no classes")
    rng = np.random.default_rng(seed)
    n_pick = (present.size + 1) // 2
    picked = rng.choice(present, size=n_pick, replace=False)
    mask = ~np.isin(pseudo_label_b, picked)
    if not mask.any():
        log.debug("classmix selected every pixel; augmented slice equals donor")
    return MixMask(mask, "classmix")


def apply_sda(mask: MixMask, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Positionwise mix: mask-true positions from ``a``, the rest from ``b``.

    Accepts amplitude slices, class-id maps and (classes, H, W) region masks;
    extra leading axes broadcast over the 2D mask.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.dtype.kind != b.dtype.kind:
        raise InputError(
            f"mix operands disagree: {a.shape}/{a.dtype} vs {b.shape}/{b.dtype}"
        )
    if a.shape[-2:] != mask.mask.shape:
        raise InputError(
            f"mask {mask.mask.shape} does not fit slices {a.shape[-2:]}"
        )
    m = mask.mask.reshape((1,) * (a.ndim - 2) + mask.mask.shape)
    return np.where(m, a, b)


def pair_partners(batch_size: int, seed: int) -> np.ndarray:
    """Seeded cyclic pairing; no element mixes with itself for batches >= 2."""
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(batch_size)
    partner = np.empty(batch_size, dtype=np.int64)
    partner[order] = order[(np.arange(batch_size) + 1) % batch_size]
    return partner


def sda_batch(
    data: np.ndarray,
    pseudo_labels: np.ndarray,
    regions: ConfidenceRegions | None,
    cfg: SdaConfig,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, ConfidenceRegions | None, list[MixMask]]:
    """Mix every batch element with a seeded partner under one mask each.

    ``data`` and ``pseudo_labels`` are (B, H, W); ``regions``, when given,
    holds (classes, B, H, W) masks mined from the same slices. All three are
    mixed with identical masks so per-position donorship stays consistent.
    """
    data = np.asarray(data)
    pseudo_labels = np.asarray(pseudo_labels)
    if data.shape != pseudo_labels.shape:
        raise InputError(
            f"data {data.shape} and pseudo labels {pseudo_labels.shape} differ"
        )
    n, height, width = data.shape
    rng = np.random.default_rng(seed)
    partners = pair_partners(n, int(rng.integers(np.iinfo(np.int64).max)))
    mask_seeds = rng.integers(np.iinfo(np.int64).max, size=n)

    masks: list[MixMask] = []
    for i in range(n):
        j = int(partners[i])
        if cfg.kind == "cutmix":
            m = cutmix_mask(height, width, cfg.area_fraction, int(mask_seeds[i]))
        else:
            m = classmix_mask(pseudo_labels[j], int(mask_seeds[i]))
        masks.append(replace(m, partner_index=j))

    out_data = np.empty_like(data)
    out_pl = np.empty_like(pseudo_labels)
    for i, m in enumerate(masks):
        j = m.partner_index
        out_data[i] = apply_sda(m, data[i], data[j])
        out_pl[i] = apply_sda(m, pseudo_labels[i], pseudo_labels[j])
    out_regions = None
    if regions is not None:
        out_weak = np.empty_like(regions.weak)
        out_strong = np.empty_like(regions.strong)
        for i, m in enumerate(masks):
            j = m.partner_index
            out_weak[:, i] = apply_sda(m, regions.weak[:, i], regions.weak[:, j])
            out_strong[:, i] = apply_sda(m, regions.strong[:, i], regions.strong[:, j])
        out_regions = ConfidenceRegions(out_weak, out_strong)
    return out_data, out_pl, out_regions, masks
