"""High-confidence region mining and contrastive sample selection.

Probability maps come in channels-last (..., classes) layout; region masks
come out channels-first (classes, ...). The spatial part may be a single
(H, W) slice or a batch (B, H, W) treated as one big position set, so the
same functions serve per-slice mining and combined-batch sampling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

_PROB_SUM_TOL = 1e-5


@dataclass(frozen=True)
class ConfidenceThresholds:
    """Weak/strong probability cutoffs, 0 < t_w < t_s < 1."""

    t_w: float
    t_s: float

    def __post_init__(self):
        if not (0.0 < self.t_w < self.t_s < 1.0):
            raise ConfigError(
                f"thresholds must satisfy 0 < t_w < t_s < 1, got "
                f"t_w={self.t_w}, t_s={self.t_s}"
            )


@dataclass
class ConfidenceRegions:
    """Per-class boolean position masks, shape (classes, *spatial)."""

    weak: np.ndarray
    strong: np.ndarray

    def __post_init__(self):
        self.weak = np.asarray(self.weak, dtype=bool)
        self.strong = np.asarray(self.strong, dtype=bool)
        if self.weak.shape != self.strong.shape:
            raise InputError(
                f"weak {self.weak.shape} and strong {self.strong.shape} differ"
            )
        if (self.weak & self.strong).any():
            raise InputError("weak and strong regions overlap")
        if ((self.weak | self.strong).sum(axis=0) > 1).any():
            raise InputError("more than one class active at a position")

    @property
    def classes(self) -> int:
        return self.weak.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.weak.shape[1:]


@dataclass
class ClassSamples:
    """Contrastive ingredients for one class; arrays may be torch or numpy."""

    queries: object | None = None          # (q, D)
    query_positions: np.ndarray | None = None
    positive: object | None = None         # (D,) mean of strong pool, or None
    strong_pool: object | None = None      # (m, D)
    negatives: object | None = None        # (n, D)
    negative_positions: np.ndarray | None = None

    @property
    def n_queries(self) -> int:
        return 0 if self.queries is None else len(self.queries)

    @property
    def n_negatives(self) -> int:
        return 0 if self.negatives is None else len(self.negatives)

    def contributes(self) -> bool:
        return self.n_queries > 0 and self.positive is not None and self.n_negatives > 0


@dataclass
class ContrastiveSampleSet:
    per_class: list[ClassSamples] = field(default_factory=list)

    @property
    def classes(self) -> int:
        return len(self.per_class)

    def contributing_pairs(self) -> int:
        """Number of (class, query) pairs entering the contrastive loss."""
        return sum(cs.n_queries for cs in self.per_class if cs.contributes())


def _check_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim < 2:
        raise InputError(f"probability map needs >= 2 dims, got {probs.ndim}")
    if not np.isfinite(probs).all() or (probs < 0).any():
        raise InputError("probability map has negative or non-finite entries")
    sums = probs.sum(axis=-1)
    if np.abs(sums - 1.0).max() > _PROB_SUM_TOL:
        raise InputError(
            f"probability rows must sum to 1 within {_PROB_SUM_TOL}, worst "
            f"deviation {np.abs(sums - 1.0).max():.2e}"
        )
    return probs


def regions_unlabeled(probs: np.ndarray, th: ConfidenceThresholds) -> ConfidenceRegions:
    """Mine weak/strong regions from a softmax map of unlabeled data.

    weak: t_s > P(c) > t_w and c is the argmax; strong: P(c) > t_s and c is
    the argmax. Strict inequalities; argmax ties break to the lowest class.
    """
    probs = _check_probs(probs)
    n_classes = probs.shape[-1]
    arg = np.argmax(probs, axis=-1)
    cls = np.arange(n_classes).reshape((n_classes,) + (1,) * arg.ndim)
    is_arg = arg[None] == cls
    p = np.moveaxis(probs, -1, 0)
    weak = is_arg & (p > th.t_w) & (p < th.t_s)
    strong = is_arg & (p > th.t_s)
    return ConfidenceRegions(weak, strong)


def regions_labeled(
    probs: np.ndarray, gt: np.ndarray, th: ConfidenceThresholds
) -> ConfidenceRegions:
    """Mine weak/strong regions where the prediction agrees with ground truth.

    weak: gt(p)=c, c is the argmax and P(c) < t_s (no lower bound); strong:
    gt(p)=c, c is the argmax and P(c) > t_s. IGNORE positions stay inactive.
    """
    probs = _check_probs(probs)
    gt = np.asarray(gt)
    if gt.shape != probs.shape[:-1]:
        raise InputError(
            f"gt shape {gt.shape} does not match probs spatial shape "
            f"{probs.shape[:-1]}"
        )
    n_classes = probs.shape[-1]
    if ((gt != -1) & ((gt < 0) | (gt >= n_classes))).any():
        raise InputError(f"gt contains class ids outside [0, {n_classes})")
    arg = np.argmax(probs, axis=-1)
    cls = np.arange(n_classes).reshape((n_classes,) + (1,) * arg.ndim)
    is_arg = arg[None] == cls
    is_gt = gt[None] == cls
    p = np.moveaxis(probs, -1, 0)
    weak = is_gt & is_arg & (p < th.t_s)
    strong = is_gt & is_arg & (p > th.t_s)
    return ConfidenceRegions(weak, strong)


def merge_regions(r_a: ConfidenceRegions, r_b: ConfidenceRegions) -> ConfidenceRegions:
    """Per-class set union of two region sets over the same position grid."""
    if r_a.weak.shape != r_b.weak.shape:
        raise InputError(
            f"region grids differ: {r_a.weak.shape} vs {r_b.weak.shape}"
        )
    return ConfidenceRegions(r_a.weak | r_b.weak, r_a.strong | r_b.strong)


def _gather(rep_map, positions: np.ndarray):
    """Pick (n, D) vectors out of (*spatial, D) by integer position rows."""
    idx = tuple(positions[:, i] for i in range(positions.shape[1]))
    return rep_map[idx]


def _detach(x):
    return x.detach() if hasattr(x, "detach") else x


def draw_samples(
    regions: ConfidenceRegions,
    rep_map,
    q_queries: int,
    n_negatives: int,
    seed: int,
    grad_through_keys: bool = False,
) -> ContrastiveSampleSet:
    """Draw per-class queries, positive centroid and negatives.

    Queries: up to ``q_queries`` weak-region vectors, sampled without
    replacement (all of them if the pool is smaller). Positive: mean of all
    strong-region vectors; absent when the pool is empty. Negatives: exactly
    ``n_negatives`` vectors from other classes' strong regions, with
    replacement only when that pool is too small. The positive and negatives
    are detached from the gradient graph unless ``grad_through_keys``.

    ``rep_map`` has shape (*spatial, D) and may be a numpy array or a torch
    tensor; the spatial part must match ``regions``.
    """
    if q_queries < 1 or n_negatives < 1:
        raise ConfigError("q_queries and n_negatives must be >= 1")
    if tuple(rep_map.shape[:-1]) != regions.spatial_shape:
        raise InputError(
            f"rep map spatial shape {tuple(rep_map.shape[:-1])} does not "
            f"match regions {regions.spatial_shape}"
        )
    rng = np.random.default_rng(seed)
    n_classes = regions.classes
    strong_positions = [np.argwhere(regions.strong[c]) for c in range(n_classes)]

    out = ContrastiveSampleSet()
    for c in range(n_classes):
        cs = ClassSamples()
        weak_pos = np.argwhere(regions.weak[c])
        if len(weak_pos) > 0:
            take = min(q_queries, len(weak_pos))
            pick = rng.choice(len(weak_pos), size=take, replace=False)
            cs.query_positions = weak_pos[np.sort(pick)]
            cs.queries = _gather(rep_map, cs.query_positions)
        if len(strong_positions[c]) > 0:
            pool = _gather(rep_map, strong_positions[c])
            if not grad_through_keys:
                pool = _detach(pool)
            cs.strong_pool = pool
            cs.positive = pool.mean(0)
        neg_pools = [strong_positions[i] for i in range(n_classes) if i != c]
        neg_pos = (
            np.concatenate(neg_pools, axis=0)
            if any(len(p) for p in neg_pools)
            else np.empty((0, len(regions.spatial_shape)), dtype=np.int64)
        )
        if len(neg_pos) > 0:
            replace = len(neg_pos) < n_negatives
            pick = rng.choice(len(neg_pos), size=n_negatives, replace=replace)
            cs.negative_positions = neg_pos[pick]
            negs = _gather(rep_map, cs.negative_positions)
            cs.negatives = negs if grad_through_keys else _detach(negs)
        out.per_class.append(cs)
    return out


def dump_region_masks(regions: ConfidenceRegions, directory, prefix: str = "regions"):
    """Write per-class weak/strong masks as PNG images for inspection."""
    from pathlib import Path

    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weak = regions.weak
    strong = regions.strong
    if weak.ndim == 3:  # single slice: add batch axis
        weak = weak[:, None]
        strong = strong[:, None]
    paths = []
    for c in range(regions.classes):
        for b in range(weak.shape[1]):
            img = np.zeros(weak.shape[2:], dtype=np.uint8)
            img[weak[c, b]] = 128
            img[strong[c, b]] = 255
            p = directory / f"{prefix}_class{c}_slice{b}.png"
            Image.fromarray(img, mode="L").save(p)
            paths.append(p)
    return paths
