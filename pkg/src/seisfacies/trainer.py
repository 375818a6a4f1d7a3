"""Training loop: paired labeled/unlabeled batches, region mining, losses.

One semi-supervised step runs the unlabeled batch through the model without
gradients to get pseudo-labels and confidence regions, mixes the batch under
strong augmentation, runs the augmented batch and the labeled batch with
gradients, mines labeled regions, draws contrastive samples from both
representation maps and applies one optimizer update on the summed loss.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evaluate
from .augment import SdaConfig, sda_batch
from .confidence import (
    ConfidenceRegions,
    ConfidenceThresholds,
    ContrastiveSampleSet,
    draw_samples,
    merge_regions,
    regions_labeled,
    regions_unlabeled,
)
from .errors import ConfigError, NumericError
from .losses import contrastive_loss, supervised_loss, total_loss
from .model import DualHeadNet, forward, load_checkpoint, save_checkpoint
from .volume import (
    LabelVolume,
    SeismicVolume,
    SliceSamplingPlan,
    SliceSet,
    SparsityConfig,
    TrainingSplit,
    sample_training_slices,
    sparsify_labels,
)

log = logging.getLogger(__name__)

MODES = ("Sup", "ConSemiSup", "SparseConSemiSup")

_MAX_SEED = np.iinfo(np.int64).max


@dataclass
class TrainConfig:
    mode: str = "ConSemiSup"
    epochs: int = 20
    batch_size: int = 2
    base_lr: float = 1e-3
    lr_decay_factor: float = 0.2
    lr_decay_every: int = 4
    q_queries: int = 128
    n_negatives: int = 128
    t_w: float = 0.7
    t_s: float = 0.9
    epsilon: float = 0.1
    tau: float = 0.5
    sda: SdaConfig = field(default_factory=SdaConfig)
    keep_fraction: float = 1.0
    seed: int = 0
    steps_per_epoch: int | None = None
    grad_clip_norm: float = 5.0
    grad_through_keys: bool = False
    normalized_smoothing: bool = False
    flip_labeled: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError(
                f"lr_decay_factor must be in (0,1], got {self.lr_decay_factor}"
            )
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1")
        if self.q_queries < 1 or self.n_negatives < 1:
            raise ConfigError("q_queries and n_negatives must be >= 1")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1 when set")
        self.thresholds()  # validates 0 < t_w < t_s < 1

    def thresholds(self) -> ConfidenceThresholds:
        return ConfidenceThresholds(self.t_w, self.t_s)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        """Survey-style defaults: 'seam' (tau 0.5, t 0.7/0.9, cutmix, lr 1e-3)
        or 'f3' (tau 1.0, t 0.7/0.95, classmix, lr 1e-4)."""
        if name == "seam":
            base = dict(tau=0.5, t_w=0.7, t_s=0.9, base_lr=1e-3,
                        sda=SdaConfig(kind="cutmix"))
        elif name == "f3":
            base = dict(tau=1.0, t_w=0.7, t_s=0.95, base_lr=1e-4,
                        sda=SdaConfig(kind="classmix"))
        else:
            raise ConfigError(f"unknown preset {name!r}")
        base.update(overrides)
        return cls(**base)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Stepwise decay: base_lr scaled down every lr_decay_every epochs."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class StepDebug:
    """Everything an independent recomputation of one step needs."""

    labeled_data: np.ndarray | None = None
    labeled_gt: np.ndarray | None = None
    labeled_logits: np.ndarray | None = None
    labeled_probs: np.ndarray | None = None
    labeled_regions: ConfidenceRegions | None = None
    labeled_rep: np.ndarray | None = None
    unlabeled_data: np.ndarray | None = None
    unlabeled_probs: np.ndarray | None = None
    pseudo_labels: np.ndarray | None = None
    unlabeled_regions: ConfidenceRegions | None = None
    masks: list | None = None
    aug_data: np.ndarray | None = None
    aug_pseudo_labels: np.ndarray | None = None
    aug_regions: ConfidenceRegions | None = None
    unlabeled_rep: np.ndarray | None = None
    merged_regions: ConfidenceRegions | None = None
    samples: ContrastiveSampleSet | None = None


@dataclass
class StepResult:
    sup: float
    con: float
    total: float
    n_pairs: int
    contrastive_skipped: bool
    debug: StepDebug | None = None


def _augment_labeled(
    data: np.ndarray, gt: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    if cfg.flip_labeled:
        # mirror the lateral (crossline) axis; depth must keep its direction
        flips = rng.integers(0, 2, size=len(data)).astype(bool)
        data = np.where(flips[:, None, None], data[:, ::-1, :], data)
        gt = np.where(flips[:, None, None], gt[:, ::-1, :], gt)
    if cfg.sda.enabled_labeled:
        data, gt, _, _ = sda_batch(
            data, gt, None, cfg.sda, int(rng.integers(_MAX_SEED))
        )
    return data, gt


def _pad_regions(
    regions: ConfidenceRegions, before: int, after: int
) -> ConfidenceRegions:
    """Embed a batch's regions into a larger combined batch grid."""
    c = regions.classes
    b, h, w = regions.weak.shape[1:]
    weak = np.zeros((c, before + b + after, h, w), dtype=bool)
    strong = np.zeros_like(weak)
    weak[:, before : before + b] = regions.weak
    strong[:, before : before + b] = regions.strong
    return ConfidenceRegions(weak, strong)


def contrastive_step(
    model: DualHeadNet,
    optimizer: torch.optim.Optimizer,
    labeled_data: np.ndarray,
    labeled_gt: np.ndarray,
    unlabeled_data: np.ndarray | None,
    cfg: TrainConfig,
    step_seed: int,
    collect_debug: bool = False,
) -> StepResult:
    """One optimizer update on supervised + contrastive loss.

    In mode ``Sup`` the unlabeled passes, region mining and contrastive term
    are skipped and the update runs on the supervised loss alone.
    """
    semi = cfg.mode != "Sup"
    if semi and (unlabeled_data is None or len(unlabeled_data) == 0):
        raise ConfigError(f"mode {cfg.mode} needs a non-empty unlabeled batch")
    if len(labeled_data) == 0:
        raise ConfigError("labeled batch is empty")

    rng = np.random.default_rng(step_seed)
    aug_seed = int(rng.integers(_MAX_SEED))
    draw_seed = int(rng.integers(_MAX_SEED))
    th = cfg.thresholds()
    dbg = StepDebug() if collect_debug else None

    labeled_data, labeled_gt = _augment_labeled(labeled_data, labeled_gt, cfg, rng)

    con = torch.zeros(())
    n_pairs = 0
    skipped = False
    if semi:
        # (1) gradient-free pass: pseudo-labels and unlabeled regions
        out_u1 = forward(model, unlabeled_data, grad=False)
        probs_u = out_u1.seg_probs_hwc()
        pseudo = np.argmax(probs_u, axis=-1).astype(np.int64)
        regions_u = regions_unlabeled(probs_u, th)

        # (2) strong augmentation, identically on data / pseudo-labels / regions
        if cfg.sda.enabled_unlabeled:
            aug_data, aug_pseudo, aug_regions, masks = sda_batch(
                unlabeled_data, pseudo, regions_u, cfg.sda, aug_seed
            )
        else:
            aug_data, aug_pseudo, aug_regions, masks = (
                unlabeled_data, pseudo, regions_u, [],
            )

        # (3) gradient pass on the augmented unlabeled batch
        out_u2 = forward(model, aug_data, grad=True)
        rep_u = out_u2.rep_hwd()

    # (4) gradient pass on the labeled batch, (5) supervised loss
    out_l = forward(model, labeled_data, grad=True)
    sup = supervised_loss(
        out_l.seg_logits, labeled_gt, cfg.epsilon, cfg.normalized_smoothing
    )

    if semi:
        # (6) labeled regions from prediction + ground truth
        probs_l = out_l.seg_probs_hwc()
        regions_l = regions_labeled(probs_l, labeled_gt, th)

        # (7) combined-batch sampling across both representation maps
        rep_l = out_l.rep_hwd()
        combined = torch.cat([rep_u, rep_l], dim=0)
        b_u, b_l = rep_u.shape[0], rep_l.shape[0]
        merged = merge_regions(
            _pad_regions(aug_regions, 0, b_l), _pad_regions(regions_l, b_u, 0)
        )
        samples = draw_samples(
            merged, combined, cfg.q_queries, cfg.n_negatives, draw_seed,
            cfg.grad_through_keys,
        )
        n_pairs = samples.contributing_pairs()

        # (8) contrastive term; a dry pool skips it but the step proceeds
        if n_pairs > 0:
            con = contrastive_loss(samples, cfg.tau)
        else:
            skipped = True

    # (9) total loss and one update
    total = total_loss(sup, con)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
    optimizer.step()

    if collect_debug:
        dbg.labeled_data = labeled_data
        dbg.labeled_gt = labeled_gt
        dbg.labeled_logits = out_l.seg_logits_hwc()
        dbg.labeled_rep = out_l.rep_hwd().detach().numpy()
        if semi:
            dbg.labeled_probs = probs_l
            dbg.labeled_regions = regions_l
            dbg.unlabeled_data = unlabeled_data
            dbg.unlabeled_probs = probs_u
            dbg.pseudo_labels = pseudo
            dbg.unlabeled_regions = regions_u
            dbg.masks = masks
            dbg.aug_data = aug_data
            dbg.aug_pseudo_labels = aug_pseudo
            dbg.aug_regions = aug_regions
            dbg.unlabeled_rep = rep_u.detach().numpy()
            dbg.merged_regions = merged
            dbg.samples = samples

    sup_f = float(sup.detach()) if isinstance(sup, torch.Tensor) else float(sup)
    con_f = float(con.detach()) if isinstance(con, torch.Tensor) else float(con)
    return StepResult(
        sup=sup_f,
        con=con_f,
        total=sup_f + con_f,
        n_pairs=n_pairs,
        contrastive_skipped=skipped,
        debug=dbg,
    )


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class TrainData:
    labeled: SliceSet
    unlabeled: SliceSet | None
    val: SliceSet | None
    test: SliceSet
    classes: int


def _subset(s: SliceSet, pos: list[int]) -> SliceSet:
    idx = np.asarray(pos, dtype=np.int64)
    return SliceSet(
        s.indices[idx],
        s.data[idx],
        None if s.labels is None else s.labels[idx],
    )


def split_validation(test: SliceSet) -> tuple[SliceSet | None, SliceSet]:
    """Carve one validation slice per 100 held-out slices (positions 50,
    150, ...; the middle slice when fewer than 51 are held out)."""
    m = len(test)
    if m == 0:
        return None, test
    val_pos = list(range(50, m, 100)) or [m // 2]
    rest = [i for i in range(m) if i not in set(val_pos)]
    return _subset(test, val_pos), _subset(test, rest)


def build_train_data(
    volume: SeismicVolume,
    labels: LabelVolume,
    plan: SliceSamplingPlan,
    cfg: TrainConfig,
) -> TrainData:
    """Sample slices per plan, sparsify labels if requested, carve validation."""
    split: TrainingSplit = sample_training_slices(volume, labels, plan)
    labeled = split.labeled
    if cfg.mode == "SparseConSemiSup":
        labeled.labels = sparsify_labels(
            labeled.labels, SparsityConfig(cfg.keep_fraction, cfg.seed)
        )
    val, test = split_validation(split.test)
    unlabeled = None if cfg.mode == "Sup" else split.unlabeled
    return TrainData(labeled, unlabeled, val, test, labels.classes)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

LOSS_COLUMNS = [
    "epoch", "step", "global_step", "lr", "sup", "con", "total",
    "n_pairs", "contrastive_skipped",
]


class _Cycler:
    """Deterministic reshuffled cycling over dataset indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.queue: list[int] = []

    def take(self, k: int) -> np.ndarray:
        out: list[int] = []
        while len(out) < k:
            if not self.queue:
                self.queue = [int(i) for i in self.rng.permutation(self.n)]
            out.append(self.queue.pop(0))
        return np.asarray(out, dtype=np.int64)

    def take_no_refill(self, k: int) -> np.ndarray:
        take = min(k, len(self.queue))
        out = self.queue[:take]
        del self.queue[:take]
        return np.asarray(out, dtype=np.int64)


def train(
    model: DualHeadNet,
    data: TrainData,
    cfg: TrainConfig,
    run_dir=None,
    resume_from=None,
) -> tuple[DualHeadNet, dict]:
    """Run the configured number of epochs; returns the model and history.

    An epoch is one pass over the labeled stream unless ``steps_per_epoch``
    overrides the step count; the unlabeled stream cycles with reshuffling.
    Checkpoints ``last.pt`` (with optimizer and RNG state for exact resume)
    and ``best.pt`` (highest validation mean IoU) land in ``run_dir``.
    """
    if len(data.labeled) == 0:
        raise ConfigError("labeled slice set is empty")
    semi = cfg.mode != "Sup"
    if semi and (data.unlabeled is None or len(data.unlabeled) == 0):
        raise ConfigError(f"mode {cfg.mode} needs unlabeled slices")

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "train_config.json").write_text(
            json.dumps(dataclasses.asdict(cfg), indent=2)
        )

    torch.manual_seed(cfg.seed)
    master_rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
    l_cycler = _Cycler(len(data.labeled), master_rng)
    u_cycler = _Cycler(len(data.unlabeled), master_rng) if semi else None

    start_epoch = 0
    best_miou = -math.inf
    global_step = 0
    if resume_from is not None:
        model_loaded, epoch_done, extra = load_checkpoint(resume_from)
        if "optimizer" not in extra:
            raise ConfigError(
                f"{resume_from} has no optimizer/RNG state; resume from last.pt"
            )
        model.load_state_dict(model_loaded.state_dict())
        optimizer.load_state_dict(extra["optimizer"])
        master_rng.bit_generator.state = extra["rng_state"]
        l_cycler.queue = list(extra["labeled_queue"])
        if u_cycler is not None:
            u_cycler.queue = list(extra["unlabeled_queue"])
        start_epoch = epoch_done
        best_miou = extra.get("best_miou", -math.inf)
        global_step = extra.get("global_step", 0)
        log.info("resumed from %s at epoch %d", resume_from, start_epoch)

    loss_path = run_dir / "loss.csv" if run_dir is not None else None
    val_path = run_dir / "val_metrics.csv" if run_dir is not None else None
    fresh = start_epoch == 0
    if loss_path is not None and fresh:
        loss_path.write_text(",".join(LOSS_COLUMNS) + "\n")
    if val_path is not None and fresh:
        val_path.write_text("epoch,val_miou\n")

    history: dict = {"steps": [], "val_miou": []}
    steps_default = math.ceil(len(data.labeled) / cfg.batch_size)

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        if cfg.steps_per_epoch is None:
            l_cycler.queue = [int(i) for i in master_rng.permutation(len(data.labeled))]
        n_steps = cfg.steps_per_epoch or steps_default

        for step in range(n_steps):
            if cfg.steps_per_epoch is None:
                l_idx = l_cycler.take_no_refill(cfg.batch_size)
            else:
                l_idx = l_cycler.take(cfg.batch_size)
            u_batch = None
            if semi:
                u_idx = u_cycler.take(cfg.batch_size)
                u_batch = data.unlabeled.data[u_idx]
            step_seed = int(master_rng.integers(_MAX_SEED))
            try:
                result = contrastive_step(
                    model,
                    optimizer,
                    data.labeled.data[l_idx],
                    data.labeled.labels[l_idx],
                    u_batch,
                    cfg,
                    step_seed,
                )
            except NumericError:
                if run_dir is not None:
                    _dump_aborted_step(
                        run_dir, epoch, step, lr, data.labeled.data[l_idx],
                        data.labeled.labels[l_idx], u_batch,
                    )
                raise
            row = {
                "epoch": epoch,
                "step": step,
                "global_step": global_step,
                "lr": lr,
                "sup": result.sup,
                "con": result.con,
                "total": result.total,
                "n_pairs": result.n_pairs,
                "contrastive_skipped": int(result.contrastive_skipped),
            }
            history["steps"].append(row)
            if loss_path is not None:
                with open(loss_path, "a") as fh:
                    csv.DictWriter(fh, LOSS_COLUMNS).writerow(
                        {k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
                    )
            global_step += 1

        val_miou = math.nan
        if data.val is not None and len(data.val) > 0:
            _, report = evaluate.evaluate_slices(model, data.val, data.classes)
            val_miou = report.mean_iou
        history["val_miou"].append(val_miou)
        if val_path is not None:
            with open(val_path, "a") as fh:
                fh.write(f"{epoch},{repr(val_miou)}\n")

        is_best = (not math.isnan(val_miou) and val_miou > best_miou) or (
            data.val is None or len(data.val) == 0
        )
        if is_best and not math.isnan(val_miou):
            best_miou = val_miou
        if run_dir is not None:
            extra = {
                "optimizer": optimizer.state_dict(),
                "rng_state": master_rng.bit_generator.state,
                "labeled_queue": list(l_cycler.queue),
                "unlabeled_queue": list(u_cycler.queue) if u_cycler else [],
                "best_miou": best_miou,
                "global_step": global_step,
                "val_miou": val_miou,
            }
            save_checkpoint(run_dir / "last.pt", model, epoch + 1, extra)
            if is_best:
                save_checkpoint(run_dir / "best.pt", model, epoch + 1, {"val_miou": val_miou})
        log.info(
            "epoch %d done: lr=%.2e last_total=%.4f val_miou=%.2f",
            epoch, lr, history["steps"][-1]["total"], val_miou,
        )

    return model, history


def _dump_aborted_step(run_dir, epoch, step, lr, l_data, l_gt, u_data):
    dump = run_dir / f"abort_epoch{epoch}_step{step}.npz"
    np.savez_compressed(
        dump,
        labeled_data=l_data,
        labeled_gt=l_gt,
        unlabeled_data=u_data if u_data is not None else np.empty(0),
        lr=np.asarray(lr),
    )
    log.error("non-finite loss; step inputs dumped to %s", dump)
