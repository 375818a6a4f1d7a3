"""Contrastive semi-supervised seismic facies segmentation."""

from .augment import MixMask, SdaConfig, apply_sda, classmix_mask, cutmix_mask, sda_batch
from .confidence import (
    ClassSamples,
    ConfidenceRegions,
    ConfidenceThresholds,
    ContrastiveSampleSet,
    draw_samples,
    merge_regions,
    regions_labeled,
    regions_unlabeled,
)
from .evaluate import (
    ConfusionMatrix,
    MetricReport,
    accumulate,
    evaluate_slices,
    export_features,
    metrics,
    predict_volume,
)
from .losses import contrastive_loss, cosine_similarity, softmax, supervised_loss, total_loss
from .model import (
    DualHeadNet,
    DualHeadOutput,
    ModelSpec,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import (
    TrainConfig,
    TrainData,
    build_train_data,
    contrastive_step,
    lr_at_epoch,
    train,
)
from .volume import (
    IGNORE_LABEL,
    LabelVolume,
    SeismicVolume,
    SliceSamplingPlan,
    SliceSet,
    SparsityConfig,
    SynthSpec,
    load_labels,
    load_volume,
    sample_training_slices,
    save_labels,
    save_volume,
    sparsify_labels,
    synth_volume,
)

__version__ = "0.1.0"
