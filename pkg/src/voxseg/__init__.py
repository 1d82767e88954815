"""voxseg: configuration-driven medical image segmentation.

BIDS datasets in, trained segmentation models and evaluation reports out.
A single JSON config describes the loader, preprocessing/augmentation,
model, training schedule, uncertainty estimation, and evaluation; the
`voxseg` CLI exposes train/test/segment/automate on top of the library API.
"""

from .bids import (
    DatasetSplit,
    SubjectRecord,
    balance_weights,
    filter_records,
    index_dataset,
    parse_sidecar,
    split_dataset,
)
from .config import ExperimentConfig, load_config, override_config
from .errors import (
    BidsIndexError,
    CheckpointError,
    ConfigError,
    EmptyMaskError,
    NiftiError,
    VoxsegError,
)
from .evaluation import (
    EvalRow,
    PredictionSet,
    compute_metrics,
    object_uncertainty,
    optimal_threshold,
    postprocess,
    run_test,
    sample_predictions,
    segment_volume,
    size_binned_metrics,
    voxel_uncertainty,
    write_report,
)
from .losses import build_loss, mixup_batch
from .models import (
    MetadataEncoder,
    ModelSpec,
    UNet,
    build_model,
    cascade_predict,
    load_model,
    save_model,
)
from .nifti import read_nifti, write_nifti
from .training import (
    automate_grid,
    freeze_layers,
    load_checkpoint,
    modality_curriculum,
    run_training,
    save_checkpoint,
)
from .transforms import TransformRecord, derive_seed, invert_records
from .volume import (
    SampleUnit,
    Volume,
    bounding_box,
    extract_units,
    reconstruct_volume,
    reorient,
)

__version__ = "0.1.0"

__all__ = [
    "BidsIndexError",
    "CheckpointError",
    "ConfigError",
    "DatasetSplit",
    "EmptyMaskError",
    "EvalRow",
    "ExperimentConfig",
    "MetadataEncoder",
    "ModelSpec",
    "NiftiError",
    "PredictionSet",
    "SampleUnit",
    "SubjectRecord",
    "TransformRecord",
    "UNet",
    "Volume",
    "VoxsegError",
    "automate_grid",
    "balance_weights",
    "bounding_box",
    "build_loss",
    "build_model",
    "cascade_predict",
    "compute_metrics",
    "derive_seed",
    "extract_units",
    "filter_records",
    "freeze_layers",
    "index_dataset",
    "invert_records",
    "load_checkpoint",
    "load_config",
    "load_model",
    "mixup_batch",
    "modality_curriculum",
    "object_uncertainty",
    "optimal_threshold",
    "override_config",
    "parse_sidecar",
    "postprocess",
    "read_nifti",
    "reconstruct_volume",
    "reorient",
    "run_test",
    "run_training",
    "sample_predictions",
    "save_checkpoint",
    "save_model",
    "segment_volume",
    "size_binned_metrics",
    "split_dataset",
    "voxel_uncertainty",
    "write_nifti",
    "write_report",
    "__version__",
]
