"""Occupancy ground-truth generation and evaluation for LiDAR world-model pre-training."""

from .dataset import BoxAnnotation, FrameIndex, FrameRecord, PointCloud, load_cloud, load_index, sample_subset, write_cloud
from .errors import (
    BadMagicError,
    DivergenceError,
    FormatError,
    OccgtError,
    PayloadLengthError,
    TruncatedCloudError,
    ValidationError,
    VersionMismatchError,
)
from .fusion import FrameSet, FusionConfig, fuse, fuse_dynamic_aware, fuse_static, select_frames
from .geometry import PoseSE3, compose, invert, transform_points
from .loss import FocalLossParams, FocalMode, focal_loss, focal_loss_grad
from .metrics import OCC3D_CLASSES, ConfusionMatrix, binary_iou, confusion, miou, per_class_iou, temporal_iou
from .occupancy import (
    GridSpec,
    OccupancyGrid,
    OccupancyGrid4D,
    SemanticGrid,
    build_4d_labels,
    read_occg,
    voxelize,
    voxelize_semantic,
    write_occg,
)

__version__ = "0.1.0"
