"""Multi-frame LiDAR fusion into a reference ego frame.

Each member frame's points follow the chain

    lidar_k -> ego_k -> global -> ego_ref
    p_ref = inv(ego_to_global_ref) · ego_to_global_k · lidar_to_ego_k · p

Dynamic-aware fusion additionally moves points inside annotated boxes with
their track's own rigid motion instead of the ego motion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .dataset import FrameIndex, FrameRecord, PointCloud
from .errors import ValidationError
from .geometry import PoseSE3


@dataclass(frozen=True)
class FusionConfig:
    n_keyframes_before: int = 0
    n_keyframes_after: int = 0
    include_sweeps: bool = False
    dynamic_aware: bool = False
    max_range: Optional[float] = None
    box_margin: float = 0.0

    def __post_init__(self) -> None:
        if self.n_keyframes_before < 0 or self.n_keyframes_after < 0:
            raise ValidationError("keyframe counts must be >= 0")
        if self.max_range is not None and not self.max_range > 0:
            raise ValidationError(f"max_range must be positive, got {self.max_range}")
        if self.box_margin < 0:
            raise ValidationError("box_margin must be >= 0")

    @classmethod
    def for_frames(cls, frames: int, **kwargs) -> FusionConfig:
        """Preset for the 0/1/3/5 keyframe fusion settings.

        0 is the reference sweep alone; 1 adds the preceding keyframe and the
        sweeps in between; 3 and 5 are symmetric windows with sweeps.
        """
        presets = {0: (0, 0, False), 1: (1, 0, True), 3: (1, 1, True), 5: (2, 2, True)}
        if frames not in presets:
            raise ValidationError(f"no fusion preset for {frames} frames (choose from {sorted(presets)})")
        before, after, sweeps = presets[frames]
        return cls(before, after, sweeps, **kwargs)


@dataclass(frozen=True)
class FrameSet:
    reference: FrameRecord
    members: tuple[FrameRecord, ...]

    @property
    def frame_ids(self) -> list[str]:
        return [f.frame_id for f in self.members]


CloudSource = Union[Mapping[str, PointCloud], Callable[[str], PointCloud]]


def select_frames(index: FrameIndex, reference_id: str, cfg: FusionConfig) -> FrameSet:
    """Reference keyframe plus neighbouring keyframes (and optionally sweeps).

    Windows are clipped at scene boundaries without error.
    """
    ref = index.frame(reference_id)
    if not ref.is_keyframe:
        raise ValidationError(f"reference frame {reference_id!r} is not a keyframe")
    scene = index.scenes[ref.scene_id]
    keys = [f for f in scene if f.is_keyframe]
    r = next(i for i, f in enumerate(keys) if f.frame_id == reference_id)
    chosen = keys[max(0, r - cfg.n_keyframes_before): r + cfg.n_keyframes_after + 1]
    t_lo, t_hi = chosen[0].timestamp, chosen[-1].timestamp
    ids = {f.frame_id for f in chosen}
    members = [
        f for f in scene
        if f.frame_id in ids or (cfg.include_sweeps and not f.is_keyframe and t_lo < f.timestamp < t_hi)
    ]
    return FrameSet(ref, tuple(members))


def frame_to_reference(reference: FrameRecord, frame: FrameRecord) -> PoseSE3:
    """Pose mapping LiDAR points of ``frame`` into the reference ego frame."""
    return reference.ego_to_global.inverse() @ frame.ego_to_global @ frame.lidar_to_ego


def _cloud_for(clouds: CloudSource, frame_id: str) -> PointCloud:
    if callable(clouds):
        return clouds(frame_id)
    try:
        return clouds[frame_id]
    except KeyError:
        raise ValidationError(f"missing point cloud for member frame {frame_id!r}") from None


def _range_filter(cloud: PointCloud, max_range: Optional[float]) -> PointCloud:
    if max_range is None:
        return cloud
    keep = np.linalg.norm(cloud.points, axis=1) <= max_range
    return cloud.select(keep)


def fuse_static(frames: FrameSet, clouds: CloudSource, max_range: Optional[float] = None) -> PointCloud:
    """Concatenate member clouds after mapping each into the reference ego frame.

    Output order is member order (timestamps), then file order.
    """
    parts = []
    for f in frames.members:
        cloud = _cloud_for(clouds, f.frame_id)
        parts.append(cloud.with_points(frame_to_reference(frames.reference, f).apply(cloud.points)))
    fused = PointCloud.concatenate(parts, source_frame=frames.reference.frame_id)
    return _range_filter(fused, max_range)


def _assign_boxes(points_ego: np.ndarray, boxes, margin: float) -> np.ndarray:
    """Index of the containing box per point, -1 if none; overlaps go to the nearest center."""
    owner = np.full(len(points_ego), -1, dtype=np.int64)
    if not boxes or not len(points_ego):
        return owner
    best = np.full(len(points_ego), np.inf)
    for bi, box in enumerate(boxes):
        inside = box.contains(points_ego, margin)
        if not inside.any():
            continue
        d = np.linalg.norm(points_ego - np.asarray(box.center), axis=1)
        take = inside & (d < best)
        owner[take] = bi
        best[take] = d[take]
    return owner


def fuse_dynamic_aware(
    frames: FrameSet,
    clouds: CloudSource,
    max_range: Optional[float] = None,
    box_margin: float = 0.0,
) -> PointCloud:
    """Like ``fuse_static`` but points inside a tracked box follow the box.

    A point inside box ``b`` of track ``T`` at frame ``k`` maps to
    ``boxpose_ref(T) · inv(boxpose_k(T)) · p_ego_k``. Points of tracks with no
    box at the reference frame are dropped. Frames without annotations
    contribute their points exactly as in static fusion.
    """
    ref = frames.reference
    parts = []
    for f in frames.members:
        cloud = _cloud_for(clouds, f.frame_id)
        pts = frame_to_reference(ref, f).apply(cloud.points)
        keep = np.ones(len(cloud), dtype=bool)
        if f.boxes:
            ego = f.lidar_to_ego.apply(cloud.points)
            owner = _assign_boxes(ego, f.boxes, box_margin)
            for bi, box in enumerate(f.boxes):
                sel = owner == bi
                if not sel.any():
                    continue
                ref_box = ref.box_for(box.track_id)
                if ref_box is None:
                    keep[sel] = False
                    continue
                warp = ref_box.pose @ box.pose.inverse()
                pts[sel] = warp.apply(ego[sel])
        parts.append(cloud.with_points(pts).select(keep))
    fused = PointCloud.concatenate(parts, source_frame=ref.frame_id)
    return _range_filter(fused, max_range)


def fuse(frames: FrameSet, clouds: CloudSource, cfg: FusionConfig) -> PointCloud:
    """Dispatch to static or dynamic-aware fusion per ``cfg``."""
    if cfg.dynamic_aware:
        return fuse_dynamic_aware(frames, clouds, cfg.max_range, cfg.box_margin)
    return fuse_static(frames, clouds, cfg.max_range)
