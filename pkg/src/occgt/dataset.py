"""Frame index, point-cloud binaries, box annotations and label-efficiency subsets.

Point-cloud files are headerless little-endian records of five float32
values ``(x, y, z, intensity, ring)``. An optional sibling file with the
``.label`` extension holds one uint8 class id per point (255 = unlabeled).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import IndexFormatError, TruncatedCloudError, ValidationError
from .geometry import PoseSE3

logger = logging.getLogger(__name__)

RECORD_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("ring", "<f4")]
)
RECORD_SIZE = RECORD_DTYPE.itemsize
LABEL_SUFFIX = ".label"
UNLABELED = 255


@dataclass(frozen=True)
class BoxAnnotation:
    """Oriented 3D box in its frame's ego coordinates.

    ``size`` is (width, length, height); length runs along the heading, i.e.
    the box-local +X axis after rotating by ``yaw`` about +Z.
    """

    track_id: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int = 0

    def __post_init__(self) -> None:
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValidationError(f"box {self.track_id!r}: center and size must have 3 components")
        if not all(math.isfinite(v) for v in (*self.center, *self.size, self.yaw)):
            raise ValidationError(f"box {self.track_id!r}: non-finite geometry")
        if min(self.size) <= 0:
            raise ValidationError(f"box {self.track_id!r}: size components must be > 0, got {self.size}")
        if not -math.pi <= self.yaw <= math.pi:
            raise ValidationError(f"box {self.track_id!r}: yaw {self.yaw} outside [-pi, pi]")

    @property
    def pose(self) -> PoseSE3:
        """Box-to-ego transform (yaw about +Z, then translation to the center)."""
        return PoseSE3.from_yaw(self.yaw, self.center)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of ego-frame points inside the box (closed, inflated by ``margin``)."""
        local = self.pose.inverse().apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        w, l, h = self.size
        half = np.array([l, w, h]) / 2.0 + margin
        return np.all(np.abs(local) <= half, axis=1)


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    timestamp: int
    is_keyframe: bool
    cloud_path: str
    ego_to_global: PoseSE3
    lidar_to_ego: PoseSE3
    scene_id: str
    boxes: Optional[tuple[BoxAnnotation, ...]] = None

    def box_for(self, track_id: str) -> Optional[BoxAnnotation]:
        for box in self.boxes or ():
            if box.track_id == track_id:
                return box
        return None


@dataclass
class PointCloud:
    """Column-oriented point set.

    ``points`` is (N, 3) float64; the optional columns are parallel to it.
    ``dropped`` counts non-finite records discarded at load time.
    """

    points: np.ndarray
    intensities: Optional[np.ndarray] = None
    rings: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    source_frame: str = ""
    dropped: int = 0

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        for name in ("intensities", "rings", "labels"):
            col = getattr(self, name)
            if col is None:
                continue
            col = np.asarray(col, dtype=np.uint8 if name == "labels" else np.float32).reshape(-1)
            if len(col) != n:
                raise ValidationError(f"cloud {self.source_frame!r}: {name} has {len(col)} entries for {n} points")
            setattr(self, name, col)

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask_or_index) -> PointCloud:
        """Subset of points (boolean mask or integer index array)."""

        def pick(col):
            return None if col is None else col[mask_or_index]

        return PointCloud(
            self.points[mask_or_index],
            pick(self.intensities),
            pick(self.rings),
            pick(self.labels),
            self.source_frame,
        )

    def with_points(self, points: np.ndarray) -> PointCloud:
        return replace(self, points=points, dropped=0)

    @classmethod
    def concatenate(cls, clouds: Sequence[PointCloud], source_frame: str = "") -> PointCloud:
        if not clouds:
            return cls(np.zeros((0, 3)), source_frame=source_frame)

        def cat(name, dtype):
            cols = [getattr(c, name) for c in clouds]
            if any(c is None for c in cols):
                return None
            return np.concatenate(cols).astype(dtype, copy=False)

        return cls(
            np.concatenate([c.points for c in clouds]),
            cat("intensities", np.float32),
            cat("rings", np.float32),
            cat("labels", np.uint8),
            source_frame,
        )


@dataclass
class FrameIndex:
    """Scenes in file order, each an ordered list of frames.

    ``root`` is the directory that ``cloud_path`` entries are relative to.
    """

    scenes: dict[str, list[FrameRecord]]
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        self._by_id: dict[str, FrameRecord] = {}
        for scene_id, frames in self.scenes.items():
            if not frames:
                raise ValidationError(f"scene {scene_id!r} has no frames")
            if not any(f.is_keyframe for f in frames):
                raise ValidationError(f"scene {scene_id!r} has no keyframe")
            for prev, cur in zip(frames, frames[1:]):
                if cur.timestamp <= prev.timestamp:
                    raise ValidationError(
                        f"scene {scene_id!r}: timestamps not strictly increasing at frame {cur.frame_id!r}"
                    )
            for f in frames:
                if f.frame_id in self._by_id:
                    raise ValidationError(f"duplicate frame_id {f.frame_id!r}")
                self._by_id[f.frame_id] = f

    def __len__(self) -> int:
        return len(self.scenes)

    def frame(self, frame_id: str) -> FrameRecord:
        try:
            return self._by_id[frame_id]
        except KeyError:
            raise ValidationError(f"unknown frame_id {frame_id!r}") from None

    def __contains__(self, frame_id: str) -> bool:
        return frame_id in self._by_id

    def frames(self) -> Iterator[FrameRecord]:
        for frames in self.scenes.values():
            yield from frames

    def keyframes(self, scene_id: str) -> list[FrameRecord]:
        return [f for f in self.scenes[scene_id] if f.is_keyframe]

    def cloud_file(self, record: FrameRecord) -> Path:
        return self.root / record.cloud_path

    def to_json(self) -> dict:
        return {"scenes": [{"scene_id": sid, "frames": [_frame_to_json(f) for f in frames]}
                           for sid, frames in self.scenes.items()]}


# --- index I/O ---------------------------------------------------------------


def _frame_to_json(f: FrameRecord) -> dict:
    d = {
        "frame_id": f.frame_id,
        "timestamp_us": f.timestamp,
        "is_keyframe": f.is_keyframe,
        "cloud_path": f.cloud_path,
        "ego_to_global": f.ego_to_global.to_dict(),
        "lidar_to_ego": f.lidar_to_ego.to_dict(),
    }
    if f.boxes is not None:
        d["boxes"] = [
            {"track_id": b.track_id, "center": list(b.center), "size": list(b.size), "yaw": b.yaw, "class_id": b.class_id}
            for b in f.boxes
        ]
    return d


def _get(obj: dict, key: str, where: str, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise IndexFormatError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise IndexFormatError(f"{where}.{key}: expected {kind.__name__ if isinstance(kind, type) else kind}, got {value!r}")
    if kind in (int, float, (int, float)) and isinstance(value, bool):
        raise IndexFormatError(f"{where}.{key}: expected a number, got {value!r}")
    return value


def _parse_pose(d, where: str) -> PoseSE3:
    t = _get(d, "t", where, list)
    q = _get(d, "q", where, list)
    if len(t) != 3 or len(q) != 4:
        raise IndexFormatError(f"{where}: pose needs t[3] and q[4]")
    try:
        return PoseSE3(np.asarray(q, dtype=np.float64), np.asarray(t, dtype=np.float64))
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise IndexFormatError(f"{where}: {exc}") from None


def _parse_box(d, where: str) -> BoxAnnotation:
    try:
        return BoxAnnotation(
            track_id=str(_get(d, "track_id", where)),
            center=tuple(float(v) for v in _get(d, "center", where, list)),
            size=tuple(float(v) for v in _get(d, "size", where, list)),
            yaw=float(_get(d, "yaw", where, (int, float))),
            class_id=int(d.get("class_id", 0)),
        )
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise IndexFormatError(f"{where}: {exc}") from None


def parse_index(doc: dict, root: Path | str = ".") -> FrameIndex:
    """Build a validated ``FrameIndex`` from an already-decoded JSON document."""
    scenes_json = _get(doc, "scenes", "index", list)
    scenes: dict[str, list[FrameRecord]] = {}
    for si, scene in enumerate(scenes_json):
        where = f"scenes[{si}]"
        scene_id = str(_get(scene, "scene_id", where))
        if scene_id in scenes:
            raise ValidationError(f"duplicate scene_id {scene_id!r}")
        frames = []
        for fi, fr in enumerate(_get(scene, "frames", where, list)):
            fwhere = f"{where}.frames[{fi}]"
            frame_id = str(_get(fr, "frame_id", fwhere))
            fwhere = f"{fwhere} (frame {frame_id!r})"
            try:
                boxes = fr.get("boxes")
                if boxes is not None:
                    if not isinstance(boxes, list):
                        raise IndexFormatError(f"{fwhere}.boxes: expected list")
                    boxes = tuple(_parse_box(b, f"{fwhere}.boxes[{bi}]") for bi, b in enumerate(boxes))
                frames.append(
                    FrameRecord(
                        frame_id=frame_id,
                        timestamp=int(_get(fr, "timestamp_us", fwhere, int)),
                        is_keyframe=bool(_get(fr, "is_keyframe", fwhere, bool)),
                        cloud_path=str(_get(fr, "cloud_path", fwhere, str)),
                        ego_to_global=_parse_pose(_get(fr, "ego_to_global", fwhere, dict), f"{fwhere}.ego_to_global"),
                        lidar_to_ego=_parse_pose(_get(fr, "lidar_to_ego", fwhere, dict), f"{fwhere}.lidar_to_ego"),
                        scene_id=scene_id,
                        boxes=boxes,
                    )
                )
            except ValidationError as exc:
                if frame_id in str(exc):
                    raise
                raise ValidationError(f"{fwhere}: {exc}") from None
        scenes[scene_id] = frames
    return FrameIndex(scenes, Path(root))


def load_index(path: Path | str) -> FrameIndex:
    """Read and validate a frame index JSON file.

    Cloud paths in the index are resolved relative to the index's directory.
    """
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IndexFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_index(doc, path.parent)


def save_index(index: FrameIndex, path: Path | str) -> None:
    Path(path).write_text(json.dumps(index.to_json(), indent=1))


# --- point clouds ------------------------------------------------------------


def label_path_for(path: Path | str) -> Path:
    return Path(path).with_suffix(LABEL_SUFFIX)


def load_cloud(path: Path | str, source_frame: str = "") -> PointCloud:
    """Read a 5-float record file (and its ``.label`` sibling if present).

    Records with any non-finite coordinate are dropped; the number dropped is
    kept on ``PointCloud.dropped`` and logged.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % RECORD_SIZE:
        whole = len(raw) // RECORD_SIZE
        raise TruncatedCloudError(path, expected=(whole + 1) * RECORD_SIZE, actual=len(raw))
    rec = np.frombuffer(raw, dtype=RECORD_DTYPE)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)

    labels = None
    lpath = label_path_for(path)
    if lpath.exists():
        labels = np.fromfile(lpath, dtype=np.uint8)
        if len(labels) != len(rec):
            raise TruncatedCloudError(lpath, expected=len(rec), actual=len(labels))

    finite = np.all(np.isfinite(xyz), axis=1)
    dropped = int(len(rec) - finite.sum())
    if dropped:
        logger.warning("%s: dropped %d non-finite points of %d", path, dropped, len(rec))
    cloud = PointCloud(
        xyz[finite],
        rec["intensity"][finite].copy(),
        rec["ring"][finite].copy(),
        None if labels is None else labels[finite],
        source_frame=source_frame or path.stem,
    )
    cloud.dropped = dropped
    return cloud


def write_cloud(cloud: PointCloud, path: Path | str, write_labels: bool = True) -> None:
    """Write the 5-float record layout; missing intensity/ring columns become 0."""
    path = Path(path)
    n = len(cloud)
    rec = np.zeros(n, dtype=RECORD_DTYPE)
    rec["x"], rec["y"], rec["z"] = (cloud.points[:, i].astype(np.float32) for i in range(3))
    if cloud.intensities is not None:
        rec["intensity"] = cloud.intensities
    if cloud.rings is not None:
        rec["ring"] = cloud.rings
    path.write_bytes(rec.tobytes())
    if write_labels and cloud.labels is not None:
        label_path_for(path).write_bytes(cloud.labels.astype(np.uint8).tobytes())


def cloud_loader(index: FrameIndex):
    """Callable ``frame_id -> PointCloud`` reading clouds from disk."""

    def load(frame_id: str) -> PointCloud:
        rec = index.frame(frame_id)
        return load_cloud(index.cloud_file(rec), source_frame=frame_id)

    return load


# --- label-efficiency subsets ------------------------------------------------


def scene_permutation(index: FrameIndex, seed: int) -> list[str]:
    ids = list(index.scenes)
    order = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)).permutation(len(ids))
    return [ids[i] for i in order]


def sample_subset(index: FrameIndex, fraction: float, seed: int) -> FrameIndex:
    """Keep ``ceil(fraction * n_scenes)`` whole scenes.

    Scenes are taken as a prefix of a seeded permutation, so for one seed the
    subset at a smaller fraction is always contained in the one at a larger
    fraction. Scene order in the result follows the input index.
    """
    if not (0.0 < fraction <= 1.0) or not math.isfinite(fraction):
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    n = len(index.scenes)
    # absorb float noise such as 0.07 * 100 = 7.000000000000001
    k = min(n, math.ceil(round(fraction * n, 9)))
    keep = set(scene_permutation(index, seed)[:k])
    scenes = {sid: frames for sid, frames in index.scenes.items() if sid in keep}
    return FrameIndex(scenes, index.root)
