"""Seeded synthetic driving scenes for tests and demos.

A scene is a static world (ground patch plus two walls) observed from an ego
vehicle driving along +x, with one or more boxed objects moving through it.
Every frame sees a random subset of the world, expressed in its own LiDAR
frame, so fusing frames genuinely densifies the cloud.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import BoxAnnotation, FrameIndex, FrameRecord, PointCloud, write_cloud
from .geometry import PoseSE3


@dataclass(frozen=True)
class Track:
    track_id: str
    start: tuple[float, float, float]  # world center at t = 0
    velocity: tuple[float, float]  # m/s in world x, y
    size: tuple[float, float, float] = (1.8, 4.2, 1.6)  # (w, l, h)
    class_id: int = 4
    first_frame: int = 0
    last_frame: Optional[int] = None

    def world_pose(self, t: float) -> PoseSE3:
        vx, vy = self.velocity
        yaw = float(np.arctan2(vy, vx)) if (vx or vy) else 0.0
        c = np.asarray(self.start) + np.array([vx * t, vy * t, 0.0])
        return PoseSE3.from_yaw(yaw, c)


def _static_world(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Ground (class 11) and two walls (class 15) as world-frame points."""
    n_ground = n // 2
    ground = np.column_stack([rng.uniform(-20, 60, n_ground), rng.uniform(-12, 12, n_ground), np.zeros(n_ground)])
    n_wall = n - n_ground
    side = np.where(rng.random(n_wall) < 0.5, -10.0, 10.0)
    walls = np.column_stack([rng.uniform(-20, 60, n_wall), side, rng.uniform(0, 3, n_wall)])
    pts = np.vstack([ground, walls])
    labels = np.concatenate([np.full(n_ground, 11), np.full(n_wall, 15)]).astype(np.uint8)
    return pts, labels


def _box_surface(rng: np.random.Generator, size, n: int) -> np.ndarray:
    """Points on the faces of a box in its local frame (x along length)."""
    w, l, h = size
    half = np.array([l, w, h]) / 2
    pts = rng.uniform(-half, half, (n, 3))
    axis = rng.integers(0, 3, n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * half[axis] * 0.98
    return pts


def make_scene(
    scene_id: str = "scene-0000",
    n_keyframes: int = 5,
    sweeps_between: int = 2,
    dt: float = 0.5,
    ego_speed: float = 4.0,
    tracks: tuple[Track, ...] = (),
    points_per_frame: int = 600,
    visible_fraction: float = 0.35,
    annotate_sweeps: bool = False,
    seed: int = 0,
    t0_us: int = 1_000_000,
) -> tuple[list[FrameRecord], dict[str, PointCloud]]:
    """Frames and in-memory clouds of one scene (cloud_path = ``<frame_id>.bin``)."""
    rng = np.random.default_rng(seed)
    world, world_labels = _static_world(rng, 4 * points_per_frame)
    lidar_to_ego = PoseSE3.from_yaw(0.01, (0.9, 0.0, 1.8))
    step = dt / (sweeps_between + 1)
    n_frames = (n_keyframes - 1) * (sweeps_between + 1) + 1
    frames, clouds = [], {}
    for i in range(n_frames):
        t = i * step
        is_key = i % (sweeps_between + 1) == 0
        ego_to_global = PoseSE3.from_yaw(0.02 * t, (ego_speed * t, 0.3 * t, 0.0))
        global_to_ego = ego_to_global.inverse()
        sel = rng.random(len(world)) < visible_fraction
        pts_world, labels = [world[sel]], [world_labels[sel]]
        boxes = []
        for tr in tracks:
            if i < tr.first_frame or (tr.last_frame is not None and i > tr.last_frame):
                continue
            wp = tr.world_pose(t)
            local = _box_surface(rng, tr.size, 60)
            pts_world.append(wp.apply(local))
            labels.append(np.full(len(local), tr.class_id, dtype=np.uint8))
            if is_key or annotate_sweeps:
                ego_pose = global_to_ego @ wp
                yaw = float(np.arctan2(ego_pose.rotation_matrix[1, 0], ego_pose.rotation_matrix[0, 0]))
                boxes.append(BoxAnnotation(tr.track_id, tuple(ego_pose.translation), tr.size, yaw, tr.class_id))
        pts = np.vstack(pts_world)
        to_lidar = lidar_to_ego.inverse() @ global_to_ego
        frame_id = f"{scene_id}-{i:03d}"
        # store through float32 so in-memory and on-disk clouds agree bit for bit
        pts_l = to_lidar.apply(pts).astype(np.float32).astype(np.float64)
        clouds[frame_id] = PointCloud(
            pts_l,
            rng.uniform(0, 100, len(pts)).astype(np.float32),
            rng.integers(0, 32, len(pts)).astype(np.float32),
            np.concatenate(labels),
            frame_id,
        )
        frames.append(
            FrameRecord(
                frame_id=frame_id,
                timestamp=t0_us + int(round(t * 1e6)),
                is_keyframe=is_key,
                cloud_path=f"{frame_id}.bin",
                ego_to_global=ego_to_global,
                lidar_to_ego=lidar_to_ego,
                scene_id=scene_id,
                boxes=tuple(boxes) if (is_key or annotate_sweeps) else None,
            )
        )
    return frames, clouds


def make_index(n_scenes: int = 1, seed: int = 0, **scene_kwargs) -> tuple[FrameIndex, dict[str, PointCloud]]:
    scenes, clouds = {}, {}
    for s in range(n_scenes):
        sid = f"scene-{s:04d}"
        frames, cl = make_scene(sid, seed=seed + s, **scene_kwargs)
        scenes[sid] = frames
        clouds.update(cl)
    return FrameIndex(scenes), clouds


def write_dataset(root: Path | str, index: FrameIndex, clouds: dict[str, PointCloud]) -> Path:
    """Write clouds and ``index.json`` under ``root``; returns the index path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for f in index.frames():
        write_cloud(clouds[f.frame_id], root / f.cloud_path)
    path = root / "index.json"
    path.write_text(json.dumps(index.to_json(), indent=1))
    return path
