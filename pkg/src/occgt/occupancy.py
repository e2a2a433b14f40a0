"""Voxelization into binary / semantic occupancy grids and the OCCG file format.

All grid geometry is stored in (z, y, x) order to match tensor layout:
``origin`` and ``voxel_size`` are (z, y, x) and ``dims`` is (D, H, W).
Point clouds stay (x, y, z); ``voxel_indices`` does the flip.

OCCG layout (little-endian)::

    0   magic "OCCG"
    4   version u32 (=1)
    8   flags u32, bit 0 = semantic payload present
    12  m, D, H, W  u32
    28  v_Z, v_H, v_W  f32
    40  origin z, y, x  f32
    52  occupancy bits, ceil(m*D*H*W / 8) bytes, LSB-first,
        bit index ((t*D + z)*H + y)*W + x
    ..  [semantic] m*D*H*W uint8 class ids, same order, 255 = empty
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import UNLABELED, FrameIndex, PointCloud, cloud_loader
from .errors import BadMagicError, OccgError, PayloadLengthError, ValidationError, VersionMismatchError
from .fusion import CloudSource, FusionConfig, fuse, select_frames

MAGIC = b"OCCG"
VERSION = 1
FLAG_SEMANTIC = 1
HEADER = struct.Struct("<4sII4I3f3f")
MAX_VOXELS = 2**31


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    dims: tuple[int, int, int]

    def __post_init__(self) -> None:
        origin = tuple(float(v) for v in self.origin)
        voxel = tuple(float(v) for v in self.voxel_size)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(voxel) != 3 or len(dims) != 3:
            raise ValidationError("grid origin, voxel_size and dims need 3 components each")
        if not all(math.isfinite(v) for v in origin + voxel):
            raise ValidationError("grid geometry must be finite")
        if min(voxel) <= 0:
            raise ValidationError(f"voxel sizes must be > 0, got {voxel}")
        if min(dims) < 1:
            raise ValidationError(f"grid dims must be >= 1, got {dims}")
        if math.prod(dims) > MAX_VOXELS:
            raise ValidationError(f"grid of {math.prod(dims)} voxels exceeds the 2^31 limit")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", voxel)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def default(cls) -> GridSpec:
        """X, Y in [-51.2, 51.2) m, Z in [-5, 3) m, 0.4 m voxels -> (20, 256, 256)."""
        return cls(origin=(-5.0, -51.2, -51.2), voxel_size=(0.4, 0.4, 0.4), dims=(20, 256, 256))

    @classmethod
    def from_bounds(cls, lower_xyz, upper_xyz, voxel_size_zyx) -> GridSpec:
        lo = np.asarray(lower_xyz, dtype=np.float64)[::-1]
        hi = np.asarray(upper_xyz, dtype=np.float64)[::-1]
        vs = np.asarray(voxel_size_zyx, dtype=np.float64)
        dims = np.round((hi - lo) / vs).astype(int)
        return cls(tuple(lo), tuple(vs), tuple(dims))

    @property
    def n_voxels(self) -> int:
        return math.prod(self.dims)

    def as_float32(self) -> GridSpec:
        """Copy with geometry rounded to float32, as stored in OCCG files."""
        f32 = lambda t: tuple(float(np.float32(v)) for v in t)  # noqa: E731
        return GridSpec(f32(self.origin), f32(self.voxel_size), self.dims)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": list(self.voxel_size), "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> GridSpec:
        return cls(tuple(d["origin"]), tuple(d["voxel_size"]), tuple(d["dims"]))


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    spec: GridSpec
    bits: np.ndarray  # bool (D, H, W)

    def __post_init__(self) -> None:
        if self.bits.shape != self.spec.dims or self.bits.dtype != np.bool_:
            raise ValidationError(f"occupancy bits must be bool {self.spec.dims}, got {self.bits.dtype} {self.bits.shape}")

    def __eq__(self, other) -> bool:
        return isinstance(other, OccupancyGrid) and self.spec == other.spec and np.array_equal(self.bits, other.bits)

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))


@dataclass(frozen=True, eq=False)
class SemanticGrid:
    spec: GridSpec
    classes: np.ndarray  # uint8 (D, H, W), 255 = empty/unlabeled

    def __post_init__(self) -> None:
        if self.classes.shape != self.spec.dims or self.classes.dtype != np.uint8:
            raise ValidationError(f"semantic grid must be uint8 {self.spec.dims}")

    def __eq__(self, other) -> bool:
        return isinstance(other, SemanticGrid) and self.spec == other.spec and np.array_equal(self.classes, other.classes)


@dataclass(frozen=True, eq=False)
class OccupancyGrid4D:
    """``m`` binary grids sharing one spec, stored as a bool (m, D, H, W) array.

    ``semantics`` is an optional uint8 array of the same shape.
    """

    spec: GridSpec
    bits: np.ndarray
    semantics: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.bits.ndim != 4 or self.bits.shape[1:] != self.spec.dims or self.bits.dtype != np.bool_:
            raise ValidationError(f"4D occupancy must be bool (m, {self.spec.dims}), got {self.bits.dtype} {self.bits.shape}")
        if self.bits.shape[0] < 1:
            raise ValidationError("4D occupancy needs m >= 1")
        if self.semantics is not None and (self.semantics.shape != self.bits.shape or self.semantics.dtype != np.uint8):
            raise ValidationError("semantic payload must be uint8 with the occupancy shape")

    @property
    def m(self) -> int:
        return self.bits.shape[0]

    @property
    def frames(self) -> list[OccupancyGrid]:
        return [OccupancyGrid(self.spec, self.bits[t]) for t in range(self.m)]

    def semantic_frames(self) -> Optional[list[SemanticGrid]]:
        if self.semantics is None:
            return None
        return [SemanticGrid(self.spec, self.semantics[t]) for t in range(self.m)]

    @classmethod
    def stack(cls, grids: Sequence[OccupancyGrid], semantics: Optional[Sequence[SemanticGrid]] = None) -> OccupancyGrid4D:
        if not grids:
            raise ValidationError("need at least one grid")
        spec = grids[0].spec
        if any(g.spec != spec for g in grids):
            raise ValidationError("all frames must share one GridSpec")
        sem = None
        if semantics is not None:
            if len(semantics) != len(grids) or any(s.spec != spec for s in semantics):
                raise ValidationError("semantic frames must match occupancy frames")
            sem = np.stack([s.classes for s in semantics])
        return cls(spec, np.stack([g.bits for g in grids]), sem)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyGrid4D) or self.spec != other.spec:
            return False
        if (self.semantics is None) != (other.semantics is None):
            return False
        return np.array_equal(self.bits, other.bits) and (
            self.semantics is None or np.array_equal(self.semantics, other.semantics)
        )


# --- voxelization ------------------------------------------------------------


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None or threads == 0:
        return os.cpu_count() or 1
    if threads < 0:
        raise ValidationError("threads must be >= 0 (0 = auto)")
    return threads


def voxel_indices(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Integer (z, y, x) cell of each (x, y, z) point and an in-grid mask.

    Cells are half-open: a point on a grid's upper face is outside.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    zyx = pts[:, ::-1]
    idx = np.floor((zyx - np.asarray(spec.origin)) / np.asarray(spec.voxel_size))
    inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    return idx[inside].astype(np.int64), inside


def _linear(idx: np.ndarray, dims) -> np.ndarray:
    D, H, W = dims
    return (idx[:, 0] * H + idx[:, 1]) * W + idx[:, 2]


def _chunks(n: int, parts: int) -> list[slice]:
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds, bounds[1:])]


def voxelize_points(points: np.ndarray, spec: GridSpec, threads: Optional[int] = 1) -> OccupancyGrid:
    """Binary grid with every voxel containing at least one point set.

    With several threads each chunk of points fills its own mask and the
    masks are OR-ed, so the result does not depend on the thread count.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_threads = min(resolve_threads(threads), max(1, len(pts)))

    def work(sl: slice) -> np.ndarray:
        idx, _ = voxel_indices(pts[sl], spec)
        flat = np.zeros(spec.n_voxels, dtype=bool)
        flat[_linear(idx, spec.dims)] = True
        return flat

    if n_threads == 1:
        flat = work(slice(None))
    else:
        with ThreadPoolExecutor(n_threads) as pool:
            masks = list(pool.map(work, _chunks(len(pts), n_threads)))
        flat = np.logical_or.reduce(masks)
    return OccupancyGrid(spec, flat.reshape(spec.dims))


def voxelize(cloud: PointCloud, spec: GridSpec, threads: Optional[int] = 1) -> OccupancyGrid:
    return voxelize_points(cloud.points, spec, threads)


def voxelize_semantic(cloud: PointCloud, spec: GridSpec) -> SemanticGrid:
    """Per-voxel majority label, ignoring 255; ties go to the smaller class id.

    Occupied voxels holding only unlabeled points get 255, as do empty ones.
    """
    if cloud.labels is None:
        raise ValidationError(f"cloud {cloud.source_frame!r} has no per-point labels")
    idx, inside = voxel_indices(cloud.points, spec)
    lin = _linear(idx, spec.dims)
    labels = cloud.labels[inside].astype(np.int64)
    labeled = labels != UNLABELED
    lin, labels = lin[labeled], labels[labeled]

    out = np.full(spec.n_voxels, UNLABELED, dtype=np.uint8)
    if len(lin):
        keys, counts = np.unique(lin * 256 + labels, return_counts=True)
        vox, cls = keys // 256, keys % 256
        # best first within each voxel: highest count, then smallest class id
        order = np.lexsort((cls, -counts, vox))
        vox, cls = vox[order], cls[order]
        first = np.ones(len(vox), dtype=bool)
        first[1:] = vox[1:] != vox[:-1]
        out[vox[first]] = cls[first]
    return SemanticGrid(spec, out.reshape(spec.dims))


def build_4d_labels(
    index: FrameIndex,
    reference_id: str,
    m: int,
    fusion_cfg: FusionConfig,
    spec: GridSpec,
    clouds: Optional[CloudSource] = None,
    semantic: bool = False,
    threads: Optional[int] = 1,
) -> OccupancyGrid4D:
    """Occupancy sequence for the reference keyframe and the next ``m - 1`` keyframes.

    Frame ``i`` fuses around the ``i``-th keyframe and is voxelized in that
    keyframe's own ego frame. ``m = 1`` gives the single static 3D label.
    Clouds default to the files named in the index.
    """
    if m < 1:
        raise ValidationError(f"m must be >= 1, got {m}")
    ref = index.frame(reference_id)
    if not ref.is_keyframe:
        raise ValidationError(f"reference frame {reference_id!r} is not a keyframe")
    keys = index.keyframes(ref.scene_id)
    start = next(i for i, f in enumerate(keys) if f.frame_id == reference_id)
    if start + m > len(keys):
        raise ValidationError(
            f"scene {ref.scene_id!r} has {len(keys) - start} keyframes from {reference_id!r}, need m={m}"
        )
    if clouds is None:
        clouds = cloud_loader(index)
    grids, sems = [], []
    for key in keys[start: start + m]:
        fused = fuse(select_frames(index, key.frame_id, fusion_cfg), clouds, fusion_cfg)
        grids.append(voxelize(fused, spec, threads))
        if semantic:
            sems.append(voxelize_semantic(fused, spec))
    return OccupancyGrid4D.stack(grids, sems if semantic else None)


# --- OCCG I/O ----------------------------------------------------------------


def occg_bytes(grid: OccupancyGrid4D) -> bytes:
    m = grid.m
    D, H, W = grid.spec.dims
    flags = FLAG_SEMANTIC if grid.semantics is not None else 0
    header = HEADER.pack(MAGIC, VERSION, flags, m, D, H, W, *grid.spec.voxel_size, *grid.spec.origin)
    payload = np.packbits(grid.bits.reshape(-1), bitorder="little").tobytes()
    parts = [header, payload]
    if grid.semantics is not None:
        parts.append(np.ascontiguousarray(grid.semantics, dtype=np.uint8).tobytes())
    return b"".join(parts)


def write_occg(grid: OccupancyGrid4D, path: Path | str, semantic: Optional[Sequence[SemanticGrid]] = None) -> None:
    """Write ``grid``; ``semantic`` (one grid per timestep) overrides ``grid.semantics``.

    Grid geometry is stored as float32.
    """
    if semantic is not None:
        grid = OccupancyGrid4D.stack(grid.frames, semantic)
    Path(path).write_bytes(occg_bytes(grid))


def parse_occg_header(data: bytes) -> dict:
    if len(data) < len(MAGIC):
        raise PayloadLengthError("file shorter than the OCCG magic", len(MAGIC), len(data))
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) >= 8:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != VERSION:
            raise VersionMismatchError(f"OCCG version {version} not supported (expected {VERSION})")
    if len(data) < HEADER.size:
        raise PayloadLengthError("truncated OCCG header", HEADER.size, len(data))
    _, version, flags, m, D, H, W, vz, vh, vw, oz, oy, ox = HEADER.unpack_from(data)
    return {"version": version, "flags": flags, "m": m, "dims": (D, H, W),
            "voxel_size": (vz, vh, vw), "origin": (oz, oy, ox)}


def occg_from_bytes(data: bytes) -> OccupancyGrid4D:
    h = parse_occg_header(data)
    m, dims = h["m"], h["dims"]
    n = m * math.prod(dims)
    n_bits = (n + 7) // 8
    semantic = bool(h["flags"] & FLAG_SEMANTIC)
    expected = HEADER.size + n_bits + (n if semantic else 0)
    if len(data) != expected:
        raise PayloadLengthError("OCCG payload length mismatch", expected, len(data))
    try:
        spec = GridSpec(h["origin"], h["voxel_size"], dims)
    except ValidationError as exc:
        raise OccgError(f"invalid OCCG geometry: {exc}") from None
    bits = np.unpackbits(np.frombuffer(data, np.uint8, n_bits, HEADER.size), count=n, bitorder="little")
    sem = None
    if semantic:
        sem = np.frombuffer(data, np.uint8, n, HEADER.size + n_bits).reshape((m, *dims)).copy()
    return OccupancyGrid4D(spec, bits.astype(bool).reshape((m, *dims)), sem)


def read_occg(path: Path | str) -> OccupancyGrid4D:
    """Read an OCCG file; semantics (if stored) are on ``.semantics``."""
    return occg_from_bytes(Path(path).read_bytes())


# --- probability tensors -----------------------------------------------------

PROBS_HEADER_FLOATS = 8


def write_probs(probs: np.ndarray, spec: GridSpec, path: Path | str) -> None:
    """Raw float32 tensor with an 8-float header ``m, D, H, W, v_Z, v_H, v_W, 0``."""
    probs = np.asarray(probs, dtype=np.float32)
    if probs.ndim != 4 or probs.shape[1:] != spec.dims:
        raise ValidationError(f"probabilities must be (m, {spec.dims}), got {probs.shape}")
    header = np.array([*probs.shape, *spec.voxel_size, 0.0], dtype="<f4")
    Path(path).write_bytes(header.tobytes() + probs.astype("<f4").tobytes())


def read_probs(path: Path | str) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Return the (m, D, H, W) float32 tensor and the voxel sizes from a probs file."""
    data = Path(path).read_bytes()
    hb = 4 * PROBS_HEADER_FLOATS
    if len(data) < hb:
        raise PayloadLengthError("truncated probability header", hb, len(data))
    header = np.frombuffer(data, "<f4", PROBS_HEADER_FLOATS)
    shape = tuple(int(v) for v in header[:4])
    if any(s < 1 for s in shape) or not np.all(header[:4] == np.round(header[:4])):
        raise PayloadLengthError(f"invalid probability tensor shape {header[:4]}", hb, len(data))
    expected = hb + 4 * math.prod(shape)
    if len(data) != expected:
        raise PayloadLengthError("probability payload length mismatch", expected, len(data))
    probs = np.frombuffer(data, "<f4", math.prod(shape), hb).reshape(shape)
    return probs.copy(), tuple(float(v) for v in header[4:7])
