"""Command-line entry point: ``occgt <subcommand> ...``.

Exit codes: 0 success, 1 validation/usage errors, 2 I/O or file-format errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence


from .dataset import RECORD_SIZE, cloud_loader, load_cloud, load_index, sample_subset, write_cloud
from .errors import FormatError, OccgtError, ValidationError
from .fusion import FusionConfig, fuse, select_frames
from .loss import FocalLossParams, focal_loss
from .metrics import metrics_report
from .occupancy import (
    MAGIC,
    GridSpec,
    OccupancyGrid4D,
    build_4d_labels,
    read_occg,
    read_probs,
    write_occg,
    write_probs,
)
from .synthetic import Track, make_index, write_dataset
from .toy_predictor import ToyConfig, make_box_world, train_toy

logger = logging.getLogger("occgt")


@dataclass
class PipelineConfig:
    grid: GridSpec = field(default_factory=GridSpec.default)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: FocalLossParams = field(default_factory=FocalLossParams)
    m: int = 1
    threads: int = 0  # 0 = auto

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        cfg = cls()
        if "grid" in d:
            cfg.grid = GridSpec.from_dict(d["grid"])
        if "fusion" in d:
            cfg.fusion = FusionConfig(**d["fusion"])
        if "loss" in d:
            cfg.loss = FocalLossParams(**d["loss"])
        if "m" in d:
            cfg.m = int(d["m"])
        if "threads" in d:
            cfg.threads = 0 if d["threads"] in (None, "auto") else int(d["threads"])
        if cfg.m < 1:
            raise ValidationError(f"m must be >= 1, got {cfg.m}")
        return cfg

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "fusion": asdict(self.fusion),
            "loss": self.loss.to_dict(),
            "m": self.m,
            "threads": self.threads or "auto",
        }


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    try:
        return PipelineConfig.from_dict(doc)
    except (TypeError, KeyError) as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    fusion_kw = {
        "n_keyframes_before": getattr(args, "before", None),
        "n_keyframes_after": getattr(args, "after", None),
        "include_sweeps": getattr(args, "sweeps", None),
        "dynamic_aware": getattr(args, "dynamic", None),
        "max_range": getattr(args, "max_range", None),
    }
    fusion_kw = {k: v for k, v in fusion_kw.items() if v is not None}
    if fusion_kw:
        cfg.fusion = replace(cfg.fusion, **fusion_kw)
    if getattr(args, "m", None) is not None:
        cfg.m = args.m
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    return cfg


def _echo_config(out: Path, cfg: dict) -> None:
    """Write the effective config next to (file output) or inside (dir output) ``out``."""
    target = out / "config.json" if out.is_dir() else out.with_name(out.name + ".config.json")
    target.write_text(json.dumps(cfg, indent=2))


# --- subcommands -------------------------------------------------------------


def cmd_labels4d(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    index = load_index(args.index)
    grid = build_4d_labels(index, args.frame, cfg.m, cfg.fusion, cfg.grid,
                           semantic=args.semantic, threads=cfg.threads)
    out = Path(args.out)
    write_occg(grid, out)
    _echo_config(out, cfg.to_dict())
    print(f"wrote {out}: m={grid.m} dims={grid.spec.dims} occupied={int(grid.bits.sum())}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    index = load_index(args.index)
    frames = select_frames(index, args.frame, cfg.fusion)
    cloud = fuse(frames, cloud_loader(index), cfg.fusion)
    out = Path(args.out)
    write_cloud(cloud, out)
    _echo_config(out, cfg.to_dict())
    print(f"wrote {out}: {len(cloud)} points from {len(frames.members)} frames")
    return 0


def cmd_eval_loss(args) -> int:
    probs, _ = read_probs(args.pred)
    gt = read_occg(args.gt)
    params = FocalLossParams(alpha=args.alpha, gamma=args.gamma, clamp_eps=args.clamp_eps, mode=args.mode)
    print(f"{focal_loss(probs, gt, params):.10g}")
    return 0


def cmd_eval_metrics(args) -> int:
    pred, gt = read_occg(args.pred), read_occg(args.gt)
    report = metrics_report(pred, gt, semantic=args.semantic, k=args.classes, threads=args.threads)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_train_toy(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ToyConfig(seed=args.seed, iters=args.iters, lr=args.lr)
    target = make_box_world(cfg.dims, cfg.seed, cfg.n_boxes, cfg.m)
    result = train_toy(target, cfg)
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(result.history):
            w.writerow([i, repr(loss)])
    write_occg(OccupancyGrid4D(target.spec, result.probs > 0.5), out / "prediction.occg")
    write_occg(target, out / "target.occg")
    write_probs(result.probs, target.spec, out / "prediction.probs")
    cfg_dict = asdict(cfg)
    cfg_dict["loss"] = cfg.loss.to_dict()
    _echo_config(out, cfg_dict)
    print(f"loss {result.history[0]:.6g} -> {result.history[-1]:.6g} over {cfg.iters} iterations")
    return 0


def cmd_split(args) -> int:
    index = load_index(args.index)
    subset = sample_subset(index, args.fraction, args.seed)
    out = Path(args.out)
    doc = subset.to_json()
    # keep cloud paths valid relative to the new index location
    rel = os.path.relpath(index.root.resolve(), out.resolve().parent)
    for scene in doc["scenes"]:
        for fr in scene["frames"]:
            fr["cloud_path"] = os.path.normpath(os.path.join(rel, fr["cloud_path"]))
    out.write_text(json.dumps(doc, indent=1))
    _echo_config(out, {"fraction": args.fraction, "seed": args.seed, "source": str(args.index)})
    print(f"wrote {out}: {len(subset)} of {len(index)} scenes")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.file)
    data = path.read_bytes()
    if data[:4] == MAGIC:
        g = read_occg(path)
        print("format: OCCG v1")
        print(f"m: {g.m}")
        print(f"dims (D, H, W): {g.spec.dims}")
        print("voxel size (z, y, x): " + ", ".join(f"{v:.6g}" for v in g.spec.voxel_size))
        print("origin (z, y, x): " + ", ".join(f"{v:.6g}" for v in g.spec.origin))
        print(f"semantic payload: {'yes' if g.semantics is not None else 'no'}")
        print(f"occupied voxels: {int(g.bits.sum())}")
        print(f"occupancy fraction: {g.bits.mean():.6f}")
        for t in range(g.m):
            print(f"  t={t}: fraction {g.bits[t].mean():.6f}")
    elif path.suffix == ".probs":
        probs, vs = read_probs(path)
        print("format: probability tensor (float32)")
        print(f"shape (m, D, H, W): {probs.shape}")
        print("voxel size (z, y, x): " + ", ".join(f"{v:.6g}" for v in vs))
        print(f"min/mean/max: {probs.min():.6g} / {probs.mean():.6g} / {probs.max():.6g}")
    else:
        cloud = load_cloud(path)
        print(f"format: point cloud ({RECORD_SIZE}-byte records)")
        print(f"points: {len(cloud)}")
        print(f"dropped non-finite: {cloud.dropped}")
        print(f"labels: {'yes' if cloud.labels is not None else 'no'}")
        if len(cloud):
            lo, hi = cloud.points.min(0), cloud.points.max(0)
            print("min (x, y, z): " + ", ".join(f"{v:.4f}" for v in lo))
            print("max (x, y, z): " + ", ".join(f"{v:.4f}" for v in hi))
    return 0


def cmd_synth(args) -> int:
    tracks = tuple(
        Track(f"car-{i}", start=(8.0 + 6.0 * i, 3.5 * (-1) ** i, 0.8), velocity=(2.0 + i, 0.0))
        for i in range(args.moving)
    )
    index, clouds = make_index(args.scenes, seed=args.seed, n_keyframes=args.keyframes,
                               sweeps_between=args.sweeps_between, tracks=tracks)
    path = write_dataset(args.out, index, clouds)
    print(f"wrote {path}: {len(index)} scenes, {sum(len(f) for f in index.scenes.values())} frames")
    return 0


# --- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_fusion_flags(p) -> None:
    p.add_argument("--index", required=True)
    p.add_argument("--frame", required=True, help="reference keyframe id")
    p.add_argument("--config", help="PipelineConfig JSON; flags override it")
    p.add_argument("--out", required=True)
    p.add_argument("--before", type=int, help="keyframes before the reference")
    p.add_argument("--after", type=int, help="keyframes after the reference")
    p.add_argument("--sweeps", action=argparse.BooleanOptionalAction, default=None,
                   help="include non-keyframes between the selected keyframes")
    p.add_argument("--dynamic", action=argparse.BooleanOptionalAction, default=None,
                   help="box-aware fusion of annotated objects")
    p.add_argument("--max-range", type=float)
    p.add_argument("--threads", type=int, help="worker threads (0 = auto)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="occgt", description="4D occupancy labels from LiDAR sequences, plus loss, metrics and a toy decoder.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("labels4d", help="fuse, voxelize and write 4D occupancy labels")
    _add_fusion_flags(p)
    p.add_argument("--m", type=int, help="number of timesteps")
    p.add_argument("--semantic", action="store_true", help="also store per-voxel majority labels")
    p.set_defaults(func=cmd_labels4d)

    p = sub.add_parser("fuse", help="write the fused point cloud of one reference frame")
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval-loss", help="focal loss of a probability tensor against OCCG labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--clamp-eps", type=float, default=1e-7)
    p.add_argument("--mode", choices=["standard", "paper_literal"], default="standard")
    p.set_defaults(func=cmd_eval_loss)

    p = sub.add_parser("eval-metrics", help="IoU / mIoU report for two OCCG files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--semantic", action="store_true")
    p.add_argument("--classes", type=int, default=17)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval_metrics)

    p = sub.add_parser("train-toy", help="train the toy decoder on a synthetic box world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=ToyConfig.lr)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("split", help="scene-level label-efficiency subset of an index")
    p.add_argument("--index", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="write a small synthetic dataset (index.json + clouds)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--keyframes", type=int, default=5, help="keyframes per scene")
    p.add_argument("--sweeps-between", type=int, default=2)
    p.add_argument("--moving", type=int, default=1, help="moving annotated objects per scene")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="print the header of an OCCG, probability or cloud file")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OccgtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
