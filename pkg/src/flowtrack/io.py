"""On-disk formats: KITTI tracking labels, detection/ego/camera files,
run configuration, model checkpoints, dataset directories.

Readers reject rather than guess: unknown config keys, wrong arity, or a
malformed number is an error naming the offender. Floats are printed with
17 significant digits so write(read(file)) is byte-identical and
read(write(data)) loses nothing.

KITTI label records keep the file's camera-frame fields verbatim;
conversion to the ego frame happens on demand:

    ego x (forward) =  camera z        length = l
    ego y (left)    = -camera x        width  = w
    ego z (up)      = -camera y + h/2  height = h   (location is the
    ego yaw = wrap(-rotation_y - pi/2)               bottom-face center)
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .assoc import GateConfig
from .core import (
    Box2D,
    Box3D,
    BoxTrack,
    CameraModel,
    Detection,
    EgoMotion,
    LabeledBox,
    TrackSequence,
    Trajectory,
    wrap_angle,
)
from .errors import ConfigError, DataFormatError
from .features import BevConfig, FeatureConfig, FvConfig
from .scoring import (
    CostModel,
    ScorerConfig,
    model_from_tensors,
    model_to_bytes,
    tensors_from_bytes,
)


def _fmt(value: float) -> str:
    return f"{float(value):.17g}"


def atomic_write(path: str, data) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- KITTI tracking labels ----------------------------------------------------

@dataclass(frozen=True)
class KittiRecord:
    """One label line, camera-frame fields kept verbatim."""

    frame: int
    track_id: int
    type: str
    truncated: float
    occluded: float
    alpha: float
    bbox_left: float
    bbox_top: float
    bbox_right: float
    bbox_bottom: float
    height: float
    width: float
    length: float
    loc_x: float
    loc_y: float
    loc_z: float
    rotation_y: float
    score: float | None = None

    @property
    def dont_care(self) -> bool:
        return self.type == "DontCare"


def parse_kitti_line(line: str, lineno: int = 0) -> KittiRecord:
    parts = line.split()
    if len(parts) not in (17, 18):
        raise DataFormatError(
            f"line {lineno}: expected 17 fields (18 with score), got {len(parts)}"
        )
    try:
        numbers = [float(p) for p in parts[3:]]
        return KittiRecord(
            frame=int(parts[0]), track_id=int(parts[1]), type=parts[2],
            truncated=numbers[0], occluded=numbers[1], alpha=numbers[2],
            bbox_left=numbers[3], bbox_top=numbers[4],
            bbox_right=numbers[5], bbox_bottom=numbers[6],
            height=numbers[7], width=numbers[8], length=numbers[9],
            loc_x=numbers[10], loc_y=numbers[11], loc_z=numbers[12],
            rotation_y=numbers[13],
            score=numbers[14] if len(parts) == 18 else None,
        )
    except ValueError as exc:
        raise DataFormatError(f"line {lineno}: {exc}") from None


def read_kitti_labels(path: str) -> list[KittiRecord]:
    """Parse a label file; frames need not be monotone (sorted on load)."""
    records = []
    with open(path, "r") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            records.append(parse_kitti_line(line, lineno))
    records.sort(key=lambda r: r.frame)
    return records


def format_kitti_record(rec: KittiRecord) -> str:
    fields = [str(rec.frame), str(rec.track_id), rec.type]
    fields += [_fmt(v) for v in (
        rec.truncated, rec.occluded, rec.alpha,
        rec.bbox_left, rec.bbox_top, rec.bbox_right, rec.bbox_bottom,
        rec.height, rec.width, rec.length,
        rec.loc_x, rec.loc_y, rec.loc_z, rec.rotation_y)]
    if rec.score is not None:
        fields.append(_fmt(rec.score))
    return " ".join(fields)


def write_kitti_labels(records: list[KittiRecord], path: str) -> None:
    atomic_write(path, "".join(format_kitti_record(r) + "\n" for r in records))


def record_to_boxes(rec: KittiRecord) -> tuple[Box3D, Box2D]:
    """Camera-frame record -> ego-frame 3D box + image-plane 2D box."""
    box3d = Box3D(
        center_x=rec.loc_z,
        center_y=-rec.loc_x,
        center_z=-rec.loc_y + rec.height / 2.0,
        length=rec.length,
        width=rec.width,
        height=rec.height,
        yaw=wrap_angle(-rec.rotation_y - math.pi / 2.0),
    )
    box2d = Box2D(rec.bbox_left, rec.bbox_top, rec.bbox_right, rec.bbox_bottom)
    return box3d, box2d


def boxes_to_record(frame: int, track_id: int, box3d: Box3D, box2d: Box2D,
                    type_name: str = "Car", score: float | None = None) -> KittiRecord:
    """Inverse of record_to_boxes; occlusion fields are placeholders."""
    return KittiRecord(
        frame=frame, track_id=track_id, type=type_name,
        truncated=0.0, occluded=0.0, alpha=-10.0,
        bbox_left=box2d.left, bbox_top=box2d.top,
        bbox_right=box2d.right, bbox_bottom=box2d.bottom,
        height=box3d.height, width=box3d.width, length=box3d.length,
        loc_x=-box3d.center_y,
        loc_y=-box3d.center_z + box3d.height / 2.0,
        loc_z=box3d.center_x,
        rotation_y=wrap_angle(-box3d.yaw - math.pi / 2.0),
        score=score,
    )


def records_to_ground_truth(records: list[KittiRecord],
                            types: tuple[str, ...] = ("Car",)
                            ) -> tuple[list[BoxTrack], list[KittiRecord]]:
    """Group consumable records into labeled tracks; DontCare kept aside."""
    dont_care = [r for r in records if r.dont_care]
    by_track: dict[int, list[KittiRecord]] = {}
    for rec in records:
        if rec.dont_care or rec.type not in types:
            continue
        by_track.setdefault(rec.track_id, []).append(rec)
    tracks = []
    for track_id in sorted(by_track):
        entries = []
        for rec in sorted(by_track[track_id], key=lambda r: r.frame):
            box3d, box2d = record_to_boxes(rec)
            entries.append(LabeledBox(rec.frame, box3d, box2d))
        tracks.append(BoxTrack(track_id, tuple(entries)))
    return tracks, dont_care


def tracks_to_records(tracks: list[BoxTrack], type_name: str = "Car") -> list[KittiRecord]:
    records = []
    for track in tracks:
        for entry in track.entries:
            records.append(boxes_to_record(entry.frame_idx, track.track_id,
                                           entry.box3d, entry.box2d, type_name))
    records.sort(key=lambda r: (r.frame, r.track_id))
    return records


def trajectories_to_records(trajectories: list[Trajectory], seq: TrackSequence,
                            type_name: str = "Car") -> list[KittiRecord]:
    """Decoded trajectories in KITTI result layout (with a unit score)."""
    records = []
    for traj in trajectories:
        for frame_idx, det_id in traj.entries:
            det = seq.detection(det_id)
            records.append(boxes_to_record(frame_idx, traj.track_id,
                                           det.box3d, det.box2d, type_name,
                                           score=1.0))
    records.sort(key=lambda r: (r.frame, r.track_id))
    return records


# --- detection / ego / camera files -------------------------------------------

def write_detections(seq: TrackSequence, path: str) -> None:
    """One detection per line: frame det_id 3D box (7) 2D box (4) appearance."""
    lines = []
    for frame in seq.frames:
        for det in frame:
            b3, b2 = det.box3d, det.box2d
            values = [b3.center_x, b3.center_y, b3.center_z,
                      b3.length, b3.width, b3.height, b3.yaw,
                      b2.left, b2.top, b2.right, b2.bottom]
            values += det.appearance_flat.tolist()
            lines.append(f"{det.frame_idx} {det.det_id} "
                         + " ".join(_fmt(v) for v in values))
    atomic_write(path, "".join(line + "\n" for line in lines))


def read_detections(path: str, blocks: int, block_len: int) -> list[Detection]:
    expected = 2 + 7 + 4 + blocks * block_len
    detections = []
    with open(path, "r") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != expected:
                raise DataFormatError(
                    f"line {lineno}: expected {expected} fields for appearance "
                    f"shape ({blocks}, {block_len}), got {len(parts)}"
                )
            try:
                frame_idx = int(parts[0])
                det_id = int(parts[1])
                vals = [float(p) for p in parts[2:]]
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
            box3d = Box3D(*vals[0:7])
            box2d = Box2D(*vals[7:11])
            appearance = np.array(vals[11:]).reshape(blocks, block_len)
            detections.append(Detection(det_id, frame_idx, box3d, box2d, appearance))
    return detections


def write_ego(ego: tuple[EgoMotion, ...], path: str) -> None:
    atomic_write(path, "".join(
        f"{_fmt(e.vx)} {_fmt(e.vy)} {_fmt(e.frame_dt)}\n" for e in ego))


def read_ego(path: str) -> tuple[EgoMotion, ...]:
    out = []
    with open(path, "r") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataFormatError(f"line {lineno}: expected vx vy dt, got {len(parts)} fields")
            try:
                out.append(EgoMotion(*(float(p) for p in parts)))
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
    return tuple(out)


def write_camera(camera: CameraModel, path: str) -> None:
    atomic_write(path, " ".join(_fmt(v) for v in (
        camera.focal_u, camera.focal_v, camera.principal_u, camera.principal_v,
        camera.image_width, camera.image_height)) + "\n")


def read_camera(path: str) -> CameraModel:
    with open(path, "r") as handle:
        parts = handle.read().split()
    if len(parts) != 6:
        raise DataFormatError(f"camera file needs 6 fields, got {len(parts)}")
    try:
        return CameraModel(*(float(p) for p in parts))
    except ValueError as exc:
        raise DataFormatError(str(exc)) from None


# --- run configuration ---------------------------------------------------------

@dataclass(frozen=True)
class MetricsSettings:
    iou_threshold: float = 0.5
    mode: str = "iou2d"
    dist_threshold_m: float = 1.0


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    iterations: int = 200
    batch_size: int = 8
    window_len: int = 8
    seed: int = 0
    init_std: float = 1e-3


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig
    scorer: ScorerConfig
    train: TrainSettings
    gate: GateConfig
    metrics: MetricsSettings
    gold_iou_threshold: float = 0.5

    @staticmethod
    def defaults() -> "RunConfig":
        return RunConfig(FeatureConfig(), ScorerConfig(), TrainSettings(),
                         GateConfig(), MetricsSettings())


def _parse_optional_float(text: str):
    if text.lower() == "none":
        return None
    return float(text)


# key -> (section path, field, parser)
_CONFIG_KEYS: dict[str, tuple[str, str, object]] = {
    "features.bev.rows": ("features.bev", "rows", int),
    "features.bev.cols": ("features.bev", "cols", int),
    "features.bev.cell_m": ("features.bev", "cell_m", float),
    "features.bev.x_min": ("features.bev", "x_min", float),
    "features.bev.y_min": ("features.bev", "y_min", float),
    "features.fv.rows": ("features.fv", "rows", int),
    "features.fv.cols": ("features.fv", "cols", int),
    "features.blocks": ("features", "appearance_blocks", int),
    "features.block_len": ("features", "block_len", int),
    "scorer.det_hidden": ("scorer", "det_hidden", int),
    "scorer.bev_hidden": ("scorer", "bev_hidden", int),
    "scorer.fv_hidden": ("scorer", "fv_hidden", int),
    "train.lr": ("train", "lr", float),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.epsilon": ("train", "epsilon", float),
    "train.iterations": ("train", "iterations", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.window_len": ("train", "window_len", int),
    "train.seed": ("train", "seed", int),
    "train.init_std": ("train", "init_std", float),
    "gate.radius_m": ("gate", "radius_m", _parse_optional_float),
    "metrics.iou_threshold": ("metrics", "iou_threshold", float),
    "metrics.mode": ("metrics", "mode", str),
    "metrics.dist_threshold_m": ("metrics", "dist_threshold_m", float),
    "gold.iou_threshold": ("", "gold_iou_threshold", float),
}


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys are errors."""
    overrides: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: missing value for key {key!r}")
        _, _, parser = _CONFIG_KEYS[key]
        try:
            overrides[key] = parser(value)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: malformed value {value!r} for key {key!r}"
            ) from None

    def section(path: str) -> dict[str, object]:
        return {field: v for k, (p, field, _) in _CONFIG_KEYS.items()
                if p == path and k in overrides
                for v in [overrides[k]]}

    if "metrics.mode" in overrides and overrides["metrics.mode"] not in ("iou2d", "dist3d"):
        raise ConfigError(f"metrics.mode must be iou2d or dist3d, got {overrides['metrics.mode']!r}")

    features = FeatureConfig(
        bev=BevConfig(**section("features.bev")),
        fv=FvConfig(**section("features.fv")),
        **section("features"),
    )
    return RunConfig(
        features=features,
        scorer=ScorerConfig(**section("scorer")),
        train=TrainSettings(**section("train")),
        gate=GateConfig(**section("gate")),
        metrics=MetricsSettings(**section("metrics")),
        **section(""),
    )


def read_config(path: str) -> RunConfig:
    with open(path, "r") as handle:
        return parse_config(handle.read())


def _config_value(cfg: RunConfig, key: str):
    path, field, _ = _CONFIG_KEYS[key]
    obj = cfg
    if path:
        for part in path.split("."):
            obj = getattr(obj, part)
    return getattr(obj, field)


def echo_config(cfg: RunConfig) -> str:
    """Canonical rendering of every key; parse(echo(cfg)) == cfg."""
    lines = []
    for key in _CONFIG_KEYS:
        value = _config_value(cfg, key)
        if value is None:
            rendered = "none"
        elif isinstance(value, float):
            rendered = _fmt(value)
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(model: CostModel, path: str) -> None:
    atomic_write(path, model_to_bytes(model))


def load_checkpoint(path: str) -> CostModel:
    with open(path, "rb") as handle:
        return model_from_tensors(tensors_from_bytes(handle.read()))


# --- dataset directories ---------------------------------------------------------

def sequence_names(directory: str) -> list[str]:
    names = [f[:-len(".dets.txt")] for f in os.listdir(directory)
             if f.endswith(".dets.txt")]
    return sorted(names)


def write_scenario(directory: str, name: str, seq: TrackSequence,
                   gt_tracks: list[BoxTrack] | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    write_detections(seq, os.path.join(directory, f"{name}.dets.txt"))
    write_ego(seq.ego, os.path.join(directory, f"{name}.ego.txt"))
    write_camera(seq.camera, os.path.join(directory, f"{name}.camera.txt"))
    if gt_tracks is not None:
        write_kitti_labels(tracks_to_records(gt_tracks),
                           os.path.join(directory, f"{name}.gt.txt"))


def read_scenario(directory: str, name: str, blocks: int,
                  block_len: int) -> tuple[TrackSequence, list[BoxTrack] | None]:
    dets = read_detections(os.path.join(directory, f"{name}.dets.txt"),
                           blocks, block_len)
    ego = read_ego(os.path.join(directory, f"{name}.ego.txt"))
    camera = read_camera(os.path.join(directory, f"{name}.camera.txt"))
    n_frames = len(ego)
    frames: list[list[Detection]] = [[] for _ in range(n_frames)]
    for det in dets:
        if det.frame_idx >= n_frames:
            raise DataFormatError(
                f"detection {det.det_id} names frame {det.frame_idx} but the "
                f"ego file defines {n_frames} frames"
            )
        frames[det.frame_idx].append(det)
    seq = TrackSequence(tuple(tuple(f) for f in frames), ego, camera)
    gt_path = os.path.join(directory, f"{name}.gt.txt")
    gt_tracks = None
    if os.path.exists(gt_path):
        gt_tracks, _ = records_to_ground_truth(read_kitti_labels(gt_path))
    return seq, gt_tracks
