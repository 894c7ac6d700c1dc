"""Seeded synthetic driving scenes for desk-scale experiments.

Vehicles move at constant world velocity along lane-consistent headings
(optionally with one smooth lane change); the observer drives straight
ahead at a fixed speed. Ground truth lives in observer-relative
coordinates. Candidate detections are the ground-truth boxes corrupted by
position/size/yaw noise, dropped with a miss probability, and mixed with
uniformly placed clutter. Everything is a pure function of the seed.

Each vehicle carries a fixed appearance latent: a unit-norm random vector
drawn in the nonnegative orthant (histogram-style affinities downstream
need nonnegative inputs). Detection appearance adds Gaussian noise with
expected norm sigma_app (per component sigma_app/sqrt(dim)), clips at
zero, and re-blocks into the configured block layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    Box2D,
    Box3D,
    BoxTrack,
    CameraModel,
    Detection,
    EgoMotion,
    LabeledBox,
    TrackSequence,
)
from .errors import DataFormatError

DEFAULT_CAMERA = CameraModel(focal_u=720.0, focal_v=720.0,
                             principal_u=621.0, principal_v=187.5,
                             image_width=1242.0, image_height=375.0)

# visibility window in relative coordinates
_X_VISIBLE = (3.0, 42.0)
_Y_VISIBLE = 16.0
_MIN_BOX2D_AREA = 60.0  # px^2

_LANE_CHANGE_DURATION = 1.5  # seconds


@dataclass(frozen=True)
class ScenarioConfig:
    n_vehicles: int = 6
    n_frames: int = 40
    seed: int = 0
    lane_width: float = 3.5
    lane_count: int = 4
    frac_forward: float = 0.5
    frac_oncoming: float = 0.3
    frac_lane_change: float = 0.2
    ego_speed: float = 10.0
    frame_dt: float = 0.1
    speed_range: tuple[float, float] = (6.0, 14.0)
    sigma_pos: float = 0.0
    sigma_size: float = 0.0
    sigma_yaw: float = 0.0
    miss_prob: float = 0.0
    clutter_rate: float = 0.0
    appearance_blocks: int = 5
    block_len: int = 16
    sigma_app: float = 0.0

    def __post_init__(self):
        for p in (self.frac_forward, self.frac_oncoming, self.frac_lane_change,
                  self.miss_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        for s in (self.sigma_pos, self.sigma_size, self.sigma_yaw,
                  self.sigma_app, self.clutter_rate):
            if s < 0:
                raise ValueError("noise parameters must be nonnegative")
        if self.n_vehicles < 0 or self.n_frames <= 0:
            raise ValueError("need a positive frame count")

    @property
    def appearance_dim(self) -> int:
        return self.appearance_blocks * self.block_len

    def max_step_m(self) -> float:
        """Upper bound on per-frame relative displacement of any GT box."""
        lane_rate = self.lane_width / _LANE_CHANGE_DURATION
        return (self.speed_range[1] + self.ego_speed + lane_rate) * self.frame_dt * 1.001


@dataclass(frozen=True)
class _VehiclePlan:
    kind: str            # "forward" | "oncoming" | "lane_change"
    x0: float            # world x at frame 0
    y0: float            # world y (lane center)
    vx: float
    length: float
    width: float
    height: float
    lane_shift: float    # signed lateral offset target (lane_change only)
    shift_start: float   # seconds into the sequence


def _lane_centers(cfg: ScenarioConfig) -> np.ndarray:
    return (np.arange(cfg.lane_count) - 1.0) * cfg.lane_width


def _smoothstep(t: float) -> float:
    t = min(max(t, 0.0), 1.0)
    return t * t * (3.0 - 2.0 * t)


def _plan_vehicles(cfg: ScenarioConfig, rng: np.random.Generator) -> list[_VehiclePlan]:
    lanes = _lane_centers(cfg)
    forward_lanes = [y for y in lanes if y <= 0.0] or [0.0]
    oncoming_lanes = [y for y in lanes if y > 0.0] or [cfg.lane_width]
    n = cfg.n_vehicles
    n_oncoming = int(round(cfg.frac_oncoming * n))
    n_lane_change = int(round(cfg.frac_lane_change * n))
    kinds = (["oncoming"] * n_oncoming + ["lane_change"] * n_lane_change)
    kinds += ["forward"] * (n - len(kinds))
    kinds = kinds[:n]

    plans = []
    for kind in kinds:
        speed = float(rng.uniform(*cfg.speed_range))
        length = float(rng.uniform(3.8, 4.8))
        width = float(rng.uniform(1.6, 2.0))
        height = float(rng.uniform(1.4, 1.7))
        if kind == "oncoming":
            y0 = float(oncoming_lanes[int(rng.integers(len(oncoming_lanes)))])
            # start ahead so the pass crosses the visible window
            x0 = float(rng.uniform(25.0, 60.0))
            vx = -speed
            shift, start = 0.0, 0.0
        else:
            y0 = float(forward_lanes[int(rng.integers(len(forward_lanes)))])
            x0 = float(rng.uniform(6.0, 34.0))
            vx = speed
            if kind == "lane_change":
                shift = float(rng.choice((-1.0, 1.0))) * cfg.lane_width
                if y0 + shift > max(forward_lanes) or y0 + shift < min(forward_lanes):
                    shift = -shift
                start = float(rng.uniform(0.2, max(0.3, cfg.n_frames * cfg.frame_dt - 2.0)))
            else:
                shift, start = 0.0, 0.0
        plans.append(_VehiclePlan(kind, x0, y0, vx, length, width, height, shift, start))
    return plans


def _vehicle_pose(plan: _VehiclePlan, t: float) -> tuple[float, float, float]:
    """World (x, y, yaw) at time t."""
    x = plan.x0 + plan.vx * t
    y = plan.y0
    yaw = 0.0 if plan.vx >= 0 else math.pi
    if plan.lane_shift != 0.0:
        u = (t - plan.shift_start) / _LANE_CHANGE_DURATION
        y = plan.y0 + plan.lane_shift * _smoothstep(u)
        if 0.0 < u < 1.0:
            # d(smoothstep)/dt gives the lateral rate for the heading
            du = (6.0 * u * (1.0 - u)) / _LANE_CHANGE_DURATION
            yaw = math.atan2(plan.lane_shift * du, plan.vx)
    return x, y, yaw


def _project_box2d(box: Box3D, camera: CameraModel) -> Box2D | None:
    """Clipped image bounding rectangle of the projected box, or None."""
    if box.center_x <= 0.5:
        return None
    uv = camera.project(box.corners_3d())
    left = max(float(uv[:, 0].min()), 0.0)
    right = min(float(uv[:, 0].max()), camera.image_width)
    top = max(float(uv[:, 1].min()), 0.0)
    bottom = min(float(uv[:, 1].max()), camera.image_height)
    if right - left < 1.0 or bottom - top < 1.0:
        return None
    if (right - left) * (bottom - top) < _MIN_BOX2D_AREA:
        return None
    return Box2D(left, top, right, bottom)


def _unit_latent(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.uniform(0.0, 1.0, dim)
    return v / np.linalg.norm(v)


def _noisy_appearance(latent: np.ndarray, rng: np.random.Generator,
                      cfg: ScenarioConfig) -> np.ndarray:
    noise = rng.normal(0.0, cfg.sigma_app / math.sqrt(cfg.appearance_dim),
                       cfg.appearance_dim)
    app = np.maximum(latent + noise, 0.0)
    return app.reshape(cfg.appearance_blocks, cfg.block_len)


def generate(cfg: ScenarioConfig) -> tuple[TrackSequence, list[BoxTrack],
                                           dict[int, list[tuple[int, LabeledBox]]]]:
    """One scenario: candidate sequence, GT tracks, GT boxes per frame.

    A vehicle contributes ground truth over its first contiguous visible
    run only, so GT tracks never have coverage holes of their own (missed
    DETECTIONS still punch holes in the candidate set).
    """
    rng = np.random.default_rng(cfg.seed)
    camera = DEFAULT_CAMERA
    plans = _plan_vehicles(cfg, rng)
    latents = [_unit_latent(rng, cfg.appearance_dim) for _ in plans]

    # ground truth first: relative boxes wherever the vehicle is visible
    raw_gt: list[list[tuple[int, Box3D, Box2D]]] = []  # per vehicle: (frame, boxes)
    for plan in plans:
        entries = []
        for f in range(cfg.n_frames):
            t = f * cfg.frame_dt
            wx, wy, yaw = _vehicle_pose(plan, t)
            rel_x = wx - cfg.ego_speed * t
            rel_y = wy
            visible = (_X_VISIBLE[0] <= rel_x <= _X_VISIBLE[1]
                       and abs(rel_y) <= _Y_VISIBLE)
            if not visible:
                entries.append(None)
                continue
            box3d = Box3D(rel_x, rel_y, plan.height / 2.0,
                          plan.length, plan.width, plan.height, yaw)
            box2d = _project_box2d(box3d, camera)
            entries.append(None if box2d is None else (f, box3d, box2d))
        # keep the first contiguous visible run
        run = []
        for e in entries:
            if e is not None:
                run.append(e)
            elif run:
                break
        raw_gt.append(run)

    gt_tracks: list[BoxTrack] = []
    gt_by_frame: dict[int, list[tuple[int, LabeledBox]]] = {f: [] for f in range(cfg.n_frames)}
    for vid, run in enumerate(raw_gt):
        if not run:
            continue
        track_id = vid + 1
        labeled = [LabeledBox(f, b3, b2) for f, b3, b2 in run]
        gt_tracks.append(BoxTrack(track_id, tuple(labeled)))
        for entry in labeled:
            gt_by_frame[entry.frame_idx].append((track_id, entry))

    # candidate detections: noisy copies of GT plus clutter
    frames: list[list[Detection]] = []
    det_id = 0
    for f in range(cfg.n_frames):
        frame: list[Detection] = []
        for vid, run in enumerate(raw_gt):
            entry = next((e for e in run if e[0] == f), None)
            if entry is None:
                continue
            if rng.uniform() < cfg.miss_prob:
                continue
            _, box3d, _ = entry
            noisy = Box3D(
                box3d.center_x + rng.normal(0.0, cfg.sigma_pos) if cfg.sigma_pos else box3d.center_x,
                box3d.center_y + rng.normal(0.0, cfg.sigma_pos) if cfg.sigma_pos else box3d.center_y,
                box3d.center_z,
                max(0.5, box3d.length + (rng.normal(0.0, cfg.sigma_size) if cfg.sigma_size else 0.0)),
                max(0.5, box3d.width + (rng.normal(0.0, cfg.sigma_size) if cfg.sigma_size else 0.0)),
                max(0.5, box3d.height + (rng.normal(0.0, cfg.sigma_size) if cfg.sigma_size else 0.0)),
                box3d.yaw + (rng.normal(0.0, cfg.sigma_yaw) if cfg.sigma_yaw else 0.0),
            )
            box2d = _project_box2d(noisy, camera)
            if box2d is None:
                continue
            frame.append(Detection(det_id, f, noisy, box2d,
                                   _noisy_appearance(latents[vid], rng, cfg)))
            det_id += 1
        n_clutter = int(rng.poisson(cfg.clutter_rate)) if cfg.clutter_rate else 0
        made = 0
        attempts = 0
        while made < n_clutter and attempts < 50 * (n_clutter + 1):
            attempts += 1
            box3d = Box3D(
                float(rng.uniform(*_X_VISIBLE)),
                float(rng.uniform(-_Y_VISIBLE, _Y_VISIBLE)),
                0.75,
                float(rng.uniform(3.5, 5.0)),
                float(rng.uniform(1.6, 2.0)),
                float(rng.uniform(1.4, 1.7)),
                float(rng.uniform(-math.pi, math.pi)),
            )
            box2d = _project_box2d(box3d, camera)
            if box2d is None:
                continue
            latent = _unit_latent(rng, cfg.appearance_dim)
            frame.append(Detection(det_id, f, box3d, box2d,
                                   _noisy_appearance(latent, rng, cfg)))
            det_id += 1
            made += 1
        frames.append(frame)

    ego = tuple(EgoMotion(cfg.ego_speed, 0.0, cfg.frame_dt) for _ in range(cfg.n_frames))
    seq = TrackSequence(tuple(tuple(f) for f in frames), ego, camera)
    return seq, gt_tracks, gt_by_frame


_PROFILES = {
    "smoke": dict(count=2, base_seed=1000,
                  overrides=dict(n_frames=10, n_vehicles=3)),
    "standard": dict(count=20, base_seed=2000,
                     overrides=dict(n_frames=40, n_vehicles=6,
                                    sigma_pos=0.3, sigma_size=0.1, sigma_yaw=0.05,
                                    miss_prob=0.1, clutter_rate=0.5, sigma_app=0.3)),
    "hard": dict(count=20, base_seed=3000,
                 overrides=dict(n_frames=40, n_vehicles=6,
                                sigma_pos=0.3, sigma_size=0.1, sigma_yaw=0.05,
                                miss_prob=0.25, clutter_rate=2.0, sigma_app=0.3)),
}


def make_benchmark(profile: str, seed_offset: int = 0) -> list[ScenarioConfig]:
    """Fixed scenario suite for a named profile.

    smoke: 2 noiseless sequences of 10 frames (pipeline checks).
    standard: 20 sequences x 40 frames x 6 vehicles with moderate noise.
    hard: standard corruption turned up (miss 0.25, clutter 2/frame).
    seed_offset shifts every scenario seed, giving independent replicas.
    """
    if profile not in _PROFILES:
        raise DataFormatError(
            f"unknown benchmark profile {profile!r}; pick one of {sorted(_PROFILES)}"
        )
    spec = _PROFILES[profile]
    return [
        ScenarioConfig(seed=spec["base_seed"] + seed_offset + i, **spec["overrides"])
        for i in range(spec["count"])
    ]
