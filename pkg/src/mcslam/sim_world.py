"""Deterministic multi-camera simulator: rigs, figure-8 flights, landmarks.

Body frame is x forward, y left, z up. The arena is an axis-aligned box
whose walls, floor and ceiling carry uniformly scattered landmarks, except
inside declared textureless boxes.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError
from .frames import CameraObservations, FrameBundle
from .geometry import CameraModel, Landmark, RigidTransform
from .rig import CameraRig

Box = tuple[tuple[float, float, float], tuple[float, float, float]]


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    landmark_count: int = 4000
    arena_min: tuple[float, float, float] = (-10.0, -6.0, 0.0)
    arena_max: tuple[float, float, float] = (10.0, 6.0, 4.0)
    textureless_sectors: tuple[Box, ...] = ()
    lemniscate_a: float = 6.0
    height: float = 1.5
    period: float = 40.0
    frame_rate: float = 10.0
    duration: float | None = None
    noise_sigma_px: float = 1.0
    dropout_rate: float = 0.1
    d_min: float = 0.5
    d_max: float = 8.0

    def __post_init__(self):
        if self.landmark_count <= 0:
            raise InvalidInputError("landmark_count must be positive")
        if self.period <= 0 or self.frame_rate <= 0:
            raise InvalidInputError("period and frame_rate must be positive")
        lo, hi = np.array(self.arena_min), np.array(self.arena_max)
        if np.any(hi <= lo):
            raise InvalidInputError("arena_max must exceed arena_min")
        sectors = tuple(
            (tuple(map(float, b[0])), tuple(map(float, b[1]))) for b in self.textureless_sectors
        )
        for bmin, bmax in sectors:
            if np.any(np.array(bmin) < lo - 1e-9) or np.any(np.array(bmax) > hi + 1e-9):
                raise InvalidInputError(f"sector {bmin}-{bmax} leaves the arena")
        object.__setattr__(self, "textureless_sectors", sectors)


class TrajectorySample(NamedTuple):
    timestamp: float
    pose: RigidTransform


def lemniscate_position(config: WorldConfig, t):
    """Gerono lemniscate position and velocity at time(s) ``t``."""
    w = 2.0 * np.pi / config.period
    a = config.lemniscate_a
    s = w * np.asarray(t, dtype=float)
    pos = np.stack([a * np.sin(s), a * np.sin(s) * np.cos(s),
                    np.full_like(s, config.height)], axis=-1)
    vel = np.stack([a * w * np.cos(s), a * w * np.cos(2 * s), np.zeros_like(s)], axis=-1)
    return pos, vel


def gen_trajectory(config: WorldConfig) -> list[TrajectorySample]:
    """Level flight along the figure-8, yaw tangent to the velocity."""
    duration = config.period if config.duration is None else config.duration
    n = int(round(duration * config.frame_rate))
    ts = np.arange(n) / config.frame_rate
    pos, vel = lemniscate_position(config, ts)
    yaw = np.arctan2(vel[:, 1], vel[:, 0])
    return [
        TrajectorySample(float(t), RigidTransform.from_rotvec([0.0, 0.0, y], p))
        for t, p, y in zip(ts, pos, yaw)
    ]


def in_sectors(points: np.ndarray, sectors) -> np.ndarray:
    inside = np.zeros(len(points), dtype=bool)
    for bmin, bmax in sectors:
        inside |= np.all((points >= bmin) & (points <= bmax), axis=1)
    return inside


def _sample_box_surface(rng, lo, hi, n) -> np.ndarray:
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[1] * ext[2],
                      ext[0] * ext[2], ext[0] * ext[2],
                      ext[0] * ext[1], ext[0] * ext[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    axis = face // 2
    pinned = np.where(face % 2 == 0, lo[axis], hi[axis])
    pts[np.arange(n), axis] = pinned
    return pts


def gen_landmarks(config: WorldConfig) -> list[Landmark]:
    """Seeded uniform landmarks on the arena surfaces, none in textureless boxes."""
    rng = np.random.default_rng(config.seed)
    lo, hi = np.array(config.arena_min), np.array(config.arena_max)
    chunks, have = [], 0
    while have < config.landmark_count:
        pts = _sample_box_surface(rng, lo, hi, config.landmark_count)
        pts = pts[~in_sectors(pts, config.textureless_sectors)]
        chunks.append(pts)
        have += len(pts)
    pts = np.vstack(chunks)[: config.landmark_count]
    return [Landmark(i, p) for i, p in enumerate(pts)]


def frame_rng(seed: int, frame_id: int) -> np.random.Generator:
    """Per-frame generator; ``(seed, frame_id)`` is mixed by SeedSequence."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame_id)]))


def observe(rig: CameraRig, true_pose: RigidTransform, landmark_ids, landmark_positions,
            noise_sigma_px: float = 1.0, dropout_rate: float = 0.1, seed: int = 0,
            d_min: float = 0.5, d_max: float = 8.0, frame_id: int = 0,
            timestamp: float = 0.0) -> FrameBundle:
    """Project every landmark into every camera and apply noise and dropout."""
    if noise_sigma_px < 0:
        raise InvalidInputError("noise_sigma_px must be non-negative")
    if not (0 <= dropout_rate < 1):
        raise InvalidInputError("dropout_rate must be in [0, 1)")
    ids = np.asarray(landmark_ids, dtype=np.int64)
    pts = np.asarray(landmark_positions, dtype=float).reshape(-1, 3)
    rng = frame_rng(seed, frame_id)
    per_cam = []
    for cam, T_BC in zip(rig.cameras, rig.extrinsics):
        pc = (true_pose @ T_BC).inverse().apply(pts)
        uv, ok = cam.project_points(pc)
        ok &= (pc[:, 2] >= d_min) & (pc[:, 2] <= d_max)
        keep = rng.random(len(pts)) >= dropout_rate
        noise = rng.normal(0.0, 1.0, size=(len(pts), 2)) * noise_sigma_px
        sel = ok & keep
        noisy = uv[sel] + noise[sel]
        inb = cam.in_bounds(noisy) if len(noisy) else np.zeros(0, dtype=bool)
        per_cam.append(CameraObservations(ids[sel][inb], noisy[inb]))
    return FrameBundle(frame_id, timestamp, tuple(per_cam), true_pose)


@dataclass
class Simulation:
    """A rig flying the configured trajectory through a landmark field."""

    config: WorldConfig
    rig: CameraRig
    landmarks: list[Landmark] = field(default_factory=list)

    def __post_init__(self):
        if not self.landmarks:
            self.landmarks = gen_landmarks(self.config)
        self.trajectory = gen_trajectory(self.config)
        self.landmark_ids = np.array([lm.id for lm in self.landmarks], dtype=np.int64)
        self.landmark_positions = np.array([lm.position for lm in self.landmarks])

    def bundle(self, k: int) -> FrameBundle:
        sample = self.trajectory[k]
        c = self.config
        return observe(self.rig, sample.pose, self.landmark_ids, self.landmark_positions,
                       c.noise_sigma_px, c.dropout_rate, c.seed, c.d_min, c.d_max,
                       frame_id=k, timestamp=sample.timestamp)

    def bundles(self) -> Iterator[FrameBundle]:
        for k in range(len(self.trajectory)):
            yield self.bundle(k)

    def __len__(self) -> int:
        return len(self.trajectory)


# -- rig presets ---------------------------------------------------------------

DEFAULT_CAMERA = CameraModel(320.0, 320.0, 320.0, 240.0, 640, 480)


def camera_rotation(direction, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Body-from-camera rotation for a camera looking along ``direction``."""
    f = np.asarray(direction, dtype=float)
    f = f / np.linalg.norm(f)
    u = np.asarray(up, dtype=float)
    r = np.cross(f, u)
    r /= np.linalg.norm(r)
    down = np.cross(f, r)
    return np.column_stack([r, down, f])


FORWARD = (1.0, 0.0, 0.0)
LEFT = (0.0, 1.0, 0.0)
BACKWARD = (-1.0, 0.0, 0.0)
DOWN = (0.0, 0.0, -1.0)


def _mono(direction, offset, up=(0.0, 0.0, 1.0)):
    return RigidTransform.from_matrix(camera_rotation(direction, up), offset)


def _stereo(direction, centre, baseline, up=(0.0, 0.0, 1.0)):
    R = camera_rotation(direction, up)
    c = np.asarray(centre, dtype=float)
    return [RigidTransform.from_matrix(R, c - 0.5 * baseline * R[:, 0]),
            RigidTransform.from_matrix(R, c + 0.5 * baseline * R[:, 0])]


STEREO_BASELINE = 0.4

PRESET_NAMES = ("mono_front", "stereo_front", "back_to_back", "2cam", "3cam",
                "4cam", "5cam", "6cam")


def rig_preset(name: str, camera: CameraModel = DEFAULT_CAMERA,
               baseline: float = STEREO_BASELINE) -> CameraRig:
    front = (0.15, 0.0, 0.0)
    side = (0.0, 0.15, 0.0)
    parts: list[tuple[str, RigidTransform]] = []
    if name == "mono_front":
        parts = [("front", _mono(FORWARD, front))]
    elif name == "stereo_front":
        fl, fr = _stereo(FORWARD, front, baseline)
        parts = [("front_left", fl), ("front_right", fr)]
    elif name == "back_to_back":
        parts = [("front", _mono(FORWARD, front)), ("back", _mono(BACKWARD, (-0.15, 0, 0)))]
    elif name == "2cam":
        parts = [("front", _mono(FORWARD, front)), ("side", _mono(LEFT, side))]
    elif name in ("3cam", "4cam", "5cam", "6cam"):
        fl, fr = _stereo(FORWARD, front, baseline)
        parts = [("front_left", fl), ("front_right", fr)]
        if name == "3cam":
            parts.append(("side", _mono(LEFT, side)))
        else:
            sl, sr = _stereo(LEFT, side, baseline)
            parts += [("side_left", sl), ("side_right", sr)]
        if name in ("5cam", "6cam"):
            parts.append(("down", _mono(DOWN, (0.0, 0.0, -0.05), up=FORWARD)))
        if name == "6cam":
            parts.append(("back", _mono(BACKWARD, (-0.15, 0.0, 0.0))))
    else:
        raise InvalidInputError(f"unknown rig preset {name!r}; choose from {PRESET_NAMES}")
    names, exts = zip(*parts)
    return CameraRig(tuple(camera for _ in exts), tuple(exts), tuple(names))


def textureless_end_sector(config: WorldConfig, x_start: float) -> Box:
    """Box covering the arena beyond ``x = x_start``."""
    return ((x_start, config.arena_min[1], config.arena_min[2]),
            tuple(config.arena_max))


def export_trajectory_csv(samples, path) -> None:
    lines = ["timestamp,x,y,z,qx,qy,qz,qw"]
    for t, pose in samples:
        vals = [t, *pose.translation, *pose.quat]
        lines.append(",".join(f"{v:.9g}" for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
