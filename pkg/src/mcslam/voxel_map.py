"""Voxel-hashed landmark map with frustum-sampling retrieval.

Landmarks live in exactly one voxel each; only occupied voxels are stored.
Retrieval samples every camera frustum, gathers the voxels hit by the
samples plus their 26 neighbours, and keeps the landmarks that pass an
exact visibility test.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError
from .geometry import CameraModel, RigidTransform

DEFAULT_VOXEL_SIZE = 0.5

_OFFSET = 1 << 20
_SHIFT_Y = 21
_SHIFT_X = 42
_MASK = (1 << 21) - 1


class VoxelKey(NamedTuple):
    ix: int
    iy: int
    iz: int

    def __hash__(self) -> int:
        return (self.ix * 73856093) ^ (self.iy * 19349669) ^ (self.iz * 83492791)


def spatial_hash(key: VoxelKey) -> int:
    """The classic three-prime XOR mix of the integer voxel coordinates."""
    ix, iy, iz = key
    return (ix * 73856093) ^ (iy * 19349669) ^ (iz * 83492791)


def voxel_key(p, voxel_size: float = DEFAULT_VOXEL_SIZE) -> VoxelKey:
    if not voxel_size > 0:
        raise InvalidInputError("voxel_size must be positive")
    ix, iy, iz = np.floor(np.asarray(p, dtype=float) / voxel_size).astype(np.int64)
    return VoxelKey(int(ix), int(iy), int(iz))


def _encode(keys: np.ndarray) -> np.ndarray:
    k = keys.astype(np.int64) + _OFFSET
    return (k[:, 0] << _SHIFT_X) | (k[:, 1] << _SHIFT_Y) | k[:, 2]


def _decode(code: int) -> VoxelKey:
    return VoxelKey(
        ((code >> _SHIFT_X) & _MASK) - _OFFSET,
        ((code >> _SHIFT_Y) & _MASK) - _OFFSET,
        (code & _MASK) - _OFFSET,
    )


_NEIGHBOUR_CODES = np.array(
    [(dx << _SHIFT_X) + (dy << _SHIFT_Y) + dz
     for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


@dataclass(frozen=True)
class FrustumSpec:
    """One camera's query volume.

    ``pose`` is world-from-camera. ``grid`` is ``(rows, cols)`` of sampled
    pixels; depths are spaced uniformly between ``d_min`` and ``d_max``
    unless ``depth_spacing`` is ``"inverse"``.
    """

    camera_index: int
    pose: RigidTransform
    d_min: float = 0.5
    d_max: float = 8.0
    grid: tuple[int, int] = (12, 16)
    n_depths: int = 8
    depth_spacing: str = "linear"

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise InvalidInputError("need 0 < d_min < d_max")
        if self.depth_spacing not in ("linear", "inverse"):
            raise InvalidInputError(f"unknown depth spacing {self.depth_spacing!r}")

    def depths(self) -> np.ndarray:
        if self.depth_spacing == "inverse":
            return 1.0 / np.linspace(1.0 / self.d_min, 1.0 / self.d_max, self.n_depths)
        return np.linspace(self.d_min, self.d_max, self.n_depths)


def dense_spec(camera_index: int, pose: RigidTransform, cam: CameraModel,
               d_min: float, d_max: float, voxel_size: float) -> FrustumSpec:
    """Sampling whose stride is at most one voxel everywhere in the frustum."""
    half_w = max(cam.cx, cam.width - cam.cx) / cam.fx
    half_h = max(cam.cy, cam.height - cam.cy) / cam.fy
    cols = int(np.ceil(2 * half_w * d_max / voxel_size)) + 1
    rows = int(np.ceil(2 * half_h * d_max / voxel_size)) + 1
    n_depths = int(np.ceil((d_max - d_min) / voxel_size)) + 1
    return FrustumSpec(camera_index, pose, d_min, d_max, (rows, cols), n_depths)


def frustum_samples(spec: FrustumSpec, cam: CameraModel) -> np.ndarray:
    """World-frame sample points of a frustum, principal ray included."""
    rows, cols = spec.grid
    us = (np.arange(cols) + 0.5) * cam.width / cols
    vs = (np.arange(rows) + 0.5) * cam.height / rows
    uu, vv = np.meshgrid(us, vs)
    pix = np.vstack([np.column_stack([uu.ravel(), vv.ravel()]), [[cam.cx, cam.cy]]])
    rays = cam.normalized_rays(pix)
    pts = (spec.depths()[:, None, None] * rays[None]).reshape(-1, 3)
    return spec.pose.apply(pts)


def visible_mask(points: np.ndarray, specs: Sequence[FrustumSpec],
                 cams: Sequence[CameraModel]) -> np.ndarray:
    """Exact predicate: inside at least one camera's image and depth range."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    seen = np.zeros(len(points), dtype=bool)
    for spec in specs:
        pc = spec.pose.inverse().apply(points)
        _, ok = cams[spec.camera_index].project_points(pc)
        seen |= ok & (pc[:, 2] >= spec.d_min) & (pc[:, 2] <= spec.d_max)
    return seen


@dataclass(frozen=True)
class MapStats:
    voxel_count: int
    landmark_count: int
    reference_count: int
    bytes_estimate: int


class VoxelGrid:
    """Sparse hash grid from voxel keys to landmark-id sets."""

    def __init__(self, voxel_size: float = DEFAULT_VOXEL_SIZE):
        if not voxel_size > 0:
            raise InvalidInputError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.table: dict[VoxelKey, set[int]] = {}
        self.landmark_index: dict[int, tuple[np.ndarray, VoxelKey]] = {}
        self._codes: np.ndarray | None = None
        self._arrays: tuple[np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.landmark_index)

    def __contains__(self, landmark_id) -> bool:
        return int(landmark_id) in self.landmark_index

    def position(self, landmark_id: int) -> np.ndarray:
        return self.landmark_index[int(landmark_id)][0]

    def _dense(self) -> tuple[np.ndarray, np.ndarray]:
        if self._arrays is None:
            ids = np.array(sorted(self.landmark_index), dtype=np.int64)
            pos = np.array([self.landmark_index[i][0] for i in ids.tolist()],
                           dtype=float).reshape(-1, 3)
            self._arrays = (ids, pos)
        return self._arrays

    def positions(self, ids: Iterable[int]) -> np.ndarray:
        """Stacked positions of ``ids``; raises ``KeyError`` for unknown ids."""
        want = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids,
                          dtype=np.int64).reshape(-1)
        all_ids, pos = self._dense()
        k = np.searchsorted(all_ids, want)
        k = np.minimum(k, max(len(all_ids) - 1, 0))
        if len(want) and (len(all_ids) == 0 or np.any(all_ids[k] != want)):
            missing = want[(len(all_ids) == 0) | (all_ids[k] != want)][0]
            raise KeyError(int(missing))
        return pos[k] if len(want) else np.zeros((0, 3))

    def insert_landmark(self, landmark_id: int, position) -> None:
        landmark_id = int(landmark_id)
        if landmark_id in self.landmark_index:
            raise InvalidInputError(f"landmark {landmark_id} already in map")
        p = np.asarray(position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise InvalidInputError(f"landmark {landmark_id} has non-finite position")
        key = voxel_key(p, self.voxel_size)
        self.table.setdefault(key, set()).add(landmark_id)
        self.landmark_index[landmark_id] = (p, key)
        self._codes = None
        self._arrays = None

    def remove_landmark(self, landmark_id: int) -> None:
        landmark_id = int(landmark_id)
        try:
            _, key = self.landmark_index.pop(landmark_id)
        except KeyError:
            raise InvalidInputError(f"landmark {landmark_id} not in map") from None
        self._arrays = None
        bucket = self.table[key]
        bucket.discard(landmark_id)
        if not bucket:
            del self.table[key]
            self._codes = None

    def update_landmark(self, landmark_id: int, new_position) -> None:
        landmark_id = int(landmark_id)
        if landmark_id not in self.landmark_index:
            raise InvalidInputError(f"landmark {landmark_id} not in map")
        p = np.asarray(new_position, dtype=float).reshape(3)
        _, old = self.landmark_index[landmark_id]
        new = voxel_key(p, self.voxel_size)
        if new != old:
            self.remove_landmark(landmark_id)
            self.insert_landmark(landmark_id, p)
        else:
            self.landmark_index[landmark_id] = (p, old)
            self._arrays = None

    def _occupied(self):
        if self._codes is None:
            keys = list(self.table)
            codes = _encode(np.array(keys, dtype=np.int64).reshape(-1, 3))
            order = np.argsort(codes)
            self._codes = (codes[order], [keys[k] for k in order])
        return self._codes

    def voxels_near(self, points: np.ndarray) -> list[VoxelKey]:
        """Occupied voxels containing, or adjacent to, any of ``points``."""
        if not self.table or len(points) == 0:
            return []
        codes = np.unique(_encode(np.floor(points / self.voxel_size)))
        occ, keys = self._occupied()
        if len(codes) * 27 > 4 * len(occ):
            # cheaper to dilate the occupied set and test it against the samples
            near = (occ[:, None] + _NEIGHBOUR_CODES[None, :])
            hit = np.isin(near, codes).any(axis=1)
            return [keys[k] for k in np.flatnonzero(hit)]
        cand = np.unique((codes[:, None] + _NEIGHBOUR_CODES[None, :]).ravel())
        pos = np.searchsorted(occ, cand)
        pos = np.minimum(pos, len(occ) - 1)
        found = pos[occ[pos] == cand]
        return [keys[k] for k in found]

    def query_frustum(self, specs: Sequence[FrustumSpec],
                      cams: Sequence[CameraModel]) -> set[int]:
        """Landmark ids inside the union of the camera frustums."""
        if not specs:
            raise InvalidInputError("need at least one frustum")
        if not self.table:
            return set()
        samples = np.vstack([frustum_samples(s, cams[s.camera_index]) for s in specs])
        ids: list[int] = []
        for key in self.voxels_near(samples):
            ids.extend(self.table[key])
        if not ids:
            return set()
        ids.sort()
        keep = visible_mask(self.positions(ids), specs, cams)
        return {i for i, k in zip(ids, keep) if k}

    def stats(self) -> MapStats:
        refs = sum(len(v) for v in self.table.values())
        # 3 int64 key + set header per voxel, 8 bytes per reference,
        # id + 3 float64 position per landmark
        nbytes = 24 * len(self.table) + 64 * len(self.table) + 8 * refs + 32 * len(self)
        if not self.table:
            nbytes = 0
        return MapStats(len(self.table), len(self.landmark_index), refs, nbytes)

    def audit(self) -> list[str]:
        """Invariant violations; empty when the grid is consistent."""
        problems = []
        seen: dict[int, VoxelKey] = {}
        for key, ids in self.table.items():
            if not ids:
                problems.append(f"empty voxel {key}")
            for i in ids:
                if i in seen:
                    problems.append(f"landmark {i} in voxels {seen[i]} and {key}")
                seen[i] = key
        if set(seen) != set(self.landmark_index):
            problems.append("table and landmark index disagree on ids")
        for i, (p, key) in self.landmark_index.items():
            if seen.get(i) != key:
                problems.append(f"landmark {i} indexed under {key}, stored in {seen.get(i)}")
            if voxel_key(p, self.voxel_size) != key:
                problems.append(f"landmark {i} key does not match its position")
        return problems

    def dump(self, path) -> None:
        lines = [
            f"{i} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
            for i, (p, _) in sorted(self.landmark_index.items())
        ]
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def load(cls, path, voxel_size: float = DEFAULT_VOXEL_SIZE) -> VoxelGrid:
        grid = cls(voxel_size)
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                if len(parts) != 4:
                    raise ValueError("wrong field count")
                lid, pos = int(parts[0]), [float(v) for v in parts[1:]]
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: expected 'id x y z'") from None
            grid.insert_landmark(lid, pos)
        return grid


def voxel_query(grid: VoxelGrid, specs, cams) -> set[int]:
    return grid.query_frustum(specs, cams)


@dataclass
class KeyframeRecord:
    """A keyframe bundle as stored by a keyframe-based map: its pose and, per
    camera, the ids of the map landmarks it observed."""

    frame_id: int
    pose: RigidTransform
    landmark_ids: tuple[np.ndarray, ...] = field(default_factory=tuple)

    @property
    def reference_count(self) -> int:
        return int(sum(len(ids) for ids in self.landmark_ids))

    def all_ids(self) -> np.ndarray:
        if not self.landmark_ids:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(self.landmark_ids))


def covisibility_query(keyframes: Sequence[KeyframeRecord], body_pose: RigidTransform,
                       rig, grid: VoxelGrid, d_min: float = 0.5,
                       d_max: float = 8.0) -> set[int]:
    """Baseline retrieval: landmarks of keyframes that overlap the current view.

    A keyframe overlaps when at least one of its landmarks reprojects into a
    current camera; the union of their landmarks is then exact-filtered.
    """
    if not keyframes:
        raise InvalidInputError("keyframe store is empty")
    specs = [FrustumSpec(c, body_pose @ T_BC, d_min, d_max)
             for c, T_BC in enumerate(rig.extrinsics)]
    cams = rig.cameras
    union: set[int] = set()
    for kf in keyframes:
        ids = [int(i) for i in kf.all_ids() if int(i) in grid]
        if not ids:
            continue
        if visible_mask(grid.positions(ids), specs, cams).any():
            union.update(ids)
    if not union:
        return set()
    ordered = sorted(union)
    keep = visible_mask(grid.positions(ordered), specs, cams)
    return {i for i, k in zip(ordered, keep) if k}


def keyframe_reference_count(keyframes: Iterable[KeyframeRecord]) -> int:
    return sum(kf.reference_count for kf in keyframes)
