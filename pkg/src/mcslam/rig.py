"""Multi-camera rigs, frustum-overlap checks and map initialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from .errors import (
    ConfigError,
    InitFailure,
    InsufficientPointsError,
    InvalidInputError,
    NotReadyError,
)
from .frames import FrameBundle, correspondences
from .geometry import (
    CAMERA_MODELS,
    CameraModel,
    Landmark,
    RigidTransform,
    parallax_angles,
    triangulate_points,
)

DEFAULT_THRESHOLD = 0.5
DEFAULT_D_MIN = 0.5
DEFAULT_D_MAX = 20.0
DEFAULT_GRID = (20, 20)


@dataclass(frozen=True)
class CameraRig:
    """Cameras with body-from-camera extrinsics ``T_B_C``."""

    cameras: tuple[CameraModel, ...]
    extrinsics: tuple[RigidTransform, ...]
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "extrinsics", tuple(self.extrinsics))
        if not self.cameras:
            raise InvalidInputError("a rig needs at least one camera")
        if len(self.cameras) != len(self.extrinsics):
            raise InvalidInputError("one extrinsic per camera required")
        names = tuple(self.names) or tuple(f"cam{i}" for i in range(len(self.cameras)))
        if len(names) != len(self.cameras):
            raise InvalidInputError("one name per camera required")
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return len(self.cameras)

    def relative(self, i: int, j: int) -> RigidTransform:
        """``T_ij``: maps camera-j coordinates into camera i."""
        return self.extrinsics[i].inverse() @ self.extrinsics[j]

    def permuted(self, order) -> CameraRig:
        order = list(order)
        return CameraRig(
            tuple(self.cameras[k] for k in order),
            tuple(self.extrinsics[k] for k in order),
            tuple(self.names[k] for k in order),
        )


class OverlapReport(NamedTuple):
    pair: tuple[int, int]
    ratio: float
    samples_total: int
    samples_hit: int


class InitStrategy(NamedTuple):
    kind: str
    stereo_pairs: tuple[tuple[int, int], ...]


def sample_pixels(cam: CameraModel, grid=DEFAULT_GRID) -> np.ndarray:
    """Pixel centres of a regular ``rows x cols`` grid over the image."""
    rows, cols = grid
    us = (np.arange(cols) + 0.5) * cam.width / cols
    vs = (np.arange(rows) + 0.5) * cam.height / rows
    uu, vv = np.meshgrid(us, vs)
    return np.column_stack([uu.ravel(), vv.ravel()])


def overlap_ratio(cam_i: CameraModel, cam_j: CameraModel, T_ji: RigidTransform,
                  d_min: float = DEFAULT_D_MIN, d_max: float = DEFAULT_D_MAX,
                  grid=DEFAULT_GRID, pair=(0, 1)) -> OverlapReport:
    """Fraction of camera-i samples whose near and far back-projections both
    land inside camera j. ``T_ji`` maps camera-i coordinates into camera j."""
    if not (0 < d_min < d_max):
        raise InvalidInputError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    if min(grid) < 2:
        raise InvalidInputError("sampling grid must be at least 2x2")
    U = sample_pixels(cam_i, grid)
    rays = cam_i.normalized_rays(U)
    hit = np.ones(len(U), dtype=bool)
    for d in (d_min, d_max):
        _, ok = cam_j.project_points(T_ji.apply(rays * d))
        hit &= ok
    n_hit = int(hit.sum())
    return OverlapReport(tuple(pair), n_hit / len(U), len(U), n_hit)


def find_stereo_pairs(rig: CameraRig, threshold: float = DEFAULT_THRESHOLD,
                      d_min: float = DEFAULT_D_MIN, d_max: float = DEFAULT_D_MAX,
                      grid=DEFAULT_GRID) -> list[OverlapReport]:
    """Unordered camera pairs whose symmetrised overlap reaches ``threshold``.

    Each pair's ratio is the larger of the two directed ratios. Sorted by
    descending ratio, ties broken by pair index.
    """
    reports = []
    for i in range(rig.n):
        for j in range(i + 1, rig.n):
            fwd = overlap_ratio(rig.cameras[i], rig.cameras[j], rig.relative(j, i),
                                d_min, d_max, grid, (i, j))
            bwd = overlap_ratio(rig.cameras[j], rig.cameras[i], rig.relative(i, j),
                                d_min, d_max, grid, (j, i))
            best = fwd if fwd.ratio >= bwd.ratio else bwd
            if best.ratio >= threshold:
                reports.append(best._replace(pair=(i, j)))
    reports.sort(key=lambda r: (-r.ratio, r.pair))
    return reports


def select_init_strategy(rig: CameraRig, threshold: float = DEFAULT_THRESHOLD,
                         d_min: float = DEFAULT_D_MIN, d_max: float = DEFAULT_D_MAX,
                         grid=DEFAULT_GRID) -> InitStrategy:
    pairs = tuple(r.pair for r in find_stereo_pairs(rig, threshold, d_min, d_max, grid))
    return InitStrategy("stereo" if pairs else "monocular", pairs)


def triangulate_pair(rig: CameraRig, i: int, j: int, bundle: FrameBundle,
                     max_reprojection_error: float = 2.0,
                     min_parallax_deg: float = 0.0):
    """Triangulate the landmarks seen by both cameras of a stereo pair.

    Returns ``(ids, points_in_body)`` for the survivors.
    """
    ids, pix_i, pix_j = correspondences(bundle.observations[i], bundle.observations[j])
    if len(ids) == 0:
        return ids, np.zeros((0, 3))
    T_ij = rig.relative(i, j)
    cam_i, cam_j = rig.cameras[i], rig.cameras[j]
    pts, _, ok = triangulate_points(pix_i, pix_j, cam_i, cam_j, T_ij,
                                    max_reprojection_error)
    if min_parallax_deg > 0:
        baseline_ray = pts - T_ij.translation
        par = parallax_angles(pts, baseline_ray, np.eye(3))
        ok &= np.degrees(par) >= min_parallax_deg
    return ids[ok], rig.extrinsics[i].apply(pts[ok])


def init_map_stereo(pairs, bundle: FrameBundle, rig: CameraRig,
                    body_pose: RigidTransform | None = None,
                    min_landmarks: int = 8,
                    max_reprojection_error: float = 2.0) -> list[Landmark]:
    """Bootstrap world landmarks from the stereo pairs of a single bundle.

    A landmark seen by several pairs is taken from the first pair listed.
    """
    if not pairs:
        raise InvalidInputError("stereo initialization needs at least one pair")
    body_pose = body_pose or RigidTransform.identity()
    found: dict[int, np.ndarray] = {}
    for i, j in pairs:
        ids, pts_b = triangulate_pair(rig, i, j, bundle, max_reprojection_error)
        pts_w = body_pose.apply(pts_b) if len(ids) else pts_b
        for lid, p in zip(ids.tolist(), pts_w):
            found.setdefault(lid, p)
    if len(found) < min_landmarks:
        raise InitFailure(
            f"stereo initialization produced {len(found)} landmarks, need {min_landmarks}"
        )
    return [Landmark(lid, found[lid], {bundle.frame_id}) for lid in sorted(found)]


class MonocularInit(NamedTuple):
    T_ab: RigidTransform
    """Pose of view b in view a, translation scaled to unit norm."""
    ids: np.ndarray
    points: np.ndarray
    """Triangulated points in the frame of view a (unit-baseline scale)."""
    median_parallax_deg: float


class RelativePoseSolver(Protocol):
    def __call__(self, rays_a: np.ndarray, rays_b: np.ndarray) -> list[RigidTransform]:
        ...


def _hartley(x: np.ndarray):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / max(d, 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return T


def essential_eight_point(rays_a: np.ndarray, rays_b: np.ndarray) -> list[RigidTransform]:
    """Linear 8-point essential matrix; returns the four ``T_ab`` candidates.

    Rays are normalized image coordinates (z = 1) with ``x_a ~ R_ab x_b + t_ab``.
    """
    Ta, Tb = _hartley(rays_a[:, :2]), _hartley(rays_b[:, :2])
    xa = rays_a @ Ta.T
    xb = rays_b @ Tb.T
    A = (xa[:, :, None] * xb[:, None, :]).reshape(len(xa), 9)
    _, _, Vt = np.linalg.svd(A)
    E = Ta.T @ Vt[-1].reshape(3, 3) @ Tb
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    out = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for sign in (1.0, -1.0):
            out.append(RigidTransform.from_matrix(R, sign * t))
    return out


def init_map_monocular(cam: CameraModel, pixels_a, pixels_b, ids=None,
                       parallax_min_deg: float = 1.0,
                       max_reprojection_error: float = 2.0,
                       solver: RelativePoseSolver = essential_eight_point) -> MonocularInit:
    """Two-view monocular bootstrap.

    Raises ``NotReadyError`` when the median triangulation parallax is below
    ``parallax_min_deg`` (e.g. the camera only rotated).
    """
    pixels_a = np.asarray(pixels_a, dtype=float)
    pixels_b = np.asarray(pixels_b, dtype=float)
    if len(pixels_a) != len(pixels_b):
        raise InvalidInputError("correspondence arrays differ in length")
    if len(pixels_a) < 8:
        raise InsufficientPointsError(f"need at least 8 correspondences, got {len(pixels_a)}")
    ids = np.arange(len(pixels_a)) if ids is None else np.asarray(ids)
    rays_a = cam.normalized_rays(pixels_a)
    rays_b = cam.normalized_rays(pixels_b)

    best = None
    for T_ab in solver(rays_a, rays_b):
        pts, _, ok = triangulate_points(pixels_a, pixels_b, cam, cam, T_ab, np.inf)
        score = int(ok.sum())
        if best is None or score > best[0]:
            best = (score, T_ab, pts)
    _, T_ab, pts = best

    par = np.degrees(parallax_angles(rays_a, rays_b, T_ab.rotation))
    median_par = float(np.median(par))
    if median_par < parallax_min_deg:
        raise NotReadyError(
            f"median parallax {median_par:.3f} deg below {parallax_min_deg} deg"
        )
    _, _, ok = triangulate_points(pixels_a, pixels_b, cam, cam, T_ab,
                                  max_reprojection_error)
    if ok.sum() < 8:
        raise NotReadyError(f"only {int(ok.sum())} points triangulated")
    return MonocularInit(T_ab, ids[ok], pts[ok], median_par)


# -- calibration files ---------------------------------------------------------

def rig_to_dict(rig: CameraRig) -> dict:
    cams = []
    for name, cam, T in zip(rig.names, rig.cameras, rig.extrinsics):
        cams.append({
            "name": name,
            "model": cam.model,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "distortion": list(cam.distortion),
            "T_B_C": {"q": T.quat.tolist(), "t": T.translation.tolist()},
        })
    return {"spec_version": 1, "cameras": cams}


_CAMERA_KEYS = {"name", "model", "fx", "fy", "cx", "cy", "width", "height",
                "distortion", "T_B_C"}


def rig_from_dict(doc: dict) -> CameraRig:
    if not isinstance(doc, dict) or "cameras" not in doc:
        raise ConfigError("rig document needs a 'cameras' list")
    extra = set(doc) - {"spec_version", "cameras"}
    if extra:
        raise ConfigError(f"unknown rig fields: {sorted(extra)}")
    if doc.get("spec_version", 1) != 1:
        raise ConfigError(f"unsupported spec_version {doc['spec_version']}")
    cams, exts, names = [], [], []
    for k, block in enumerate(doc["cameras"]):
        name = block.get("name", f"cam{k}") if isinstance(block, dict) else f"cam{k}"
        try:
            unknown = set(block) - _CAMERA_KEYS
            if unknown:
                raise ConfigError(f"unknown fields {sorted(unknown)}")
            q = np.asarray(block["T_B_C"]["q"], dtype=float)
            t = np.asarray(block["T_B_C"]["t"], dtype=float)
            if q.shape != (4,) or t.shape != (3,):
                raise ConfigError("T_B_C needs q[4] and t[3]")
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ConfigError(f"quaternion norm {np.linalg.norm(q):.6f} is not 1")
            if block["model"] not in CAMERA_MODELS:
                raise ConfigError(f"unknown model {block['model']!r}")
            cam = CameraModel(
                float(block["fx"]), float(block["fy"]),
                float(block["cx"]), float(block["cy"]),
                int(block["width"]), int(block["height"]),
                model=block["model"],
                distortion=tuple(block.get("distortion", (0.0,) * 4)),
            )
        except ConfigError as exc:
            raise ConfigError(f"camera {name!r}: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"camera {name!r}: malformed block ({exc!r})") from None
        cams.append(cam)
        exts.append(RigidTransform(q, t))
        names.append(str(name))
    return CameraRig(tuple(cams), tuple(exts), tuple(names))


def load_rig(path) -> CameraRig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno <= len(text.splitlines()) else ""
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}"
        ) from None
    return rig_from_dict(doc)


def save_rig(rig: CameraRig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=2) + "\n")
