"""Rigid transforms, camera models and two-view triangulation.

Conventions used throughout the package:

* Quaternions are stored scalar-last, ``(x, y, z, w)``.
* ``T_AB`` maps coordinates expressed in frame B into frame A,
  ``p_A = R_AB @ p_B + t_AB``.
* Tangent vectors are ordered ``(rho, phi)``: translation first, rotation
  second. Perturbations are applied on the left, ``T <- exp(delta) @ T``.
* Camera frames are x right, y down, z forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidDepthError, InvalidInputError, TriangulationError

_SMALL_ANGLE = 1e-8


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; accepts shape (3,) or (N, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _left_jacobian_so3(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * (K @ K)
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element stored as a unit quaternion and a translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.array(self.quat, dtype=float).reshape(4)
        t = np.array(self.translation, dtype=float).reshape(3)
        norm = math.sqrt(q @ q)
        if not (math.isfinite(norm) and math.isfinite(t @ t)):
            raise InvalidInputError("non-finite transform")
        if norm < 1e-12:
            raise InvalidInputError("zero quaternion")
        # canonical sign keeps equal rotations byte-identical
        q /= -norm if q[3] < 0 else norm
        R = _quat_to_matrix(q)
        for a in (q, t, R):
            a.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "_R", R)

    @property
    def rotation(self) -> np.ndarray:
        return self._R

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        R = np.asarray(R, dtype=float)
        if R.shape == (4, 4):
            R, t = R[:3, :3], R[:3, 3]
        return cls(Rotation.from_matrix(R).as_quat(), t)

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_quat(), t)

    @classmethod
    def exp(cls, xi) -> RigidTransform:
        """Exponential map of a tangent vector ``(rho, phi)``."""
        xi = np.asarray(xi, dtype=float).reshape(6)
        rho, phi = xi[:3], xi[3:]
        return cls.from_rotvec(phi, _left_jacobian_so3(phi) @ rho)

    def log(self) -> np.ndarray:
        phi = Rotation.from_quat(self.quat).as_rotvec()
        rho = np.linalg.solve(_left_jacobian_so3(phi), self.translation)
        return np.concatenate([rho, phi])

    def inverse(self) -> RigidTransform:
        q = self.quat * np.array([-1.0, -1.0, -1.0, 1.0])
        return RigidTransform(q, -(self._R.T @ self.translation))

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return RigidTransform(
            _quat_mul(self.quat, other.quat),
            self._R @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform a point (3,) or a stack of points (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self._R.T + self.translation

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self._R
        T[:3, 3] = self.translation
        return T

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        return 2.0 * float(np.arctan2(np.linalg.norm(self.quat[:3]), abs(self.quat[3])))

    def __repr__(self) -> str:
        return (
            f"RigidTransform(quat={np.round(self.quat, 9).tolist()}, "
            f"translation={np.round(self.translation, 9).tolist()})"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a @ b


def inverse(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def transform_point(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


PINHOLE = "pinhole"
EQUIDISTANT = "pinhole-equidistant"
CAMERA_MODELS = (PINHOLE, EQUIDISTANT)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole or equidistant-fisheye intrinsics.

    ``distortion`` holds the equidistant coefficients k1..k4; it must be all
    zeros for a pure pinhole camera.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    model: str = PINHOLE
    distortion: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.model not in CAMERA_MODELS:
            raise InvalidInputError(f"unknown camera model {self.model!r}")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point outside image")
        dist = tuple(float(k) for k in self.distortion)
        if len(dist) != 4:
            raise InvalidInputError("distortion must have 4 coefficients")
        if self.model == PINHOLE and any(dist):
            raise InvalidInputError("pinhole camera takes zero distortion")
        object.__setattr__(self, "distortion", dist)

    # -- vectorised primitives -------------------------------------------------

    def _distort(self, theta):
        k1, k2, k3, k4 = self.distortion
        t2 = theta * theta
        return theta * (1 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))

    def _distort_derivative(self, theta):
        k1, k2, k3, k4 = self.distortion
        t2 = theta * theta
        return 1 + t2 * (3 * k1 + t2 * (5 * k2 + t2 * (7 * k3 + t2 * 9 * k4)))

    def project_points(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Project (N, 3) camera-frame points.

        Returns pixel coordinates (N, 2) and a mask of points with positive
        depth whose pixel falls inside the image.
        """
        P = np.atleast_2d(np.asarray(points, dtype=float))
        x, y, z = P[:, 0], P[:, 1], P[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        if self.model == PINHOLE:
            mx, my = x / zs, y / zs
        else:
            r = np.hypot(x, y)
            theta = np.arctan2(r, zs)
            safe = r > 1e-12 * np.abs(zs)
            scale = np.where(safe, self._distort(theta) / np.where(safe, r, 1.0), 1.0 / zs)
            mx, my = scale * x, scale * y
        uv = np.column_stack([self.fx * mx + self.cx, self.fy * my + self.cy])
        return uv, front & self.in_bounds(uv)

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (
            (uv[:, 0] >= 0)
            & (uv[:, 0] < self.width)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] < self.height)
        )

    def normalized_rays(self, pixels) -> np.ndarray:
        """Back-project (N, 2) pixels onto the z = 1 plane."""
        U = np.atleast_2d(np.asarray(pixels, dtype=float))
        mx = (U[:, 0] - self.cx) / self.fx
        my = (U[:, 1] - self.cy) / self.fy
        if self.model == PINHOLE:
            return np.column_stack([mx, my, np.ones(len(U))])
        theta_d = np.hypot(mx, my)
        theta = theta_d.copy()
        for _ in range(10):
            theta = theta - (self._distort(theta) - theta_d) / self._distort_derivative(theta)
        if np.any(theta >= np.pi / 2):
            raise InvalidInputError("pixel maps beyond the forward hemisphere")
        safe = theta_d > 1e-12
        s = np.where(safe, np.tan(theta) / np.where(safe, theta_d, 1.0), 1.0)
        return np.column_stack([s * mx, s * my, np.ones(len(U))])

    def backproject_points(self, pixels, depth) -> np.ndarray:
        depth = np.asarray(depth, dtype=float)
        if np.any(depth <= 0):
            raise InvalidDepthError("depth must be positive")
        return self.normalized_rays(pixels) * np.reshape(depth, (-1, 1))

    def projection_jacobian(self, points) -> np.ndarray:
        """d(pixel)/d(point) for (N, 3) camera-frame points, shape (N, 2, 3)."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        x, y, z = P[:, 0], P[:, 1], P[:, 2]
        J = np.zeros((len(P), 2, 3))
        if self.model == PINHOLE:
            iz = 1.0 / z
            J[:, 0, 0] = self.fx * iz
            J[:, 0, 2] = -self.fx * x * iz * iz
            J[:, 1, 1] = self.fy * iz
            J[:, 1, 2] = -self.fy * y * iz * iz
            return J
        r2 = x * x + y * y
        r = np.sqrt(r2)
        rho2 = r2 + z * z
        near_axis = r < 1e-9 * np.abs(z)
        rs = np.where(near_axis, 1.0, r)
        theta = np.arctan2(r, z)
        td = self._distort(theta)
        dtd = self._distort_derivative(theta)
        a = td / rs
        # derivative of a = td(theta)/r with respect to x, y, z
        common = dtd * z / (rs * rs * rho2) - td / rs**3
        da = np.stack([common * x, common * y, -dtd / rho2], axis=1)
        for row, (f, c) in enumerate(((self.fx, x), (self.fy, y))):
            J[:, row, :] = f * c[:, None] * da
            J[:, row, row] += f * a
        if np.any(near_axis):
            iz = 1.0 / z[near_axis]
            J[near_axis] = 0.0
            J[near_axis, 0, 0] = self.fx * iz
            J[near_axis, 1, 1] = self.fy * iz
        return J


def project(cam: CameraModel, p_cam) -> np.ndarray | None:
    """Pixel of a camera-frame point, or ``None`` when out of view."""
    p = np.asarray(p_cam, dtype=float).reshape(3)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("non-finite point")
    uv, ok = cam.project_points(p[None])
    return uv[0] if ok[0] else None


def backproject(cam: CameraModel, u, z: float) -> np.ndarray:
    """Camera-frame point at depth ``z`` along the ray through pixel ``u``."""
    if not z > 0:
        raise InvalidDepthError(f"depth must be positive, got {z}")
    return cam.backproject_points(np.asarray(u, dtype=float).reshape(1, 2), z)[0]


@dataclass
class Landmark:
    id: int
    position: np.ndarray
    observing_keyframes: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise InvalidInputError(f"landmark {self.id} has non-finite position")


class Triangulation(NamedTuple):
    point: np.ndarray
    reprojection_error: float


def triangulate_points(pix_i, pix_j, cam_i: CameraModel, cam_j: CameraModel,
                       T_ij: RigidTransform, max_reprojection_error: float = 2.0):
    """Batched linear (DLT) two-view triangulation.

    ``T_ij`` maps camera-j coordinates into camera i. Points come back in
    the camera-i frame. Returns ``(points, mean_reprojection_error, ok)``;
    ``ok`` is False for rows with negative depth, a point at infinity, or a
    reprojection error above the threshold.
    """
    pix_i = np.atleast_2d(np.asarray(pix_i, dtype=float))
    pix_j = np.atleast_2d(np.asarray(pix_j, dtype=float))
    n = len(pix_i)
    if np.linalg.norm(T_ij.translation) < 1e-12:
        return np.full((n, 3), np.nan), np.full(n, np.inf), np.zeros(n, bool)
    xi = cam_i.normalized_rays(pix_i)
    xj = cam_j.normalized_rays(pix_j)
    T_ji = T_ij.inverse()
    Pj = np.hstack([T_ji.rotation, T_ji.translation[:, None]])
    Pi = np.hstack([np.eye(3), np.zeros((3, 1))])
    A = np.empty((n, 4, 4))
    A[:, 0] = xi[:, 0, None] * Pi[2] - Pi[0]
    A[:, 1] = xi[:, 1, None] * Pi[2] - Pi[1]
    A[:, 2] = xj[:, 0, None] * Pj[2] - Pj[0]
    A[:, 3] = xj[:, 1, None] * Pj[2] - Pj[1]
    # row scaling keeps the SVD well conditioned
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1, :]
    w = X[:, 3]
    finite = np.abs(w) > 1e-12 * np.linalg.norm(X[:, :3], axis=1)
    pts = X[:, :3] / np.where(finite, w, 1.0)[:, None]
    pts_j = T_ji.apply(pts)
    uv_i, _ = cam_i.project_points(pts)
    uv_j, _ = cam_j.project_points(pts_j)
    err = 0.5 * (
        np.linalg.norm(uv_i - pix_i, axis=1) + np.linalg.norm(uv_j - pix_j, axis=1)
    )
    ok = finite & (pts[:, 2] > 0) & (pts_j[:, 2] > 0)
    err = np.where(ok, err, np.inf)
    ok &= err <= max_reprojection_error
    return pts, err, ok


def triangulate_linear(u_i, u_j, cam_i: CameraModel, cam_j: CameraModel,
                       T_ij: RigidTransform,
                       max_reprojection_error: float = 2.0) -> Triangulation:
    """Triangulate a single correspondence; raises on failure."""
    if not (cam_i.in_bounds(u_i)[0] and cam_j.in_bounds(u_j)[0]):
        raise InvalidInputError("pixel outside image")
    if np.linalg.norm(T_ij.translation) < 1e-12:
        raise TriangulationError("zero baseline, no parallax")
    pts, err, ok = triangulate_points(
        u_i, u_j, cam_i, cam_j, T_ij, max_reprojection_error
    )
    if not ok[0]:
        if not np.isfinite(err[0]):
            raise TriangulationError("point behind a camera or at infinity")
        raise TriangulationError(f"reprojection error {err[0]:.3f} px above gate")
    return Triangulation(pts[0], float(err[0]))


def parallax_angles(rays_i, rays_j, R_ij) -> np.ndarray:
    """Angle in radians between matched rays, both expressed in frame i."""
    a = rays_i / np.linalg.norm(rays_i, axis=1, keepdims=True)
    b = rays_j @ np.asarray(R_ij).T
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return np.arccos(np.clip(np.sum(a * b, axis=1), -1.0, 1.0))


def _group_sum(inv: np.ndarray, n: int, values: np.ndarray) -> np.ndarray:
    flat = values.reshape(len(values), -1)
    out = np.stack([np.bincount(inv, weights=flat[:, k], minlength=n)
                    for k in range(flat.shape[1])], axis=1)
    return out.reshape((n,) + values.shape[1:])


def triangulate_rays(labels, origins, directions, min_parallax_deg: float = 1.0,
                     max_angle_error: float | None = None, reweight_steps: int = 2):
    """Least-squares intersection of rays grouped by integer label.

    Minimises the sum of squared perpendicular distances to every ray of a
    group, reweighted by inverse squared range so that the residual behaves
    like an angular error. A group is accepted when it has at least two rays,
    its rays span at least ``min_parallax_deg``, the point lies in front of
    every ray origin and (optionally) every ray misses it by no more than
    ``max_angle_error`` radians.

    Returns ``(unique_labels, points (M, 3), ok (M,), information (M, 3, 3))``
    where ``information`` is the range-weighted normal matrix; scaled by the
    inverse angular noise variance it is the point's information matrix.
    """
    labels = np.asarray(labels)
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    uniq, inv = np.unique(labels, return_inverse=True)
    m = len(uniq)
    P = np.eye(3) - d[:, :, None] * d[:, None, :]
    A = _group_sum(inv, m, P)
    count = np.bincount(inv, minlength=m)
    # for two rays the smallest eigenvalue of sum(I - d d^T) is 1 - cos(angle)
    lam = np.linalg.eigvalsh(A)[:, 0]
    ok = (count >= 2) & (lam >= 1.0 - np.cos(np.radians(min_parallax_deg)))
    A[~ok] = np.eye(3)
    b = _group_sum(inv, m, P @ o[:, :, None])[..., 0]
    pts = np.linalg.solve(A, b[..., None])[..., 0]
    for _ in range(reweight_steps):
        w = 1.0 / np.maximum(np.sum((pts[inv] - o) ** 2, axis=1), 1e-12)
        Aw = _group_sum(inv, m, P * w[:, None, None])
        Aw[~ok] = np.eye(3)
        bw = _group_sum(inv, m, (P @ o[:, :, None])[..., 0] * w[:, None])
        pts = np.linalg.solve(Aw, bw[..., None])[..., 0]
    v = pts[inv] - o
    depth = np.sum(v * d, axis=1)
    front = np.ones(m, dtype=bool)
    np.logical_and.at(front, inv, depth > 0)
    ok &= front
    if max_angle_error is not None:
        perp = np.linalg.norm(v - depth[:, None] * d, axis=1)
        err = np.zeros(m)
        np.maximum.at(err, inv, perp / np.maximum(depth, 1e-12))
        ok &= err <= max_angle_error
    w = 1.0 / np.maximum(np.sum(v * v, axis=1), 1e-12)
    return uniq, pts, ok, _group_sum(inv, m, P * w[:, None, None])


def ray_information(labels, points, origins, directions) -> np.ndarray:
    """Range-weighted normal matrix of rays about known points.

    ``points`` holds one point per sorted unique label. The result, divided
    by the angular noise variance, approximates the inverse covariance of a
    point triangulated from those rays.
    """
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    P = np.eye(3) - d[:, :, None] * d[:, None, :]
    v = np.asarray(points, dtype=float).reshape(-1, 3)[inv] - np.asarray(origins, dtype=float)
    w = 1.0 / np.maximum(np.sum(v * v, axis=1), 1e-12)
    return _group_sum(inv, len(uniq), P * w[:, None, None])
