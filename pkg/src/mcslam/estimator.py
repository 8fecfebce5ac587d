"""Multi-camera PnP by Gauss-Newton with pose information and entropy.

The pose is the body in world, ``T_WB``. Jacobians are taken with respect
to a left perturbation ``T_WB <- exp(delta) @ T_WB`` with
``delta = (rho, phi)``.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    DegeneratePoseError,
    InvalidInputError,
    NoConvergenceError,
    SingularInformationError,
    UndefinedEntropyError,
)
from .geometry import RigidTransform
from .rig import CameraRig


@dataclass(frozen=True)
class Observation:
    camera_index: int
    pixel: np.ndarray
    landmark_id: int
    pixel_sigma: float = 1.0

    def __post_init__(self):
        if not self.pixel_sigma > 0:
            raise InvalidInputError("pixel_sigma must be positive")


class ObservationBatch(NamedTuple):
    """Column-wise observations; the fast path used by the pipeline."""

    camera_index: np.ndarray
    pixels: np.ndarray
    landmark_ids: np.ndarray
    sigmas: np.ndarray

    @classmethod
    def from_list(cls, observations: Sequence[Observation]) -> ObservationBatch:
        return cls(
            np.array([o.camera_index for o in observations], dtype=np.int64),
            np.array([o.pixel for o in observations], dtype=float).reshape(-1, 2),
            np.array([o.landmark_id for o in observations], dtype=np.int64),
            np.array([o.pixel_sigma for o in observations], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.camera_index)


def _as_batch(observations) -> ObservationBatch:
    if isinstance(observations, ObservationBatch):
        return observations
    return ObservationBatch.from_list(list(observations))


def _landmark_array(batch: ObservationBatch, landmarks) -> np.ndarray:
    if isinstance(landmarks, Mapping):
        try:
            return np.array([landmarks[int(i)] for i in batch.landmark_ids],
                            dtype=float).reshape(-1, 3)
        except KeyError as exc:
            raise InvalidInputError(f"unknown landmark {exc.args[0]}") from None
    pts = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    if len(pts) != len(batch):
        raise InvalidInputError("landmark array must align with observations")
    return pts


def residuals_and_jacobians(pose_WB: RigidTransform, batch: ObservationBatch,
                            rig: CameraRig, points_w: np.ndarray):
    """Residuals ``u - pi(T_CB T_BW p)`` (N, 2), Jacobians of the predicted
    pixel w.r.t. the body-pose tangent (N, 2, 6) and a validity mask.

    Observations whose landmark is not in front of its camera are flagged
    invalid and get zero residual and Jacobian.
    """
    n = len(batch)
    r = np.zeros((n, 2))
    J = np.zeros((n, 2, 6))
    valid = np.zeros(n, dtype=bool)
    R_BW = pose_WB.rotation.T
    t_BW = -R_BW @ pose_WB.translation
    for c in np.unique(batch.camera_index):
        sel = np.flatnonzero(batch.camera_index == c)
        cam = rig.cameras[c]
        T_BC = rig.extrinsics[c]
        R_CB = T_BC.rotation.T
        R_CW = R_CB @ R_BW
        t_CW = R_CB @ (t_BW - T_BC.translation)
        pw = points_w[sel]
        q = pw @ R_CW.T  # rotated point, pc = q + t_CW
        pc = q + t_CW
        front = pc[:, 2] > 0
        if not front.all():
            sel, q, pc = sel[front], q[front], pc[front]
        if len(sel) == 0:
            continue
        uv, _ = cam.project_points(pc)
        r[sel] = batch.pixels[sel] - uv
        Jp = cam.projection_jacobian(pc)
        m = len(sel)
        # d pc / d rho = -R_CW ; d pc / d phi = R_CW [p]x = [q]x R_CW, and
        # each row a^T [q]x equals (a x q)^T
        qx, qy, qz = q[:, None, 0], q[:, None, 1], q[:, None, 2]
        ax, ay, az = Jp[:, :, 0], Jp[:, :, 1], Jp[:, :, 2]
        Jq = np.stack([ay * qz - az * qy, az * qx - ax * qz, ax * qy - ay * qx], axis=2)
        J[sel, :, :3] = -(Jp.reshape(2 * m, 3) @ R_CW).reshape(m, 2, 3)
        J[sel, :, 3:] = (Jq.reshape(2 * m, 3) @ R_CW).reshape(m, 2, 3)
        valid[sel] = True
    return r, J, valid


def residual_and_jacobian(pose_WB: RigidTransform, obs: Observation, rig: CameraRig,
                          landmark_pos):
    """Single-observation form; returns ``(r, J_T, valid)``."""
    batch = ObservationBatch.from_list([obs])
    r, J, valid = residuals_and_jacobians(
        pose_WB, batch, rig, np.asarray(landmark_pos, dtype=float).reshape(1, 3)
    )
    return r[0], J[0], bool(valid[0])


def fisher_information(jacobians, sigmas) -> np.ndarray:
    """Sum of ``J^T sigma^-2 J`` over observation blocks (fixed order)."""
    J = np.asarray(jacobians, dtype=float)
    if J.ndim == 2:
        J = J[None]
    if len(J) == 0:
        raise InvalidInputError("need at least one Jacobian block")
    w = np.broadcast_to(np.asarray(sigmas, dtype=float), (len(J),)) ** -2.0
    info = np.einsum("n,nki,nkj->ij", w, J, J)
    return 0.5 * (info + info.T)


def pose_covariance(fisher) -> np.ndarray:
    """Inverse of the information matrix via Cholesky; raises if not PD."""
    F = np.asarray(fisher, dtype=float)
    try:
        L = np.linalg.cholesky(F)
    except np.linalg.LinAlgError:
        raise SingularInformationError("information matrix is not positive definite") from None
    Linv = np.linalg.solve(L, np.eye(len(F)))
    cov = Linv.T @ Linv
    return 0.5 * (cov + cov.T)


def negative_entropy(fisher) -> float:
    """``ln det`` of the information matrix, from its Cholesky factor."""
    F = np.asarray(fisher, dtype=float)
    try:
        L = np.linalg.cholesky(F)
    except np.linalg.LinAlgError:
        raise UndefinedEntropyError("information matrix is not positive definite") from None
    return float(2.0 * np.sum(np.log(np.diag(L))))


def differential_entropy(cov, m: int | None = None) -> float:
    """Differential entropy of an m-dimensional Gaussian with covariance ``cov``."""
    C = np.atleast_2d(np.asarray(cov, dtype=float))
    m = len(C) if m is None else m
    if C.shape != (m, m):
        raise InvalidInputError(f"covariance must be {m}x{m}")
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise UndefinedEntropyError("covariance is not positive definite") from None
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(0.5 * m * (1.0 + np.log(2.0 * np.pi)) + 0.5 * logdet)


@dataclass(frozen=True)
class GaussNewtonConfig:
    max_iterations: int = 10
    step_tolerance: float = 1e-8
    huber_delta: float | None = None
    levenberg: bool = True
    max_rejected_steps: int = 3
    min_observations: int = 3
    degeneracy_tolerance: float = 1e-12


@dataclass
class NllsReport:
    costs: list[float] = field(default_factory=list)
    step_norms: list[float] = field(default_factory=list)
    dampings: list[float] = field(default_factory=list)
    accepted: list[bool] = field(default_factory=list)


@dataclass
class PoseEstimate:
    pose: RigidTransform
    fisher: np.ndarray
    neg_entropy: float
    iterations: int
    final_cost: float
    converged: bool
    valid: np.ndarray | None = None


def _robust_weights(r: np.ndarray, sigmas: np.ndarray, delta: float | None):
    s = np.linalg.norm(r, axis=1) / sigmas
    if delta is None:
        return np.ones(len(r)), 0.5 * np.sum(s * s)
    w = np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-300))
    rho = np.where(s <= delta, s * s, 2.0 * delta * s - delta * delta)
    return w, 0.5 * np.sum(rho)


def _linearize(pose, batch, rig, pts, cfg):
    r, J, valid = residuals_and_jacobians(pose, batch, rig, pts)
    w, cost = _robust_weights(r[valid], batch.sigmas[valid], cfg.huber_delta)
    wv = w / batch.sigmas[valid] ** 2
    Jf = J[valid].reshape(-1, 6)
    wf = np.repeat(wv, 2)
    WJ = Jf * wf[:, None]
    H = WJ.T @ Jf
    g = WJ.T @ r[valid].reshape(-1)
    return 0.5 * (H + H.T), g, cost, valid


def _check_conditioning(H: np.ndarray, tol: float) -> None:
    d = np.diag(H)
    if np.any(d <= 0):
        raise DegeneratePoseError("unconstrained pose direction")
    s = 1.0 / np.sqrt(d)
    C = H * s[:, None] * s[None, :]
    if np.linalg.det(C) < tol:
        raise DegeneratePoseError("information matrix is singular")


def solve_pnp_gn(observations, landmarks, init_pose: RigidTransform, rig: CameraRig,
                 config: GaussNewtonConfig = GaussNewtonConfig()):
    """Estimate the body pose from 2D-3D correspondences across all cameras.

    ``landmarks`` is either a mapping id -> position or an (N, 3) array
    aligned with the observations. Returns ``(PoseEstimate, NllsReport)``.
    The reported information matrix is evaluated at the final estimate with
    no damping; robust weights, when enabled, are folded into it.
    """
    batch = _as_batch(observations)
    pts = _landmark_array(batch, landmarks)
    if len(batch) < config.min_observations:
        raise DegeneratePoseError(
            f"{len(batch)} observations, need {config.min_observations}"
        )
    report = NllsReport()
    pose = init_pose
    lam = 0.0
    rejected = 0
    converged = False
    H, g, cost, valid = _linearize(pose, batch, rig, pts, config)
    iterations = 0
    while iterations < config.max_iterations:
        if valid.sum() < config.min_observations:
            raise DegeneratePoseError("too few landmarks in front of the cameras")
        _check_conditioning(H, config.degeneracy_tolerance)
        A = H + lam * np.diag(np.diag(H)) if lam > 0 else H
        delta = np.linalg.solve(A, g)
        step = float(np.linalg.norm(delta))
        iterations += 1
        report.costs.append(cost)
        report.step_norms.append(step)
        report.dampings.append(lam)
        if step < config.step_tolerance:
            report.accepted.append(True)
            converged = True
            break
        candidate = RigidTransform.exp(delta) @ pose
        H2, g2, cost2, valid2 = _linearize(candidate, batch, rig, pts, config)
        if cost2 <= cost * (1 + 1e-12) + 1e-18 or not config.levenberg:
            report.accepted.append(True)
            pose, H, g, cost, valid = candidate, H2, g2, cost2, valid2
            rejected = 0
            lam = lam * 0.1 if lam > 1e-9 else 0.0
        else:
            report.accepted.append(False)
            rejected += 1
            if rejected >= config.max_rejected_steps:
                raise NoConvergenceError(
                    f"cost rose on {rejected} consecutive damped steps"
                )
            lam = max(lam * 10.0, 1e-4)
    if valid.sum() < config.min_observations:
        raise DegeneratePoseError("too few landmarks in front of the cameras")
    _check_conditioning(H, config.degeneracy_tolerance)
    return (
        PoseEstimate(pose, H, negative_entropy(H), iterations, cost, converged, valid),
        report,
    )
