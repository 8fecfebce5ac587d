"""Trajectory accuracy: aligned absolute error and sub-trajectory drift."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import RigidTransform


def _positions(poses: Sequence[RigidTransform]) -> np.ndarray:
    return np.array([p.translation for p in poses], dtype=float).reshape(-1, 3)


def align_yaw_translation(est: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation about z plus translation taking est onto gt."""
    me, mg = est.mean(axis=0), gt.mean(axis=0)
    e, g = est - me, gt - mg
    s = np.sum(e[:, 0] * g[:, 1] - e[:, 1] * g[:, 0])
    c = np.sum(e[:, 0] * g[:, 0] + e[:, 1] * g[:, 1])
    yaw = np.arctan2(s, c)
    R = np.array([[np.cos(yaw), -np.sin(yaw), 0.0], [np.sin(yaw), np.cos(yaw), 0.0],
                  [0.0, 0.0, 1.0]])
    return R, mg - R @ me


def align_umeyama(est: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (no scale) Umeyama alignment taking est onto gt."""
    me, mg = est.mean(axis=0), gt.mean(axis=0)
    C = (gt - mg).T @ (est - me) / len(est)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    return R, mg - R @ me


def evaluate_ate(est: Sequence[RigidTransform], gt: Sequence[RigidTransform],
                 alignment: str = "yaw") -> float:
    """Position RMSE after alignment (``"yaw"``, ``"se3"`` or ``"none"``)."""
    if len(est) != len(gt):
        raise InvalidInputError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        raise InvalidInputError("empty trajectories")
    pe, pg = _positions(est), _positions(gt)
    if alignment == "yaw":
        R, t = align_yaw_translation(pe, pg)
    elif alignment == "se3":
        R, t = align_umeyama(pe, pg)
    elif alignment == "none":
        R, t = np.eye(3), np.zeros(3)
    else:
        raise InvalidInputError(f"unknown alignment {alignment!r}")
    err = pg - (pe @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def traveled_distance(poses: Sequence[RigidTransform]) -> np.ndarray:
    p = _positions(poses)
    steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def relative_errors(est: Sequence[RigidTransform], gt: Sequence[RigidTransform],
                    length: float) -> np.ndarray:
    """Translation error of every sub-trajectory spanning ``length`` meters.

    Each segment starts at a frame, ends at the first frame whose traveled
    distance along ground truth reaches ``length``, and compares the
    relative motions ``gt_i^-1 gt_j`` and ``est_i^-1 est_j``.
    """
    if len(est) != len(gt):
        raise InvalidInputError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    dist = traveled_distance(gt)
    out = []
    for i in range(len(gt)):
        j = int(np.searchsorted(dist, dist[i] + length))
        if j >= len(gt):
            break
        d_gt = gt[i].inverse() @ gt[j]
        d_est = est[i].inverse() @ est[j]
        out.append(np.linalg.norm((d_gt.inverse() @ d_est).translation))
    return np.asarray(out)


def evaluate_rel_error(est: Sequence[RigidTransform], gt: Sequence[RigidTransform],
                       lengths: Sequence[float]) -> dict[float, dict[str, float]]:
    """Per-length statistics of the relative translation error.

    ``percent`` entries are relative to the segment length.
    """
    stats = {}
    for L in lengths:
        e = relative_errors(est, gt, L)
        if len(e) == 0:
            stats[float(L)] = {"count": 0}
            continue
        stats[float(L)] = {
            "count": int(len(e)),
            "mean": float(e.mean()),
            "median": float(np.median(e)),
            "rmse": float(np.sqrt(np.mean(e * e))),
            "mean_percent": float(100.0 * e.mean() / L),
            "median_percent": float(100.0 * np.median(e) / L),
        }
    return stats


def default_segment_lengths(gt: Sequence[RigidTransform],
                            fractions=(0.1, 0.2, 0.3, 0.4, 0.5)) -> list[float]:
    total = traveled_distance(gt)[-1]
    return [round(f * total, 1) for f in fractions]
