"""Shared generators for the tests: random rigs, poses and observations."""

from __future__ import annotations

import numpy as np

from mcslam.errors import InvalidInputError
from mcslam.estimator import ObservationBatch
from mcslam.geometry import EQUIDISTANT, CameraModel, RigidTransform
from mcslam.rig import CameraRig
from mcslam.sim_world import camera_rotation

PINHOLE_CAM = CameraModel(320.0, 320.0, 320.0, 240.0, 640, 480)


def random_camera(rng) -> CameraModel:
    f = rng.uniform(200, 500)
    if rng.random() < 0.5:
        return CameraModel(f, f * rng.uniform(0.95, 1.05), 320.0, 240.0, 640, 480)
    # keep the whole image inside the forward hemisphere: some distortion
    # draws fold the lens curve over, so resample until pixels along the
    # diagonal survive an unproject/project round trip
    f = max(f, 300.0)
    diagonal = np.linspace([320.0, 240.0], [640.0, 480.0], 50)
    while True:
        k = tuple(rng.uniform(-0.02, 0.02, 4))
        cam = CameraModel(f, f, 320.0, 240.0, 640, 480, model=EQUIDISTANT, distortion=k)
        try:
            uv, _ = cam.project_points(cam.normalized_rays(diagonal))
        except InvalidInputError:
            continue
        if np.max(np.abs(uv - diagonal)) < 1e-6:
            return cam


def random_rig(rng, n_cams=None) -> CameraRig:
    n = int(rng.integers(1, 5)) if n_cams is None else n_cams
    yaws = rng.uniform(0, 2 * np.pi) + np.arange(n) * 2 * np.pi / n
    exts = []
    for yaw in yaws:
        R = camera_rotation((np.cos(yaw), np.sin(yaw), rng.uniform(-0.2, 0.2)))
        exts.append(RigidTransform.from_matrix(R, rng.uniform(-0.3, 0.3, 3)))
    return CameraRig(tuple(random_camera(rng) for _ in range(n)), tuple(exts))


def random_pose(rng, spread=3.0) -> RigidTransform:
    return RigidTransform.from_rotvec(rng.normal(0, 1.0, 3), rng.uniform(-spread, spread, 3))


def visible_landmarks(rng, rig, pose_WB, per_camera=20, depth=(2.0, 10.0)):
    """World points placed inside each camera's view, with their exact pixels."""
    cams, pixels, points = [], [], []
    for c, (cam, T_BC) in enumerate(zip(rig.cameras, rig.extrinsics)):
        uv = rng.uniform([20, 20], [cam.width - 20, cam.height - 20], (per_camera, 2))
        z = rng.uniform(*depth, per_camera)
        p_c = cam.backproject_points(uv, z)
        points.append((pose_WB @ T_BC).apply(p_c))
        pixels.append(uv)
        cams.append(np.full(per_camera, c))
    return (np.concatenate(cams), np.concatenate(pixels), np.concatenate(points))


def observation_batch(cams, pixels, sigma=1.0) -> ObservationBatch:
    n = len(cams)
    return ObservationBatch(np.asarray(cams, dtype=np.int64), np.asarray(pixels, dtype=float),
                            np.arange(n, dtype=np.int64), np.full(n, float(sigma)))


def random_spd(rng, n=6, cond=1e3) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.exp(rng.uniform(0, np.log(cond), n)) * rng.uniform(0.1, 10)
    return (Q * eig) @ Q.T


def fixed_fifty_observation_problem():
    """The fixed geometry used for the covariance Monte-Carlo: a 2-camera
    rig, 25 landmarks per camera at 2-10 m."""
    rng = np.random.default_rng(12345)
    rig = CameraRig((PINHOLE_CAM, PINHOLE_CAM), (
        RigidTransform.from_matrix(camera_rotation((1.0, 0.0, 0.0)), (0.15, 0.0, 0.0)),
        RigidTransform.from_matrix(camera_rotation((0.0, 1.0, 0.0)), (0.0, 0.15, 0.0)),
    ))
    pose = RigidTransform.from_rotvec([0.0, 0.0, 0.4], [1.0, -0.5, 1.2])
    cams, pixels, points = visible_landmarks(rng, rig, pose, per_camera=25)
    return rig, pose, cams, pixels, points


def dense_overlap(cam_i, cam_j, T_ji, d_min=0.5, d_max=20.0, n=200) -> float:
    """Brute-force overlap oracle for pinhole cameras on an n x n pixel grid."""
    us = (np.arange(n) + 0.5) * cam_i.width / n
    vs = (np.arange(n) + 0.5) * cam_i.height / n
    U = np.array([(u, v) for v in vs for u in us])
    rays = np.column_stack([(U - [cam_i.cx, cam_i.cy]) / [cam_i.fx, cam_i.fy], np.ones(len(U))])
    hit = np.ones(len(U), bool)
    for d in (d_min, d_max):
        P = T_ji.apply(rays * d)
        z = P[:, 2]
        u = cam_j.fx * P[:, 0] / z + cam_j.cx
        v = cam_j.fy * P[:, 1] / z + cam_j.cy
        hit &= (z > 0) & (u >= 0) & (u < cam_j.width) & (v >= 0) & (v < cam_j.height)
    return hit.mean()


def sawtooth_fraction(events):
    """Fraction of keyframe insertions after which the next frame's negative
    entropy is higher than at the triggering frame."""
    rises = [nxt.neg_entropy > ev.neg_entropy
             for ev, nxt in zip(events, events[1:])
             if ev.outcome == "keyframe_inserted" and nxt.pose is not None]
    return float(np.mean(rises)) if rises else None


def voxel_query_experiment(seed, n_landmarks=2000, d_min=0.5, d_max=8.0, poses=5):
    """Recall/precision of the voxel query against the brute-force oracle on
    a 4-camera rig; returns per-pose rows and the worst query time."""
    import time

    from mcslam.sim_world import rig_preset
    from mcslam.voxel_map import FrustumSpec, VoxelGrid, dense_spec, visible_mask

    rng = np.random.default_rng(seed)
    rig = rig_preset("4cam")
    pts = rng.uniform([-10, -10, -3], [10, 10, 3], (n_landmarks, 3))
    grid = VoxelGrid(0.5)
    for i, p in enumerate(pts):
        grid.insert_landmark(i, p)
    # exercise the query code once on a throwaway grid so the timings below
    # measure per-bundle work, not first-call interpreter warm-up; the first
    # timed query still pays for building this grid's lookup caches
    warm = VoxelGrid(0.5)
    warm.insert_landmark(0, [2.0, 0.0, 0.0])
    warm.query_frustum([FrustumSpec(0, rig.extrinsics[0], d_min, d_max)], rig.cameras)
    rows, worst = [], 0.0
    for _ in range(poses):
        pose = RigidTransform.from_rotvec([0, 0, rng.uniform(-np.pi, np.pi)],
                                          rng.uniform([-2, -2, -0.5], [2, 2, 0.5]))
        specs = [FrustumSpec(c, pose @ T, d_min, d_max) for c, T in enumerate(rig.extrinsics)]
        oracle = set(np.flatnonzero(visible_mask(pts, specs, rig.cameras)).tolist())
        t0 = time.perf_counter()
        got = grid.query_frustum(specs, rig.cameras)
        worst = max(worst, time.perf_counter() - t0)
        dense = [dense_spec(c, pose @ T, rig.cameras[c], d_min, d_max, grid.voxel_size)
                 for c, T in enumerate(rig.extrinsics)]
        got_dense = grid.query_frustum(dense, rig.cameras)

        def score(found):
            tp = len(found & oracle)
            return (tp / len(oracle) if oracle else 1.0), (tp / len(found) if found else 1.0)

        rows.append((len(oracle), *score(got), *score(got_dense)))
    return rows, worst
