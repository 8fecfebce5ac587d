"""Per-frame front-end loop: localize, score, select keyframes, grow the map."""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegeneratePoseError,
    InitFailure,
    InsufficientPointsError,
    InvalidInputError,
    NoConvergenceError,
    NotReadyError,
    UndefinedEntropyError,
)
from .estimator import GaussNewtonConfig, ObservationBatch, solve_pnp_gn
from .frames import CameraObservations, FrameBundle, correspondences
from .geometry import (
    RigidTransform,
    parallax_angles,
    ray_information,
    triangulate_points,
    triangulate_rays,
)
from .keyframe_policy import (
    Decision,
    KeyframePolicyConfig,
    RunningAverageState,
    TrackedFeatureHeuristic,
    filter_reset,
    filter_update,
    should_insert_keyframe,
)
from .rig import CameraRig, InitStrategy, init_map_monocular, init_map_stereo, select_init_strategy, triangulate_pair
from .voxel_map import FrustumSpec, KeyframeRecord, VoxelGrid, covisibility_query

UNINITIALIZED = "uninitialized"
TRACKING = "tracking"
LOST = "lost"


@dataclass(frozen=True)
class PipelineConfig:
    policy: KeyframePolicyConfig = field(default_factory=KeyframePolicyConfig)
    keyframe_criterion: str = "entropy"
    heuristic_min_tracked: int = 120
    window_size: int = 10
    voxel_size: float = 0.5
    query_grid: tuple[int, int] = (12, 16)
    query_depths: int = 8
    query_d_min: float = 0.5
    query_d_max: float = 8.0
    overlap_threshold: float = 0.5
    overlap_d_min: float = 0.5
    overlap_d_max: float = 20.0
    overlap_grid: tuple[int, int] = (20, 20)
    min_observations: int = 10
    min_init_landmarks: int = 8
    pixel_sigma: float = 1.0
    huber_delta: float | None = 2.0
    max_reprojection_error: float = 2.0
    mono_init_parallax_deg: float = 3.0
    mono_init_max_frames: int = 30
    two_view_parallax_deg: float = 3.0
    stereo_parallax_deg: float = 0.0
    outlier_rate: float = 0.0
    outlier_seed: int = 0
    compare_covisibility: bool = False
    refine_structure: bool = True
    landmark_uncertainty: bool = True

    def __post_init__(self):
        if self.keyframe_criterion not in ("entropy", "heuristic"):
            raise InvalidInputError(f"unknown keyframe criterion {self.keyframe_criterion!r}")
        if self.window_size < 1:
            raise InvalidInputError("window_size must be >= 1")
        if not (0 <= self.outlier_rate < 1):
            raise InvalidInputError("outlier_rate must be in [0, 1)")


@dataclass
class PipelineEvent:
    frame_id: int
    timestamp: float
    outcome: str
    pose: RigidTransform | None = None
    neg_entropy: float = float("nan")
    running_avg: float = float("nan")
    decision: str = ""
    filter_reset: bool = False
    retrieved: int = 0
    matched: int = 0
    new_landmarks: int = 0
    map_landmarks: int = 0
    covisibility_retrieved: int = -1
    timing: dict[str, float] = field(default_factory=dict)


@dataclass
class Keyframe:
    frame_id: int
    pose: RigidTransform
    observations: tuple[CameraObservations, ...]


class FrontEnd:
    """Single-threaded state machine over synchronised frame bundles."""

    def __init__(self, rig: CameraRig, config: PipelineConfig = PipelineConfig(),
                 strategy: InitStrategy | None = None,
                 anchor: RigidTransform | None = None):
        self.rig = rig
        self.config = config
        self.strategy = strategy or select_init_strategy(
            rig, config.overlap_threshold, config.overlap_d_min,
            config.overlap_d_max, config.overlap_grid,
        )
        self.anchor = anchor or RigidTransform.identity()
        self.map = VoxelGrid(config.voxel_size)
        self.window: deque[Keyframe] = deque(maxlen=config.window_size)
        self.keyframe_store: list[KeyframeRecord] = []
        self.filter = RunningAverageState()
        self.status = UNINITIALIZED
        self.poses: dict[int, RigidTransform] = {}
        self.events: list[PipelineEvent] = []
        self.last_keyframe_id: int | None = None
        self.filter_reset_id: int | None = None
        self._frames_since_kf = 0
        self._history: list[tuple[int, RigidTransform]] = []
        self._mono_reference: FrameBundle | None = None
        # tracked frames since the last keyframe, used only for refinement
        self._recent: list[tuple[RigidTransform, tuple[CameraObservations, ...]]] = []
        self._outlier_rng = np.random.default_rng(config.outlier_seed)
        self._heuristic = TrackedFeatureHeuristic(config.heuristic_min_tracked)
        stereo_cams = {c for pair in self.strategy.stereo_pairs for c in pair}
        self._mono_cameras = [c for c in range(rig.n) if c not in stereo_cams]
        self._gn = GaussNewtonConfig(huber_delta=config.huber_delta)
        self._focal = min(min(cam.fx, cam.fy) for cam in rig.cameras)
        # per-landmark range-weighted ray information (see ray_information)
        self._information: dict[int, np.ndarray] = {}

    # -- public API ---------------------------------------------------------

    def step(self, bundle: FrameBundle) -> PipelineEvent:
        if self.events and bundle.frame_id <= self.events[-1].frame_id:
            raise InvalidInputError("frame ids must increase")
        if self.status == UNINITIALIZED:
            event = self.initialize(bundle)
        elif self.status == TRACKING:
            event = self.process_frame_bundle(bundle)
        else:
            event = PipelineEvent(bundle.frame_id, bundle.timestamp, LOST)
        self.events.append(event)
        return event

    def initialize(self, bundle: FrameBundle) -> PipelineEvent:
        if self.status != UNINITIALIZED:
            raise InvalidInputError("pipeline already initialized")
        if self.strategy.kind == "stereo":
            return self._initialize_stereo(bundle)
        return self._initialize_monocular(bundle)

    def process_frame_bundle(self, bundle: FrameBundle) -> PipelineEvent:
        if self.status != TRACKING:
            raise InvalidInputError(f"cannot track in state {self.status}")
        cfg = self.config
        t0 = time.perf_counter()
        pred = self._predict(bundle.frame_id)
        specs = [
            FrustumSpec(c, pred @ T_BC, cfg.query_d_min, cfg.query_d_max,
                        cfg.query_grid, cfg.query_depths)
            for c, T_BC in enumerate(self.rig.extrinsics)
        ]
        candidates = self.map.query_frustum(specs, self.rig.cameras)
        t1 = time.perf_counter()
        event = PipelineEvent(bundle.frame_id, bundle.timestamp, LOST,
                              retrieved=len(candidates))
        if cfg.compare_covisibility and self.keyframe_store:
            event.covisibility_retrieved = len(covisibility_query(
                self.keyframe_store, pred, self.rig, self.map,
                cfg.query_d_min, cfg.query_d_max))
        batch = self._match(bundle, candidates, pred)
        event.matched = len(batch)
        event.map_landmarks = len(self.map)
        if len(batch) < cfg.min_observations:
            self.status = LOST
            return event
        try:
            est, _ = solve_pnp_gn(batch, self.map.positions(batch.landmark_ids),
                                  pred, self.rig, self._gn)
        except (DegeneratePoseError, NoConvergenceError, UndefinedEntropyError):
            self.status = LOST
            return event
        t2 = time.perf_counter()
        e = est.neg_entropy
        event.pose = est.pose
        event.neg_entropy = e
        self._record_pose(bundle.frame_id, est.pose)

        keyframe = False
        if cfg.keyframe_criterion == "heuristic":
            keyframe = self._heuristic.decide(len(batch)) is Decision.KEYFRAME
            event.decision = "keyframe" if keyframe else "track"
        elif self.filter.n == 0:
            event.decision = "seed"
        elif self._frames_since_kf < cfg.policy.min_frames_between_kf:
            event.decision = "track"
        else:
            keyframe = should_insert_keyframe(e, self.filter, cfg.policy) is Decision.KEYFRAME
            event.decision = "keyframe" if keyframe else "track"

        if keyframe:
            event.new_landmarks = self._insert_keyframe(bundle, est.pose)
            filter_reset(self.filter)
            self.filter_reset_id = bundle.frame_id
            event.filter_reset = True
            event.outcome = "keyframe_inserted"
        else:
            # the triggering frame belongs to the next map epoch, so only
            # non-keyframes feed the running average
            filter_update(self.filter, e)
            self._frames_since_kf += 1
            if cfg.refine_structure:
                self._recent.append((est.pose, bundle.observations))
            event.outcome = "tracked"
        event.running_avg = self.filter.avg if self.filter.n else float("nan")
        event.map_landmarks = len(self.map)
        t3 = time.perf_counter()
        event.timing = {"query": t1 - t0, "solve": t2 - t1, "total": t3 - t0}
        return event

    # -- initialization -----------------------------------------------------

    def _initialize_stereo(self, bundle: FrameBundle) -> PipelineEvent:
        cfg = self.config
        try:
            landmarks = init_map_stereo(self.strategy.stereo_pairs, bundle, self.rig,
                                        self.anchor, cfg.min_init_landmarks,
                                        cfg.max_reprojection_error)
        except InitFailure:
            return PipelineEvent(bundle.frame_id, bundle.timestamp, UNINITIALIZED)
        self._add_landmarks([lm.id for lm in landmarks], [lm.position for lm in landmarks],
                            [(self.anchor, bundle.observations)])
        self._record_pose(bundle.frame_id, self.anchor)
        self._push_keyframe(bundle, self.anchor)
        self._start_tracking(bundle.frame_id)
        return PipelineEvent(bundle.frame_id, bundle.timestamp, "initialized",
                             pose=self.anchor, decision="keyframe", filter_reset=True,
                             new_landmarks=len(landmarks), map_landmarks=len(self.map))

    def _initialize_monocular(self, bundle: FrameBundle) -> PipelineEvent:
        cfg = self.config
        ref = self._mono_reference
        if ref is None or bundle.frame_id - ref.frame_id > cfg.mono_init_max_frames:
            self._mono_reference = bundle
            return PipelineEvent(bundle.frame_id, bundle.timestamp, UNINITIALIZED)
        for c, cam in enumerate(self.rig.cameras):
            ids, pix_a, pix_b = correspondences(ref.observations[c], bundle.observations[c])
            try:
                init = init_map_monocular(cam, pix_a, pix_b, ids, cfg.mono_init_parallax_deg,
                                          cfg.max_reprojection_error)
            except (NotReadyError, InsufficientPointsError):
                continue
            scale = self._metric_scale(ref, bundle, c, init.T_ab)
            T_BC = self.rig.extrinsics[c]
            T_c0ck = RigidTransform(init.T_ab.quat, init.T_ab.translation * scale)
            pose_k = self.anchor @ T_BC @ T_c0ck @ T_BC.inverse()
            pts_w = (self.anchor @ T_BC).apply(init.points * scale)
            if len(init.ids) < cfg.min_init_landmarks:
                continue
            self._add_landmarks(init.ids, pts_w, [(self.anchor, ref.observations),
                                                  (pose_k, bundle.observations)])
            self._record_pose(ref.frame_id, self.anchor)
            self._push_keyframe(ref, self.anchor)
            self._record_pose(bundle.frame_id, pose_k)
            n_new = len(init.ids) + self._insert_keyframe(bundle, pose_k)
            self._start_tracking(bundle.frame_id)
            return PipelineEvent(bundle.frame_id, bundle.timestamp, "initialized",
                                 pose=pose_k, decision="keyframe", filter_reset=True,
                                 new_landmarks=n_new, map_landmarks=len(self.map))
        return PipelineEvent(bundle.frame_id, bundle.timestamp, UNINITIALIZED)

    def _metric_scale(self, ref: FrameBundle, cur: FrameBundle, c: int,
                      T_ab: RigidTransform) -> float:
        """Scale for a unit-baseline monocular bootstrap.

        Uses the metric body displacement between the two bundles, which a
        visual-inertial system gets from its inertial data; in simulation it
        comes from the bundles' ground truth.
        """
        if ref.true_pose is None or cur.true_pose is None:
            raise InitFailure("monocular initialization needs a metric displacement prior")
        dist = np.linalg.norm(cur.true_pose.translation - ref.true_pose.translation)
        T_BC = self.rig.extrinsics[c]
        R_b = T_BC.rotation @ T_ab.rotation @ T_BC.rotation.T
        a = T_BC.rotation @ T_ab.translation
        b = T_BC.translation - R_b @ T_BC.translation
        # |s a + b| = dist, positive root
        aa, ab, bb = a @ a, a @ b, b @ b
        disc = ab * ab - aa * (bb - dist * dist)
        return float((-ab + np.sqrt(max(disc, 0.0))) / aa)

    def _start_tracking(self, frame_id: int) -> None:
        self.status = TRACKING
        filter_reset(self.filter)
        self.filter_reset_id = frame_id
        self._frames_since_kf = 0

    # -- keyframes and map growth ---------------------------------------------

    def _push_keyframe(self, bundle: FrameBundle, pose: RigidTransform) -> None:
        self.window.append(Keyframe(bundle.frame_id, pose, bundle.observations))
        in_map = tuple(
            obs.ids[np.fromiter((int(i) in self.map for i in obs.ids), bool, len(obs))]
            for obs in bundle.observations
        )
        self.keyframe_store.append(KeyframeRecord(bundle.frame_id, pose, in_map))
        self.last_keyframe_id = bundle.frame_id
        self._frames_since_kf = 0
        self._recent = []

    def _insert_keyframe(self, bundle: FrameBundle, pose: RigidTransform) -> int:
        """Triangulate new landmarks from this bundle, then store it."""
        cfg = self.config
        added = 0
        for i, j in self.strategy.stereo_pairs:
            ids, pts_b = triangulate_pair(self.rig, i, j, bundle,
                                          cfg.max_reprojection_error,
                                          cfg.stereo_parallax_deg)
            if len(ids) == 0:
                continue
            fresh = np.fromiter((int(i) not in self.map for i in ids), bool, len(ids))
            self._add_landmarks(ids[fresh], pose.apply(pts_b[fresh]),
                                [(pose, bundle.observations)])
            added += int(fresh.sum())
        prev = self.window[-1] if self.window else None
        if prev is not None:
            for c in self._mono_cameras:
                added += self._two_view(c, prev, bundle, pose)
        if cfg.refine_structure:
            added += self._refine_structure(bundle, pose)
        self._push_keyframe(bundle, pose)
        return added

    def _refine_structure(self, bundle: FrameBundle, pose: RigidTransform) -> int:
        """Re-triangulate the new keyframe's landmarks from every window ray.

        Poses stay fixed; each landmark seen by ``bundle`` is intersected with
        all of its observations across the keyframe window and the frames
        tracked since the last keyframe. Mapped
        landmarks move to the refined point when its rays pass the parallax
        and reprojection gates; unmapped ones with enough parallax are added.
        Returns the number of added landmarks.
        """
        cfg = self.config
        wanted = np.unique(np.concatenate([o.ids for o in bundle.observations]))
        views = [(kf.pose, kf.observations) for kf in self.window]
        views += self._recent
        views.append((pose, bundle.observations))
        rays = self._collect_rays(views, wanted)
        if rays is None:
            return 0
        ids, pts, ok, info = triangulate_rays(
            *rays, min_parallax_deg=cfg.two_view_parallax_deg,
            max_angle_error=cfg.max_reprojection_error / self._focal,
        )
        added = 0
        for k in np.flatnonzero(ok):
            lid = int(ids[k])
            if lid in self.map:
                self.map.update_landmark(lid, pts[k])
            else:
                self.map.insert_landmark(lid, pts[k])
                added += 1
            self._information[lid] = info[k]
        return added

    def _collect_rays(self, views, wanted: np.ndarray):
        """World-frame rays ``(labels, origins, directions)`` of ``wanted`` ids."""
        labels, origins, dirs = [], [], []
        for pose, observations in views:
            for c, obs in enumerate(observations):
                keep = np.isin(obs.ids, wanted)
                if not keep.any():
                    continue
                T_WC = pose @ self.rig.extrinsics[c]
                rays = self.rig.cameras[c].normalized_rays(obs.pixels[keep])
                labels.append(obs.ids[keep])
                origins.append(np.broadcast_to(T_WC.translation, (int(keep.sum()), 3)))
                dirs.append(rays @ T_WC.rotation.T)
        if not labels:
            return None
        return np.concatenate(labels), np.vstack(origins), np.vstack(dirs)

    def _add_landmarks(self, ids, points_w, views) -> None:
        """Insert landmarks and record the information of their rays in ``views``."""
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) == 0:
            return
        points_w = np.asarray(points_w, dtype=float).reshape(-1, 3)
        for lid, p in zip(ids.tolist(), points_w):
            self.map.insert_landmark(lid, p)
        labels, origins, dirs = self._collect_rays(views, ids)
        order = np.argsort(ids)
        info = ray_information(labels, points_w[order], origins, dirs)
        for lid, m in zip(ids[order].tolist(), info):
            self._information[lid] = m

    def _two_view(self, c: int, prev: Keyframe, bundle: FrameBundle,
                  pose: RigidTransform) -> int:
        cfg = self.config
        ids, pix_cur, pix_prev = correspondences(bundle.observations[c], prev.observations[c])
        if len(ids) == 0:
            return 0
        fresh = np.fromiter((int(i) not in self.map for i in ids), bool, len(ids))
        ids, pix_cur, pix_prev = ids[fresh], pix_cur[fresh], pix_prev[fresh]
        if len(ids) == 0:
            return 0
        cam = self.rig.cameras[c]
        T_BC = self.rig.extrinsics[c]
        T_wc_cur = pose @ T_BC
        T_cur_prev = T_wc_cur.inverse() @ (prev.pose @ T_BC)
        if np.linalg.norm(T_cur_prev.translation) < 1e-9:
            return 0
        pts, _, ok = triangulate_points(pix_cur, pix_prev, cam, cam, T_cur_prev,
                                        cfg.max_reprojection_error)
        par = parallax_angles(pts, pts - T_cur_prev.translation, np.eye(3))
        ok &= np.degrees(np.nan_to_num(par)) >= cfg.two_view_parallax_deg
        self._add_landmarks(ids[ok], T_wc_cur.apply(pts[ok]),
                            [(pose, bundle.observations), (prev.pose, prev.observations)])
        return int(ok.sum())

    # -- helpers --------------------------------------------------------------

    def _record_pose(self, frame_id: int, pose: RigidTransform) -> None:
        self.poses[frame_id] = pose
        self._history.append((frame_id, pose))
        del self._history[:-2]

    def _predict(self, frame_id: int) -> RigidTransform:
        """Constant-velocity extrapolation of the last two estimates."""
        if not self._history:
            return self.anchor
        f_last, T_last = self._history[-1]
        if len(self._history) < 2:
            return T_last
        f_prev, T_prev = self._history[-2]
        xi = (T_prev.inverse() @ T_last).log() / (f_last - f_prev)
        return T_last @ RigidTransform.exp(xi * (frame_id - f_last))

    def _match(self, bundle: FrameBundle, candidates: set[int],
               pose: RigidTransform) -> ObservationBatch:
        cand = np.fromiter(sorted(candidates), dtype=np.int64, count=len(candidates))
        cams, pix, ids = [], [], []
        for c, obs in enumerate(bundle.observations):
            keep = np.isin(obs.ids, cand, assume_unique=True)
            cams.append(np.full(int(keep.sum()), c, dtype=np.int64))
            pix.append(obs.pixels[keep])
            ids.append(obs.ids[keep])
        cam_idx = np.concatenate(cams) if cams else np.zeros(0, np.int64)
        lm_ids = np.concatenate(ids) if ids else np.zeros(0, np.int64)
        pixels = np.vstack(pix) if pix else np.zeros((0, 2))
        if self.config.outlier_rate > 0 and len(cand) > 1:
            wrong = self._outlier_rng.random(len(lm_ids)) < self.config.outlier_rate
            lm_ids = lm_ids.copy()
            lm_ids[wrong] = self._outlier_rng.choice(cand, size=int(wrong.sum()))
        sig = np.full(len(lm_ids), self.config.pixel_sigma)
        if self.config.landmark_uncertainty and len(lm_ids):
            sig = self._inflated_sigmas(cam_idx, lm_ids, pose, sig)
        return ObservationBatch(cam_idx, pixels, lm_ids, sig)

    def _inflated_sigmas(self, cam_idx, lm_ids, pose: RigidTransform, sig):
        """Add each landmark's projected position uncertainty to its pixel noise.

        The position covariance is the angular noise variance times the
        inverse ray information; it is pushed through the projection at the
        predicted pose and its mean per-axis variance is added to sigma^2.
        """
        info = np.array([self._information[int(i)] for i in lm_ids])
        info += np.eye(3) * 1e-9
        var_ang = (self.config.pixel_sigma / self._focal) ** 2
        cov_w = var_ang * np.linalg.inv(info)
        pts = self.map.positions(lm_ids)
        out = sig.copy()
        R_BW = pose.rotation.T
        for c in np.unique(cam_idx):
            sel = np.flatnonzero(cam_idx == c)
            T_BC = self.rig.extrinsics[c]
            R_CW = T_BC.rotation.T @ R_BW
            pc = (pts[sel] - pose.translation) @ R_BW.T
            pc = (pc - T_BC.translation) @ T_BC.rotation
            front = pc[:, 2] > 1e-6
            sel, pc = sel[front], pc[front]
            Jp = self.rig.cameras[c].projection_jacobian(pc) @ R_CW
            S = Jp @ cov_w[sel] @ np.swapaxes(Jp, 1, 2)
            out[sel] = np.sqrt(sig[sel] ** 2 + 0.5 * np.trace(S, axis1=1, axis2=2))
        return out
