"""Acceptance checks for the whole system.

Every test prints one ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line to the terminal and then asserts the same condition, so a plain
``pytest tests/test_acceptance.py -v`` doubles as the acceptance report.

The full figure-8 runs are shared through a cache: the 3-camera runs at the
default ratio serve the keyframe-count, sawtooth and accuracy checks, and
the 2- to 5-camera runs serve both the memory and the accuracy trends.
"""

import dataclasses
import functools
import statistics
import time

import numpy as np
import pytest
from support import (
    dense_overlap,
    fixed_fifty_observation_problem,
    observation_batch,
    random_pose,
    random_rig,
    random_spd,
    sawtooth_fraction,
    visible_landmarks,
    voxel_query_experiment,
)

from mcslam.cli import OUTPUT_ENV, main
from mcslam.estimator import (
    fisher_information,
    negative_entropy,
    pose_covariance,
    residuals_and_jacobians,
    solve_pnp_gn,
)
from mcslam.geometry import RigidTransform
from mcslam.keyframe_policy import KeyframePolicyConfig, RunningAverageState, filter_update
from mcslam.pipeline import PipelineConfig
from mcslam.rig import find_stereo_pairs, overlap_ratio
from mcslam.scenario import Scenario, run_sequence, scenario_to_dict, textureless_world
from mcslam.sim_world import PRESET_NAMES, gen_trajectory, rig_preset

SEEDS = range(5)
TEXTURELESS_X = 7.0


@pytest.fixture
def report(capsys):
    """Print a criterion verdict straight to the terminal, then assert it."""

    def _report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, f"criterion {n}: {detail}"

    return _report


@functools.lru_cache(maxsize=None)
def figure8(rig: str, seed: int, ratio: float = 0.95, criterion: str = "entropy",
            textureless: bool = False):
    """One full noisy figure-8 run (cached: several criteria share runs)."""
    pipeline = PipelineConfig(keyframe_criterion=criterion,
                              policy=KeyframePolicyConfig(ratio=ratio))
    world = textureless_world(TEXTURELESS_X) if textureless else Scenario().world
    return run_sequence(Scenario(rig=rig, pipeline=pipeline, world=world), seed)


def median_over_seeds(rig: str, key: str) -> float:
    return statistics.median(figure8(rig, s).metrics[key] for s in SEEDS)


# -- estimator -----------------------------------------------------------------------


def test_criterion_01_jacobian_matches_finite_differences(report):
    rng = np.random.default_rng(2024)
    h = 1e-6
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        rig = random_rig(rng)
        pose = random_pose(rng)
        cams, pix, pts = visible_landmarks(rng, rig, pose, per_camera=5)
        batch = observation_batch(cams, pix)
        _, J, valid = residuals_and_jacobians(pose, batch, rig, pts)
        assert valid.all()
        num = np.zeros_like(J)
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            rp, _, _ = residuals_and_jacobians(RigidTransform.exp(d) @ pose, batch, rig, pts)
            rm, _, _ = residuals_and_jacobians(RigidTransform.exp(-d) @ pose, batch, rig, pts)
            num[:, :, k] = -(rp - rm) / (2 * h)
        worst = max(worst, float(np.max(np.abs(J - num))))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-4 and elapsed < 5.0,
           f"max |J - J_fd| = {worst:.2e} over 100 configurations in {elapsed:.2f} s")


def test_criterion_02_covariance_matches_monte_carlo(report):
    rig, pose, cams, pix, pts = fixed_fifty_observation_problem()
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    errs = []
    for _ in range(1000):
        batch = observation_batch(cams, pix + rng.normal(0.0, 1.0, pix.shape))
        est, _ = solve_pnp_gn(batch, pts, pose, rig)
        errs.append((est.pose @ pose.inverse()).log())
    elapsed = time.perf_counter() - t0
    sample = np.cov(np.array(errs).T)
    _, J, _ = residuals_and_jacobians(pose, observation_batch(cams, pix), rig, pts)
    predicted = pose_covariance(fisher_information(J, 1.0))
    rel = np.abs(np.diag(sample) / np.diag(predicted) - 1.0)
    report(2, bool(np.all(rel < 0.30)) and elapsed < 60.0,
           f"worst diagonal deviation {100 * rel.max():.1f}% over 1000 trials "
           f"of {len(cams)} observations in {elapsed:.1f} s")


def test_criterion_03_entropy_identities(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        M = random_spd(rng)
        d = negative_entropy(M) + np.linalg.slogdet(pose_covariance(M))[1]
        worst = max(worst, abs(d))
    closed = [abs(negative_entropy(np.eye(6)))]
    for c in (0.5, 2.0, 10.0, 1e3):
        closed.append(abs(negative_entropy(c * np.eye(6)) - 6 * np.log(c)))
        M = random_spd(rng)
        closed.append(abs(negative_entropy(c * M) - negative_entropy(M) - 6 * np.log(c)))
    report(3, worst < 1e-8 and max(closed) < 1e-12,
           f"|E(M) + ln det cov| <= {worst:.1e} on 100 matrices; "
           f"closed forms within {max(closed):.1e}")


# -- keyframe policy ------------------------------------------------------------------


def test_criterion_04_running_average_equals_batch_mean(report):
    rng = np.random.default_rng(4)
    lengths = [1, 2, 10, 10_000, *rng.integers(1, 10_001, 16)]
    worst = 0.0
    for n in lengths:
        x = rng.normal(rng.uniform(-100, 100), rng.uniform(0.1, 50), int(n))
        s = RunningAverageState()
        for v in x:
            filter_update(s, float(v))
        worst = max(worst, abs(s.avg - float(np.mean(x))))
    report(4, worst < 1e-10,
           f"max |running - batch| = {worst:.1e} over {len(lengths)} sequences up to 10^4")


@pytest.mark.slow
def test_criterion_05_keyframe_count_grows_with_ratio(report):
    ratios = (0.93, 0.95, 0.98)
    rows, ok = [], True
    for s in SEEDS:
        k = [figure8("3cam", s, ratio=a).metrics["keyframes"] for a in ratios]
        ok &= k[0] <= k[1] <= k[2] and k[0] < k[2]
        rows.append(f"seed {s}: {k[0]}/{k[1]}/{k[2]}")
    report(5, ok, "3cam keyframes at ratio 0.93/0.95/0.98 - " + ", ".join(rows))


@pytest.mark.slow
def test_criterion_06_sensor_agnostic_keyframe_counts(report):
    def counts(criterion):
        return [(figure8("mono_front", s, criterion=criterion).metrics["keyframes"],
                 figure8("stereo_front", s, criterion=criterion).metrics["keyframes"])
                for s in SEEDS]

    def rel_diff(m, s):
        return abs(m - s) / max(m, s)

    ent, heu = counts("entropy"), counts("heuristic")
    ent_ok = all(rel_diff(m, s) <= 0.20 for m, s in ent)
    heu_ok = all(rel_diff(m, s) > 0.40 for m, s in heu)
    report(6, ent_ok and heu_ok,
           "mono/stereo keyframes, entropy policy " + str(ent)
           + f" ({'within' if ent_ok else 'NOT within'} 20%); heuristic " + str(heu)
           + f" ({'differs' if heu_ok else 'does NOT differ'} by > 40%)")


@pytest.mark.slow
def test_criterion_07_entropy_sawtooth(report):
    runs = {(rig, s): figure8(rig, s) for rig in ("2cam", "3cam", "4cam", "5cam") for s in SEEDS}
    fractions = {k: sawtooth_fraction(r.events) for k, r in runs.items()}
    worst_key = min(fractions, key=fractions.get)
    ok = all(f is not None and f >= 0.90 for f in fractions.values())
    report(7, ok, f"entropy rises after insertion in >= {100 * fractions[worst_key]:.0f}% "
                  f"of keyframes in every one of {len(runs)} runs (worst {worst_key})")


# -- map ----------------------------------------------------------------------------


def test_criterion_08_voxel_query_is_exact(report):
    recall, precision, recall_dense, precision_dense, worst = [], [], [], [], 0.0
    for seed in range(4):
        rows, t = voxel_query_experiment(seed, n_landmarks=2000)
        worst = max(worst, t)
        for _, r, p, rd, pd in rows:
            recall.append(r)
            precision.append(p)
            recall_dense.append(rd)
            precision_dense.append(pd)
    ok = (min(precision) == 1.0 and min(precision_dense) == 1.0 and min(recall) >= 0.995
          and min(recall_dense) == 1.0 and worst < 0.050)
    report(8, ok, f"precision {min(min(precision), min(precision_dense)):.3f}, recall "
                  f"{min(recall):.4f} (default) / {min(recall_dense):.4f} (dense) over "
                  f"{len(recall)} bundles; slowest query {1e3 * worst:.1f} ms")


@pytest.mark.slow
def test_criterion_09_memory_trend(report):
    rigs = ("2cam", "3cam", "4cam", "5cam")
    single = all(figure8(r, s).metrics["voxel_references"] == figure8(r, s).metrics["map_landmarks"]
                 for r in rigs for s in SEEDS)
    ratios = {}
    for r in rigs:
        ratios[r] = statistics.median(
            figure8(r, s).metrics["covisibility_references"] / figure8(r, s).metrics["voxel_references"]
            for s in SEEDS)
    vals = [ratios[r] for r in rigs]
    growing = all(a < b for a, b in zip(vals, vals[1:]))
    trend = " -> ".join(f"{r} {ratios[r]:.2f}" for r in rigs)
    report(9, single and vals[0] > 1.0 and growing,
           f"voxel references == landmarks: {single}; covisibility/voxel reference ratio "
           f"(median of 5 seeds) {trend}; strictly growing: {growing}")


@pytest.mark.slow
def test_criterion_10_accuracy_trend(report):
    key = "median_relative_error_percent"
    err = {r: median_over_seeds(r, key) for r in ("2cam", "3cam", "4cam", "5cam")}
    ok = err["2cam"] > err["3cam"] and err["5cam"] <= err["3cam"]
    report(10, ok, "median relative translation error "
                   + ", ".join(f"{r} {v:.2f}%" for r, v in err.items()))


@pytest.mark.slow
def test_criterion_11_textureless_robustness(report):
    world = textureless_world(TEXTURELESS_X)
    mono_in_sector = []
    for s in SEEDS:
        r = figure8("mono_front", s, textureless=True)
        inside = False
        if r.lost_frame is not None:
            # the lost frame counts when the front camera's optical axis meets
            # the textureless box within the far clipping depth
            pose = gen_trajectory(dataclasses.replace(world, seed=s))[r.lost_frame].pose
            axis = pose.translation + np.outer(np.linspace(0, world.d_max, 81), pose.rotation[:, 0])
            inside = bool(np.any(axis[:, 0] >= TEXTURELESS_X))
        mono_in_sector.append(inside)
    five = [figure8("5cam", s, textureless=True) for s in SEEDS]
    five_ok = [r.lost_frame is None and r.metrics["tracked"] == r.metrics["frames"] for r in five]
    ok = sum(mono_in_sector) >= 4 and all(five_ok)
    report(11, ok, f"mono lost facing the textureless sector in {sum(mono_in_sector)}/5 runs; "
                   f"5cam completed {sum(five_ok)}/5 runs without a lost frame")


# -- rig ------------------------------------------------------------------------------


def test_criterion_12_overlap_classification(report):
    expected = {"mono_front": [], "stereo_front": [(0, 1)], "back_to_back": [], "2cam": [],
                "3cam": [(0, 1)], "4cam": [(0, 1), (2, 3)], "5cam": [(0, 1), (2, 3)],
                "6cam": [(0, 1), (2, 3)]}
    classified, worst = True, 0.0
    for name in PRESET_NAMES:
        rig = rig_preset(name)
        classified &= sorted(p.pair for p in find_stereo_pairs(rig)) == expected[name]
        for i in range(rig.n):
            for j in range(rig.n):
                if i != j:
                    T_ji = rig.relative(j, i)
                    r = overlap_ratio(rig.cameras[i], rig.cameras[j], T_ji).ratio
                    worst = max(worst, abs(r - dense_overlap(rig.cameras[i], rig.cameras[j], T_ji)))
    report(12, classified and worst <= 0.02,
           f"{len(PRESET_NAMES)} presets classified correctly: {classified}; "
           f"sampled vs dense overlap within {worst:.4f}")


# -- end to end -------------------------------------------------------------------------


def test_criterion_13_byte_identical_events(report, tmp_path, monkeypatch):
    import json

    sc = Scenario(name="determinism", rig="3cam", seed=11, world=dataclasses.replace(
        Scenario().world, duration=12.0))
    cfg = tmp_path / "determinism.json"
    cfg.write_text(json.dumps(scenario_to_dict(sc)))
    blobs = []
    for k in range(2):
        out = tmp_path / f"out{k}"
        monkeypatch.setenv(OUTPUT_ENV, str(out))
        assert main(["run", str(cfg)]) == 0
        blobs.append((out / "determinism_events.csv").read_bytes())
    rows = blobs[0].count(b"\n") - 1
    report(13, blobs[0] == blobs[1] and rows == 120,
           f"two invocations wrote byte-identical event CSVs ({rows} rows, {len(blobs[0])} bytes)")
