"""Front-end state machine: initialization, tracking and keyframe handling."""

import dataclasses

import numpy as np
import pytest
from support import sawtooth_fraction

from mcslam.errors import InvalidInputError
from mcslam.geometry import RigidTransform
from mcslam.pipeline import LOST, TRACKING, UNINITIALIZED, FrontEnd, PipelineConfig
from mcslam.scenario import Scenario, run_sequence
from mcslam.sim_world import Simulation, WorldConfig, observe, rig_preset

NOISE_FREE = WorldConfig(noise_sigma_px=0.0, dropout_rate=0.0)


def test_stereo_initializes_on_first_bundle():
    sim = Simulation(WorldConfig(), rig_preset("stereo_front"))
    fe = FrontEnd(sim.rig, anchor=sim.trajectory[0].pose)
    assert fe.strategy.kind == "stereo"
    ev = fe.step(sim.bundle(0))
    assert ev.outcome == "initialized" and fe.status == TRACKING
    assert ev.new_landmarks >= 8 and len(fe.map) == ev.new_landmarks
    assert fe.filter_reset_id == fe.last_keyframe_id == 0
    assert fe.map.audit() == []


def _fly(rig, poses, world=NOISE_FREE):
    sim = Simulation(world, rig)
    fe = FrontEnd(rig, anchor=poses[0])
    events = []
    for k, pose in enumerate(poses):
        b = observe(rig, pose, sim.landmark_ids, sim.landmark_positions,
                    world.noise_sigma_px, world.dropout_rate, seed=1, frame_id=k,
                    timestamp=0.1 * k)
        events.append(fe.step(b))
    return fe, events


def test_back_to_back_pure_rotation_stays_uninitialized():
    rig = rig_preset("back_to_back")
    poses = [RigidTransform.from_rotvec([0, 0, 0.02 * k], [0, 0, 1.5]) for k in range(12)]
    fe, events = _fly(rig, poses)
    assert fe.strategy.kind == "monocular"
    assert fe.status == UNINITIALIZED
    assert all(ev.outcome == UNINITIALIZED for ev in events)


def test_back_to_back_translation_initializes_quickly():
    rig = rig_preset("back_to_back")
    # 0.5 m sideways over the first five frames
    poses = [RigidTransform(translation=[0, 0.1 * k, 1.5]) for k in range(10)]
    fe, events = _fly(rig, poses)
    first = next(k for k, ev in enumerate(events) if ev.outcome == "initialized")
    assert first < 10
    assert all(ev.outcome in ("tracked", "keyframe_inserted") for ev in events[first + 1:])
    for ev, pose in zip(events[first:], poses[first:]):
        assert np.linalg.norm(ev.pose.translation - pose.translation) < 1e-6


@pytest.mark.parametrize("rig", ["stereo_front", "mono_front", "5cam"])
def test_noise_free_runs_are_exact(rig):
    r = run_sequence(Scenario(rig=rig, world=NOISE_FREE), frames=60)
    assert r.lost_frame is None
    # monocular start-up waits for parallax; every later frame has a pose
    first = next(k for k, ev in enumerate(r.events) if ev.outcome == "initialized")
    assert first <= 10
    assert r.metrics["tracked"] >= 60 - first
    assert r.metrics["ate_rmse"] < 1e-6


def test_noisy_run_invariants():
    sc = Scenario(rig="3cam", world=WorldConfig(landmark_count=3000))
    r = run_sequence(sc, seed=3, frames=150)
    fe = r.frontend
    assert r.lost_frame is None
    ids = [ev.frame_id for ev in r.events]
    assert ids == sorted(set(ids))
    assert len(fe.window) <= sc.pipeline.window_size
    kf_ids = [ev.frame_id for ev in r.events if ev.outcome in ("initialized", "keyframe_inserted")]
    assert [k.frame_id for k in fe.keyframe_store] == kf_ids
    assert fe.filter_reset_id == fe.last_keyframe_id == kf_ids[-1]
    assert fe.map.audit() == []
    stats = fe.map.stats()
    assert stats.reference_count == stats.landmark_count == len(fe.map)
    assert all(np.isfinite(ev.neg_entropy) for ev in r.events if ev.pose is not None and
               ev.outcome != "initialized")
    assert sawtooth_fraction(r.events) >= 0.9
    assert r.metrics["ate_rmse"] < 0.2


def test_keyframe_events_reset_the_filter():
    r = run_sequence(Scenario(rig="4cam"), seed=1, frames=120)
    for ev in r.events[1:]:
        if ev.outcome == "keyframe_inserted":
            assert ev.filter_reset and ev.decision == "keyframe"
            assert np.isnan(ev.running_avg)
        elif ev.outcome == "tracked":
            assert not ev.filter_reset and np.isfinite(ev.running_avg)


def test_heuristic_criterion():
    cfg = PipelineConfig(keyframe_criterion="heuristic", heuristic_min_tracked=10**6)
    r = run_sequence(Scenario(rig="stereo_front", pipeline=cfg), frames=20)
    # an unreachable threshold makes every tracked frame a keyframe
    assert all(ev.outcome == "keyframe_inserted" for ev in r.events[1:])


def test_covisibility_comparison_is_recorded():
    cfg = PipelineConfig(compare_covisibility=True)
    r = run_sequence(Scenario(rig="4cam", pipeline=cfg), frames=15)
    tracked = [ev for ev in r.events[1:] if ev.pose is not None]
    assert all(0 <= ev.covisibility_retrieved <= ev.retrieved for ev in tracked)


def test_lost_is_terminal():
    rig = rig_preset("stereo_front")
    sim = Simulation(WorldConfig(), rig)
    fe = FrontEnd(rig, anchor=sim.trajectory[0].pose)
    fe.step(sim.bundle(0))
    # a bundle with no observations cannot be tracked
    empty = dataclasses.replace(sim.bundle(1), observations=tuple(
        dataclasses.replace(o, ids=o.ids[:0], pixels=o.pixels[:0]) for o in sim.bundle(1).observations))
    assert fe.step(empty).outcome == LOST
    assert fe.step(sim.bundle(2)).outcome == LOST
    with pytest.raises(InvalidInputError):
        fe.step(sim.bundle(2))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        PipelineConfig(keyframe_criterion="random")
    with pytest.raises(InvalidInputError):
        PipelineConfig(window_size=0)
