"""Scenario files, seeded experiment runs and their CSV/JSON artifacts.

A scenario is a JSON document::

    {
      "spec_version": 1,
      "name": "sim_fig8_5cam",
      "rig": "5cam",                 # preset name or an inline rig document
      "seed": 0, "runs": 5,          # seeds seed .. seed + runs - 1
      "world": {...},                # WorldConfig fields (seed excluded)
      "pipeline": {..., "policy": {...}},
      "evaluation": {"alignment": "yaw", "segment_fractions": [...]},
      "allow_partial": false
    }

Every section is optional and every field has a default; unknown fields
are rejected.
"""

from __future__ import annotations

import dataclasses
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, McSlamError
from .evaluation import default_segment_lengths, evaluate_ate, evaluate_rel_error
from .keyframe_policy import KeyframePolicyConfig
from .pipeline import LOST, FrontEnd, PipelineConfig, PipelineEvent
from .rig import CameraRig, rig_from_dict
from .sim_world import PRESET_NAMES, Simulation, WorldConfig, rig_preset
from .voxel_map import keyframe_reference_count

SPEC_VERSION = 1
ALIGNMENTS = ("yaw", "se3", "none")


def fmt(value: float) -> str:
    """Fixed 9-significant-digit rendering used by every artifact."""
    return f"{float(value):.9g}"


def _round9(value):
    if isinstance(value, float):
        return float(fmt(value)) if np.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _round9(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round9(v) for v in value]
    return value


# -- scenario schema ------------------------------------------------------------


@dataclass(frozen=True)
class EvaluationConfig:
    alignment: str = "yaw"
    segment_fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)

    def __post_init__(self):
        if self.alignment not in ALIGNMENTS:
            raise ConfigError(f"alignment must be one of {ALIGNMENTS}")
        if not self.segment_fractions or any(not 0 < f <= 1 for f in self.segment_fractions):
            raise ConfigError("segment_fractions must lie in (0, 1]")


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    rig: Any = "5cam"
    seed: int = 0
    runs: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    allow_partial: bool = False

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if isinstance(self.rig, str) and self.rig not in PRESET_NAMES:
            raise ConfigError(f"unknown rig preset {self.rig!r}; choose from {PRESET_NAMES}")

    @property
    def seeds(self) -> list[int]:
        return [self.seed + k for k in range(self.runs)]

    def build_rig(self) -> CameraRig:
        if isinstance(self.rig, CameraRig):
            return self.rig
        if isinstance(self.rig, str):
            return rig_preset(self.rig)
        return rig_from_dict(self.rig)

    def with_seed(self, seed: int) -> Scenario:
        return dataclasses.replace(self, seed=seed, runs=1)


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def _build(cls, doc, section: str, **extra):
    if not isinstance(doc, dict):
        raise ConfigError(f"'{section}' must be an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(extra)
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown field(s) in '{section}': {sorted(unknown)}")
    kwargs = {k: _tupleize(v) for k, v in doc.items()}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}': {exc}") from None


_TOP_KEYS = {"spec_version", "name", "rig", "seed", "runs", "world", "pipeline",
             "evaluation", "allow_partial"}


def scenario_from_dict(doc: dict) -> Scenario:
    """Strictly parse a scenario document."""
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario field(s): {sorted(unknown)}")
    if doc.get("spec_version") != SPEC_VERSION:
        raise ConfigError(f"scenario needs \"spec_version\": {SPEC_VERSION}")
    world = _build(WorldConfig, doc.get("world", {}), "world", seed=0)
    pdoc = dict(doc.get("pipeline", {}))
    policy = _build(KeyframePolicyConfig, pdoc.pop("policy", {}), "pipeline.policy")
    pipeline = _build(PipelineConfig, pdoc, "pipeline", policy=policy)
    evaluation = _build(EvaluationConfig, doc.get("evaluation", {}), "evaluation")
    rig = doc.get("rig", "5cam")
    if isinstance(rig, dict):
        rig_from_dict(rig)  # validate eagerly so errors surface at load time
    elif not isinstance(rig, str):
        raise ConfigError("'rig' must be a preset name or a rig object")
    for key in ("seed", "runs"):
        if key in doc and (not isinstance(doc[key], int) or isinstance(doc[key], bool)):
            raise ConfigError(f"'{key}' must be an integer")
    if not isinstance(doc.get("allow_partial", False), bool):
        raise ConfigError("'allow_partial' must be a boolean")
    return Scenario(
        name=str(doc.get("name", "scenario")), rig=rig, seed=doc.get("seed", 0),
        runs=doc.get("runs", 1), world=world, pipeline=pipeline,
        evaluation=evaluation, allow_partial=doc.get("allow_partial", False),
    )


def load_scenario(path) -> Scenario:
    """Load a scenario file, or a bundled preset when ``path`` names one."""
    if str(path) in SCENARIO_PRESETS and not Path(path).exists():
        return SCENARIO_PRESETS[str(path)]
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        line = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from None
    return scenario_from_dict(doc)


def scenario_to_dict(sc: Scenario) -> dict:
    def plain(obj):
        d = dataclasses.asdict(obj)
        return json.loads(json.dumps(d))

    pipeline = plain(sc.pipeline)
    world = plain(sc.world)
    world.pop("seed")
    rig = sc.rig if isinstance(sc.rig, (str, dict)) else None
    return {
        "spec_version": SPEC_VERSION, "name": sc.name, "rig": rig, "seed": sc.seed,
        "runs": sc.runs, "world": world, "pipeline": pipeline,
        "evaluation": plain(sc.evaluation), "allow_partial": sc.allow_partial,
    }


def textureless_world(x_start: float = 7.0, **kwargs) -> WorldConfig:
    """World whose +x end (beyond ``x_start``) carries no landmarks."""
    base = WorldConfig(**kwargs)
    sector = ((x_start, base.arena_min[1], base.arena_min[2]), tuple(base.arena_max))
    return dataclasses.replace(base, textureless_sectors=(sector,))


SCENARIO_PRESETS: dict[str, Scenario] = {
    **{
        f"sim_fig8_{p}": Scenario(name=f"sim_fig8_{p}", rig=p, runs=5)
        for p in ("2cam", "3cam", "4cam", "5cam", "6cam")
    },
    "sim_fig8_mono": Scenario(name="sim_fig8_mono", rig="mono_front", runs=5),
    "sim_fig8_stereo": Scenario(name="sim_fig8_stereo", rig="stereo_front", runs=5),
    "sim_textureless_mono": Scenario(name="sim_textureless_mono", rig="mono_front",
                                     runs=5, world=textureless_world(),
                                     allow_partial=True),
    "sim_textureless_5cam": Scenario(name="sim_textureless_5cam", rig="5cam", runs=5,
                                     world=textureless_world()),
}


# -- running ----------------------------------------------------------------------


@dataclass
class RunResult:
    seed: int
    events: list[PipelineEvent]
    estimates: list[tuple[int, Any]]
    ground_truth: list[Any]
    lost_frame: int | None
    frontend: FrontEnd
    metrics: dict


def run_sequence(scenario: Scenario, seed: int | None = None, rig: CameraRig | None = None,
                 frames: int | None = None) -> RunResult:
    """Fly the scenario's trajectory once and score the estimate.

    The run stops at the first lost frame; metrics then cover the tracked
    prefix and record ``lost_frame``.
    """
    seed = scenario.seed if seed is None else seed
    rig = rig or scenario.build_rig()
    world = dataclasses.replace(scenario.world, seed=seed)
    sim = Simulation(world, rig)
    # gauge: the estimate is expressed in the world frame of the first pose
    fe = FrontEnd(rig, scenario.pipeline, anchor=sim.trajectory[0].pose)
    lost_frame = None
    n = len(sim) if frames is None else min(frames, len(sim))
    for k in range(n):
        event = fe.step(sim.bundle(k))
        if event.outcome == LOST:
            lost_frame = event.frame_id
            break
    estimates = [(ev.frame_id, ev.pose) for ev in fe.events if ev.pose is not None]
    gt = [sim.trajectory[f].pose for f, _ in estimates]
    metrics = _metrics(scenario, seed, fe, estimates, gt, sim, lost_frame, n)
    return RunResult(seed, fe.events, estimates, gt, lost_frame, fe, metrics)


def _metrics(scenario, seed, fe: FrontEnd, estimates, gt, sim, lost_frame, n_frames) -> dict:
    est = [p for _, p in estimates]
    out: dict[str, Any] = {
        "seed": seed,
        "frames": n_frames,
        "processed": len(fe.events),
        "tracked": len(est),
        "lost_frame": lost_frame,
        "keyframes": sum(ev.outcome == "keyframe_inserted" for ev in fe.events),
        "map_landmarks": len(fe.map),
    }
    stats = fe.map.stats()
    out["voxel_count"] = stats.voxel_count
    out["voxel_references"] = stats.reference_count
    out["covisibility_references"] = keyframe_reference_count(fe.keyframe_store)
    if len(est) >= 2:
        full_gt = [s.pose for s in sim.trajectory]
        lengths = default_segment_lengths(full_gt, scenario.evaluation.segment_fractions)
        out["ate_rmse"] = evaluate_ate(est, gt, scenario.evaluation.alignment)
        rel = evaluate_rel_error(est, gt, lengths)
        out["relative_error"] = {fmt(L): v for L, v in rel.items()}
        med = [v["median_percent"] for v in rel.values() if v.get("count")]
        out["median_relative_error_percent"] = float(np.median(med)) if med else None
    else:
        out["ate_rmse"] = None
        out["relative_error"] = {}
        out["median_relative_error_percent"] = None
    return out


def run_scenario(scenario: Scenario, seeds=None) -> list[RunResult]:
    return [run_sequence(scenario, s) for s in (seeds or scenario.seeds)]


_SUMMARY_KEYS = ("keyframes", "tracked", "map_landmarks", "ate_rmse",
                 "median_relative_error_percent", "voxel_references",
                 "covisibility_references")


def aggregate(results: list[RunResult]) -> dict:
    med = {}
    for key in _SUMMARY_KEYS:
        vals = [r.metrics[key] for r in results if r.metrics.get(key) is not None]
        med[key] = float(statistics.median(vals)) if vals else None
    med["lost_runs"] = sum(r.lost_frame is not None for r in results)
    return med


# -- artifacts --------------------------------------------------------------------

EVENT_COLUMNS = ("run", "seed", "frame_id", "timestamp", "outcome", "decision",
                 "filter_reset", "neg_entropy", "running_avg", "retrieved", "matched",
                 "new_landmarks", "map_landmarks", "x", "y", "z", "qx", "qy", "qz", "qw")
TRAJECTORY_COLUMNS = ("run", "seed", "frame_id", "timestamp",
                      "x", "y", "z", "qx", "qy", "qz", "qw",
                      "gt_x", "gt_y", "gt_z", "gt_qx", "gt_qy", "gt_qz", "gt_qw")
TRACE_COLUMNS = ("run", "seed", "frame_id", "timestamp", "neg_entropy", "running_avg",
                 "decision", "reset")


def _num(v) -> str:
    return "" if v is None or (isinstance(v, float) and not np.isfinite(v)) else fmt(v)


def _pose_cells(pose) -> list[str]:
    if pose is None:
        return [""] * 7
    return [fmt(v) for v in (*pose.translation, *pose.quat)]


def events_csv(results: list[RunResult]) -> str:
    buf = io.StringIO()
    buf.write(",".join(EVENT_COLUMNS) + "\n")
    for k, r in enumerate(results):
        for ev in r.events:
            row = [str(k), str(r.seed), str(ev.frame_id), fmt(ev.timestamp), ev.outcome,
                   ev.decision, str(int(ev.filter_reset)), _num(ev.neg_entropy),
                   _num(ev.running_avg), str(ev.retrieved), str(ev.matched),
                   str(ev.new_landmarks), str(ev.map_landmarks), *_pose_cells(ev.pose)]
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def trajectory_csv(results: list[RunResult]) -> str:
    buf = io.StringIO()
    buf.write(",".join(TRAJECTORY_COLUMNS) + "\n")
    for k, r in enumerate(results):
        stamps = {ev.frame_id: ev.timestamp for ev in r.events}
        for (fid, pose), gt in zip(r.estimates, r.ground_truth):
            row = [str(k), str(r.seed), str(fid), fmt(stamps[fid]),
                   *_pose_cells(pose), *_pose_cells(gt)]
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def trace_csv(results: list[RunResult]) -> str:
    """Per-frame entropy trace; ``reset`` is 1 on every filter reset."""
    buf = io.StringIO()
    buf.write(",".join(TRACE_COLUMNS) + "\n")
    for k, r in enumerate(results):
        for ev in r.events:
            if ev.pose is None:
                continue
            row = [str(k), str(r.seed), str(ev.frame_id), fmt(ev.timestamp),
                   _num(ev.neg_entropy), _num(ev.running_avg), ev.decision,
                   str(int(ev.filter_reset))]
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def metrics_json(scenario: Scenario, results: list[RunResult]) -> str:
    doc = {
        "spec_version": SPEC_VERSION,
        "scenario": scenario.name,
        "runs": [_round9(r.metrics) for r in results],
        "median": _round9(aggregate(results)),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_artifacts(scenario: Scenario, results: list[RunResult], out_dir,
                    trace: bool = False) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = scenario.name
    files = {
        "metrics": (out / f"{stem}_metrics.json", metrics_json(scenario, results)),
        "events": (out / f"{stem}_events.csv", events_csv(results)),
        "trajectory": (out / f"{stem}_trajectory.csv", trajectory_csv(results)),
    }
    if trace:
        files["trace"] = (out / f"{stem}_trace.csv", trace_csv(results))
    for path, text in files.values():
        path.write_text(text)
    return {k: p for k, (p, _) in files.items()}


__all__ = [
    "EvaluationConfig", "Scenario", "RunResult", "SCENARIO_PRESETS", "McSlamError",
    "load_scenario", "scenario_from_dict", "scenario_to_dict", "run_sequence",
    "run_scenario", "aggregate", "events_csv", "trajectory_csv", "trace_csv",
    "metrics_json", "write_artifacts", "textureless_world", "fmt",
]
