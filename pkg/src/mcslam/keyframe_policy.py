"""Running-average entropy filter and the relative-threshold keyframe rule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .errors import InvalidInputError, PolicyNotReadyError


class Decision(str, Enum):
    KEYFRAME = "keyframe"
    TRACK = "track"


@dataclass
class RunningAverageState:
    """Incremental mean of the negative entropies since the last keyframe."""

    n: int = 0
    avg: float = 0.0


@dataclass(frozen=True)
class KeyframePolicyConfig:
    ratio: float = 0.95
    min_frames_between_kf: int = 1
    absolute_gap: float | None = None
    """If set, use ``e < avg - absolute_gap`` instead of the ratio test."""

    def __post_init__(self):
        if not (0 < self.ratio <= 1):
            raise InvalidInputError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.min_frames_between_kf < 1:
            raise InvalidInputError("min_frames_between_kf must be >= 1")


def filter_update(state: RunningAverageState, e: float) -> float:
    if not math.isfinite(e):
        raise InvalidInputError(f"non-finite entropy {e}")
    state.n += 1
    state.avg = state.avg + (e - state.avg) / state.n
    return state.avg


def filter_reset(state: RunningAverageState) -> RunningAverageState:
    state.n = 0
    state.avg = 0.0
    return state


def should_insert_keyframe(e: float, state: RunningAverageState,
                           config: KeyframePolicyConfig = KeyframePolicyConfig()) -> Decision:
    """Compare ``e`` against the running average before it is folded in.

    For a negative average the ratio test flips to ``e < avg / ratio`` so a
    larger ratio still means more keyframes.
    """
    if state.n == 0:
        raise PolicyNotReadyError("running average has no samples yet")
    if not math.isfinite(e):
        raise InvalidInputError(f"non-finite entropy {e}")
    if config.absolute_gap is not None:
        hit = e < state.avg - config.absolute_gap
    elif state.avg > 0:
        hit = e < config.ratio * state.avg
    else:
        hit = e < state.avg / config.ratio
    return Decision.KEYFRAME if hit else Decision.TRACK


def keyframe_indices(trace, config: KeyframePolicyConfig = KeyframePolicyConfig()) -> list[int]:
    """Replay the policy over a fixed entropy trace.

    The frame after each keyframe seeds the filter. Used for offline
    analysis of recorded traces.
    """
    state = RunningAverageState()
    since = config.min_frames_between_kf
    out = []
    for k, e in enumerate(trace):
        if state.n > 0 and since >= config.min_frames_between_kf:
            if should_insert_keyframe(e, state, config) is Decision.KEYFRAME:
                out.append(k)
                filter_reset(state)
                since = 0
                continue
        filter_update(state, e)
        since += 1
    return out


@dataclass(frozen=True)
class TrackedFeatureHeuristic:
    """Non-core baseline: keyframe when the number of matched map landmarks
    drops below a fixed count. Camera-dependent by construction."""

    min_tracked: int = 120

    def decide(self, tracked: int) -> Decision:
        return Decision.KEYFRAME if tracked < self.min_tracked else Decision.TRACK
