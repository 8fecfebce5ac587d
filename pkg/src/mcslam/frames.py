"""Observation containers shared by the simulator, initializers and pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform


@dataclass(frozen=True)
class CameraObservations:
    """Pixels observed by one camera, ground-truth associated by landmark id."""

    ids: np.ndarray
    pixels: np.ndarray

    @classmethod
    def empty(cls) -> CameraObservations:
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 2)))

    def __len__(self) -> int:
        return len(self.ids)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(i): p for i, p in zip(self.ids, self.pixels)}


@dataclass(frozen=True)
class FrameBundle:
    """Synchronised frames from every camera of a rig.

    ``true_pose`` is simulator ground truth (body in world). Estimators do not
    read it; only evaluation code and the monocular scale prior do.
    """

    frame_id: int
    timestamp: float
    observations: tuple[CameraObservations, ...]
    true_pose: RigidTransform | None = None

    @property
    def observation_count(self) -> int:
        return sum(len(o) for o in self.observations)


def correspondences(a: CameraObservations, b: CameraObservations):
    """Common landmark ids with matching pixel rows of ``a`` and ``b``."""
    ids, ia, ib = np.intersect1d(a.ids, b.ids, assume_unique=True, return_indices=True)
    return ids, a.pixels[ia], b.pixels[ib]
