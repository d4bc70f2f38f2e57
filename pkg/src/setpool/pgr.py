"""Pose-guided set representation and the routed set distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureSet
from .env import aggregate

FRONTAL_MAX_YAW = 30.0


@dataclass
class SetRepresentation:
    F0: np.ndarray
    F1: np.ndarray | None
    F2: np.ndarray | None
    p1: float
    p2: float

    @property
    def dim(self) -> int:
        return self.F0.shape[0]


def route_by_pose(fs: FeatureSet, threshold_deg: float = FRONTAL_MAX_YAW) -> tuple[list[int], list[int]]:
    """Split member indices into near-frontal (yaw <= threshold) and profile."""
    frontal = [i for i, y in enumerate(fs.yaws) if y <= threshold_deg]
    profile = [i for i, y in enumerate(fs.yaws) if not y <= threshold_deg]
    return frontal, profile


def pgr_represent(fs: FeatureSet, weights, threshold_deg: float = FRONTAL_MAX_YAW) -> SetRepresentation:
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.max()  # equal weights become exact ones, as in ``aggregate``
    frontal, profile = route_by_pose(fs, threshold_deg)
    total = weights.sum()
    groups = []
    for idx in (frontal, profile):
        if idx:
            groups.append((aggregate(fs.features[idx], weights[idx]), float(weights[idx].sum() / total)))
        else:
            groups.append((None, 0.0))
    (F1, p1), (F2, p2) = groups
    # exact complement keeps p1 + p2 == 1 up to a single rounding
    if F1 is not None and F2 is not None:
        p2 = 1.0 - p1
    return SetRepresentation(aggregate(fs.features, weights), F1, F2, p1, p2)


def _l2(a, b) -> float:
    return float(np.linalg.norm(a - b))


def plain_distance(a: SetRepresentation, b: SetRepresentation) -> float:
    if a.dim != b.dim:
        raise ValueError("representations have different dimensions")
    return _l2(a.F0, b.F0)


def pgr_distance(a: SetRepresentation, b: SetRepresentation) -> float:
    """Half the general-feature distance plus half the mass-weighted cross-pose distances.

    Not a metric: a set with both pose groups has positive distance to itself.
    """
    if a.dim != b.dim:
        raise ValueError("representations have different dimensions")
    cross = 0.0
    for Fa, pa in ((a.F1, a.p1), (a.F2, a.p2)):
        if Fa is None:
            continue
        for Fb, pb in ((b.F1, b.p1), (b.F2, b.p2)):
            if Fb is None:
                continue
            cross += _l2(Fa, Fb) * pa * pb
    return 0.5 * _l2(a.F0, b.F0) + 0.5 * cross
