"""Verification and identification metrics: ROC, CMC and open-set TPIR/FPIR."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPERATING_POINTS = (0.01, 0.1)


@dataclass
class VerificationResult:
    scores: np.ndarray
    labels: np.ndarray
    far: np.ndarray  # ascending
    tar: np.ndarray
    thresholds: np.ndarray  # accept when score >= threshold; +inf first
    operating_points: dict = field(default_factory=dict)

    def tar_at_far(self, target: float) -> float:
        return float(self.tar[self.far <= target].max())


@dataclass
class IdentificationResult:
    dist: np.ndarray
    cmc: np.ndarray  # cmc[k-1] = rank-k accuracy
    fpir: np.ndarray | None = None
    tpir: np.ndarray | None = None
    operating_points: dict = field(default_factory=dict)

    def tpir_at_fpir(self, target: float) -> float:
        return float(self.tpir[self.fpir <= target].max())


def _threshold_sweep(values: np.ndarray, hit_a: np.ndarray, hit_b: np.ndarray, n_a: int, n_b: int,
                     accept_high: bool):
    """Cumulative rates of two populations as the acceptance threshold sweeps the sorted values.

    Returns (thresholds, rate_a, rate_b) with a leading nothing-accepted point.
    """
    order = np.argsort(-values if accept_high else values, kind="stable")
    v = values[order]
    ca = np.cumsum(hit_a[order])
    cb = np.cumsum(hit_b[order])
    # keep only the last index of each run of equal values
    last = np.append(v[1:] != v[:-1], True)
    start = np.inf if accept_high else -np.inf
    thr = np.concatenate([[start], v[last]])
    ra = np.concatenate([[0.0], ca[last] / n_a])
    rb = np.concatenate([[0.0], cb[last] / n_b])
    return thr, ra, rb


def roc_curve(scores, same_identity, far_targets=OPERATING_POINTS) -> VerificationResult:
    """ROC over all distinct score thresholds (higher score = more similar)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(same_identity, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative pair")
    thr, far, tar = _threshold_sweep(scores, ~labels, labels, n_neg, n_pos, accept_high=True)
    res = VerificationResult(scores, labels, far, tar, thr)
    res.operating_points = {f: res.tar_at_far(f) for f in far_targets}
    return res


def pessimistic_ranks(dist, gallery_ids, probe_ids) -> np.ndarray:
    """1 + number of wrong-identity gallery entries at distance <= the best correct one."""
    dist = np.asarray(dist, dtype=np.float64)
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    ranks = np.empty(len(probe_ids), dtype=int)
    for i, pid in enumerate(probe_ids):
        correct = gallery_ids == pid
        if not correct.any():
            raise ValueError(f"probe {i} (identity {pid}) has no gallery match; use open_set_curve")
        best = dist[i, correct].min()
        ranks[i] = 1 + int(np.sum(dist[i, ~correct] <= best))
    return ranks


def cmc_curve(dist, gallery_ids, probe_ids) -> IdentificationResult:
    ranks = pessimistic_ranks(dist, gallery_ids, probe_ids)
    G = np.asarray(dist).shape[1]
    cmc = np.array([np.mean(ranks <= k) for k in range(1, G + 1)])
    return IdentificationResult(np.asarray(dist, dtype=np.float64), cmc)


def open_set_curve(dist, gallery_ids, probe_ids, known_mask=None, fpir_targets=OPERATING_POINTS):
    """TPIR/FPIR as the acceptance distance threshold sweeps upward.

    A genuine probe counts at threshold t when its nearest gallery entry is
    correct (ties resolved against it) and no farther than t; an impostor
    counts whenever its nearest entry is within t.
    """
    dist = np.asarray(dist, dtype=np.float64)
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    if known_mask is None:
        known_mask = np.isin(probe_ids, gallery_ids)
    known_mask = np.asarray(known_mask, dtype=bool)
    n_gen, n_imp = int(known_mask.sum()), int((~known_mask).sum())
    if n_imp == 0:
        raise ValueError("open-set evaluation needs at least one impostor probe")
    if n_gen == 0:
        raise ValueError("open-set evaluation needs at least one genuine probe")
    nearest = dist.min(axis=1)
    top_ok = np.zeros(len(probe_ids), dtype=bool)
    top_ok[known_mask] = pessimistic_ranks(dist[known_mask], gallery_ids, probe_ids[known_mask]) == 1
    _, fpir, tpir = _threshold_sweep(nearest, ~known_mask, top_ok & known_mask, n_imp, n_gen,
                                     accept_high=False)
    cmc = cmc_curve(dist[known_mask], gallery_ids, probe_ids[known_mask]).cmc
    res = IdentificationResult(dist, cmc, fpir, tpir)
    res.operating_points = {f: res.tpir_at_fpir(f) for f in fpir_targets}
    return res
