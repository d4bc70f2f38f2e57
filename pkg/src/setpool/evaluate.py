"""Evaluation protocol: per-set representations, distance matrices, metric bundle."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, FeatureSet
from .env import infer_weights
from .metrics import OPERATING_POINTS, cmc_curve, open_set_curve, roc_curve
from .pgr import SetRepresentation, pgr_distance, pgr_represent, plain_distance

DISTANCES = {"plain": plain_distance, "pgr": pgr_distance}


def uniform_weights(fs: FeatureSet) -> np.ndarray:
    return np.ones(len(fs))


def policy_weights(policy) -> Callable[[FeatureSet], np.ndarray]:
    return lambda fs: infer_weights(fs, policy)[0]


def represent(ds: Dataset, weight_fn: Callable[[FeatureSet], np.ndarray]) -> list[SetRepresentation]:
    return [pgr_represent(fs, weight_fn(fs)) for fs in ds.sets]


def distance_matrix(rows: list[SetRepresentation], cols: list[SetRepresentation], distance: str = "plain",
                    workers: int = 1) -> np.ndarray:
    fn = DISTANCES[distance]

    def fill(i):
        return [fn(rows[i], c) for c in cols]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(fill, range(len(rows))))
    else:
        out = [fill(i) for i in range(len(rows))]
    return np.array(out, dtype=np.float64).reshape(len(rows), len(cols))


def protocol_splits(ds: Dataset):
    """Gallery/probe indices for closed- and open-set identification.

    Closed set: each identity's first set is its gallery template, the rest
    probe. Open set: only the first half of the identities keep a gallery
    template; every other set probes, so the second half are impostors.
    """
    first: dict[int, int] = {}
    for i, fs in enumerate(ds.sets):
        first.setdefault(fs.identity, i)
    ids = sorted(first)
    closed_gallery = [first[k] for k in ids]
    closed_probes = [i for i in range(len(ds.sets)) if i not in set(closed_gallery)]
    known = set(ids[: (len(ids) + 1) // 2])
    open_gallery = [first[k] for k in ids if k in known]
    open_probes = [i for i in range(len(ds.sets)) if i not in set(open_gallery)]
    return closed_gallery, closed_probes, open_gallery, open_probes


def evaluate(ds: Dataset, weight_fn, distance: str = "plain", workers: int = 1):
    """Run verification and identification; returns (metrics dict, curves dict, full distance matrix)."""
    reps = represent(ds, weight_fn)
    D = distance_matrix(reps, reps, distance, workers)
    ids = np.array([fs.identity for fs in ds.sets])
    iu = np.triu_indices(len(reps), 1)
    roc = roc_curve(-D[iu], ids[iu[0]] == ids[iu[1]])

    cg, cp, og, op = protocol_splits(ds)
    cmc = cmc_curve(D[np.ix_(cp, cg)], ids[cg], ids[cp]).cmc
    opn = open_set_curve(D[np.ix_(op, og)], ids[og], ids[op])

    metrics = {}
    for f in OPERATING_POINTS:
        metrics[f"TAR@FAR={f}"] = roc.operating_points[f]
    metrics["rank1"] = float(cmc[0])
    metrics["rank5"] = float(cmc[min(4, len(cmc) - 1)])
    for f in OPERATING_POINTS:
        metrics[f"TPIR@FPIR={f}"] = opn.operating_points[f]
    curves = {
        "roc": (("far", "tar"), np.column_stack([roc.far, roc.tar])),
        "cmc": (("rank", "acc"), np.column_stack([np.arange(1, len(cmc) + 1), cmc])),
        "openset": (("fpir", "tpir"), np.column_stack([opn.fpir, opn.tpir])),
    }
    return metrics, curves, D


def write_results(out_dir, metrics: dict, curves: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    for name, (header, rows) in curves.items():
        lines = [",".join(header)] + [",".join(repr(float(v)) for v in row) for row in rows]
        (out / f"{name}.csv").write_text("\n".join(lines) + "\n")


def outlier_below_median_rate(ds: Dataset, weight_fn) -> tuple[float, int]:
    """Share of sets with planted outliers whose outliers all weigh less than the set median."""
    hits = total = 0
    for fs in ds.sets:
        mask = fs.outliers
        if not mask.any() or mask.all():
            continue
        w = weight_fn(fs)
        total += 1
        hits += bool(np.all(w[mask] < np.median(w)))
    return (hits / total if total else float("nan")), total
