"""Identity-labelled embedding sets: synthetic generator, CSV I/O, splits."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OUTLIER_QUALITY = 0.3


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class FeatureSet:
    set_id: str
    identity: int
    features: np.ndarray  # (T, d)
    yaws: np.ndarray  # (T,) degrees in [0, 90]
    quality: np.ndarray | None = None  # synthetic only

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def outliers(self) -> np.ndarray:
        """Planted-outlier mask (synthetic sets only; all False otherwise).

        Regular members draw quality from (0.3, 1], so 0.3 exactly marks an outlier.
        """
        if self.quality is None:
            return np.zeros(len(self), dtype=bool)
        return self.quality <= OUTLIER_QUALITY


@dataclass
class Dataset:
    sets: list[FeatureSet]
    num_identities: int
    dim: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.num_identities, self.dim, len(self.sets)) != (other.num_identities, other.dim, len(other.sets)):
            return False
        return all(
            a.set_id == b.set_id and a.identity == b.identity
            and np.array_equal(a.features, b.features) and np.array_equal(a.yaws, b.yaws)
            for a, b in zip(self.sets, other.sets)
        )

    def by_id(self, set_id: str) -> FeatureSet:
        for s in self.sets:
            if s.set_id == set_id:
                return s
        raise KeyError(set_id)


@dataclass
class SyntheticConfig:
    num_identities: int = 50
    sets_per_identity: int = 4
    set_size_min: int = 2
    set_size_max: int = 20
    dim: int = 32
    noise_scale: float = 0.4
    outlier_rate: float = 0.15
    profile_rate: float = 0.3
    pose_shift_scale: float = 0.5

    def validate(self) -> None:
        if self.dim < 2:
            raise ConfigError("dim", f"must be >= 2, got {self.dim}")
        if self.num_identities < 1:
            raise ConfigError("num_identities", "must be >= 1")
        if self.sets_per_identity < 1:
            raise ConfigError("sets_per_identity", "must be >= 1")
        if self.set_size_min < 1:
            raise ConfigError("set_size_min", "must be >= 1")
        if self.set_size_max < self.set_size_min:
            raise ConfigError("set_size_max", "must be >= set_size_min")
        for key in ("outlier_rate", "profile_rate"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(key, "must lie in [0, 1]")
        for key in ("noise_scale", "pose_shift_scale"):
            if not getattr(self, key) >= 0.0:
                raise ConfigError(key, "must be >= 0")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def gen_synthetic(cfg: SyntheticConfig, seed: int | np.random.Generator) -> Dataset:
    """Draw a labelled set collection around per-identity unit prototypes.

    Each identity owns a frontal prototype ``u`` and a profile prototype
    ``normalize(u + pose_shift_scale * v)``. A member with yaw > 30 uses the
    profile one. Noise is isotropic with expected norm ``noise_scale / quality``.
    """
    cfg.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = cfg.dim
    sets = []
    for ident in range(cfg.num_identities):
        u = _unit(rng.standard_normal(d))
        u_prof = _unit(u + cfg.pose_shift_scale * _unit(rng.standard_normal(d)))
        for k in range(cfg.sets_per_identity):
            T = int(rng.integers(cfg.set_size_min, cfg.set_size_max + 1))
            feats = np.empty((T, d))
            yaws = np.empty(T)
            quality = np.empty(T)
            for t in range(T):
                profile = rng.random() < cfg.profile_rate
                yaws[t] = 90.0 - rng.uniform(0.0, 60.0) if profile else rng.uniform(0.0, 30.0)
                q = 1.0 - rng.uniform(0.0, 1.0 - OUTLIER_QUALITY)  # (0.3, 1]
                noise = rng.standard_normal(d) / np.sqrt(d)
                base = u_prof if profile else u
                f = base + (cfg.noise_scale / q) * noise
                if rng.random() < cfg.outlier_rate:
                    f = rng.standard_normal(d)
                    q = OUTLIER_QUALITY
                feats[t] = _unit(f)
                quality[t] = q
            sets.append(FeatureSet(f"id{ident:04d}_s{k:02d}", ident, feats, yaws, quality))
    return Dataset(sets, cfg.num_identities, d)


def _dataset_from_sets(sets: list[FeatureSet], dim: int) -> Dataset:
    """Re-index identities densely in order of first appearance."""
    remap: dict[int, int] = {}
    out = []
    for s in sets:
        new = remap.setdefault(s.identity, len(remap))
        out.append(FeatureSet(s.set_id, new, s.features, s.yaws, s.quality))
    return Dataset(out, len(remap), dim)


def save_embeddings(ds: Dataset, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["set_id", "identity", "yaw"] + [f"f{i}" for i in range(ds.dim)])
    for s in sorted(ds.sets, key=lambda s: s.set_id):
        for t in range(len(s)):
            writer.writerow([s.set_id, s.identity, repr(float(s.yaws[t]))]
                            + [f"{v:.16e}" for v in s.features[t]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_embeddings(path) -> Dataset:
    """Parse the embedding CSV; errors name the offending line."""
    text = Path(path).read_text(encoding="utf-8")
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise DataError("line 1: empty file") from None
    if header[:3] != ["set_id", "identity", "yaw"] or len(header) < 5:
        raise DataError("line 1: header must be set_id,identity,yaw,f0,...,f{d-1} with d >= 2")
    dim = len(header) - 3
    if header[3:] != [f"f{i}" for i in range(dim)]:
        raise DataError("line 1: feature columns must be named f0..f{d-1}")

    groups: dict[str, tuple[int, list, list]] = {}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != dim + 3:
            raise DataError(f"line {lineno}: expected {dim + 3} fields, got {len(row)}")
        set_id = row[0]
        if not set_id:
            raise DataError(f"line {lineno}: empty set_id")
        try:
            identity = int(row[1])
            yaw = float(row[2])
            feat = np.array([float(v) for v in row[3:]])
        except ValueError as exc:
            raise DataError(f"line {lineno}: non-numeric field ({exc})") from None
        if identity < 0:
            raise DataError(f"line {lineno}: negative identity")
        if not 0.0 <= yaw <= 90.0:
            raise DataError(f"line {lineno}: yaw {yaw} outside [0, 90]")
        if not np.all(np.isfinite(feat)):
            raise DataError(f"line {lineno}: non-finite feature value")
        entry = groups.setdefault(set_id, (identity, [], []))
        if entry[0] != identity:
            raise DataError(f"line {lineno}: set {set_id!r} mixes identities")
        entry[1].append(feat)
        entry[2].append(yaw)
    if not groups:
        raise DataError("line 2: no data rows")
    sets = [FeatureSet(sid, ident, np.array(f), np.array(y)) for sid, (ident, f, y) in groups.items()]
    return _dataset_from_sets(sets, dim)


def split(ds: Dataset, test_fraction: float, seed: int | np.random.Generator) -> tuple[Dataset, Dataset]:
    """Identity-disjoint train/test partition; identities re-indexed per side."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    if ds.num_identities < 2:
        raise DataError("need at least two identities to split")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_test = int(round(ds.num_identities * test_fraction))
    n_test = min(max(n_test, 1), ds.num_identities - 1)
    perm = rng.permutation(ds.num_identities)
    test_ids = set(perm[:n_test].tolist())
    train = [s for s in ds.sets if s.identity not in test_ids]
    test = [s for s in ds.sets if s.identity in test_ids]
    return _dataset_from_sets(train, ds.dim), _dataset_from_sets(test, ds.dim)
