"""Datasets: manifest loading, truncation, splitting and synthetic generation.

Manifest layout (JSON)::

    {"task": "binary_classification", "atlas": "synthetic50",
     "subjects": [{"id": "sub-000", "series_file": "sub-000.csv", "target": 1}, ...]}

Each series file is a headerless CSV with one row per ROI and one column
per time point. ``series_file`` paths are resolved relative to the manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .connectome import TimeSeriesMatrix, n_pairs, pearson_connectivity, vectorize_upper

CLASSIFICATION = "binary_classification"
REGRESSION = "regression"
TASKS = (CLASSIFICATION, REGRESSION)


@dataclass
class Subject:
    subject_id: str
    bold: TimeSeriesMatrix
    target: float


@dataclass
class Dataset:
    subjects: list[Subject]
    task: str
    atlas_name: str = "unknown"

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not self.subjects:
            raise ValueError("dataset has no subjects")
        shape = self.subjects[0].bold.values.shape
        for s in self.subjects:
            if s.bold.values.shape != shape:
                raise ValueError(
                    f"subject {s.subject_id}: series shape {s.bold.values.shape} != {shape}"
                )
            if not math.isfinite(s.target):
                raise ValueError(f"subject {s.subject_id}: non-finite target")
            if self.task == CLASSIFICATION and s.target not in (0, 1):
                raise ValueError(f"subject {s.subject_id}: class target must be 0 or 1, got {s.target}")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n_roi(self) -> int:
        return self.subjects[0].bold.n_roi

    @property
    def series_length(self) -> int:
        return self.subjects[0].bold.length

    @property
    def targets(self) -> np.ndarray:
        return np.array([s.target for s in self.subjects], dtype=np.float64)

    @property
    def ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def subset(self, indices) -> "Dataset":
        # no validation: val/test subsets may legitimately hold one class
        out = object.__new__(Dataset)
        out.subjects = [self.subjects[i] for i in indices]
        out.task = self.task
        out.atlas_name = self.atlas_name
        return out

    def validate_full(self) -> None:
        if len(self.subjects) < 2:
            raise ValueError("dataset needs at least 2 subjects")
        if self.task == CLASSIFICATION and len(set(self.targets.tolist())) < 2:
            raise ValueError("classification dataset must contain both classes")


def connectomes(dataset: Dataset) -> np.ndarray:
    return np.stack([pearson_connectivity(s.bold) for s in dataset.subjects])


def feature_matrix(dataset: Dataset) -> np.ndarray:
    return np.stack([vectorize_upper(c) for c in connectomes(dataset)])


# -- manifests ---------------------------------------------------------------

def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    task = manifest.get("task")
    if task not in TASKS:
        raise ValueError(f"{manifest_path}: unknown task {task!r}; expected one of {TASKS}")
    atlas = manifest.get("atlas", "unknown")
    root = manifest_path.parent
    subjects = []
    shape = None
    for entry in manifest.get("subjects", []):
        sid = str(entry.get("id"))
        if "target" not in entry or entry["target"] is None:
            raise ValueError(f"subject {sid}: missing target")
        try:
            target = float(entry["target"])
        except (TypeError, ValueError):
            raise ValueError(f"subject {sid}: non-numeric target {entry['target']!r}") from None
        if not math.isfinite(target):
            raise ValueError(f"subject {sid}: non-finite target")
        if task == CLASSIFICATION and target not in (0.0, 1.0):
            raise ValueError(f"subject {sid}: class target must be 0 or 1, got {entry['target']!r}")
        path = root / entry["series_file"]
        if not path.exists():
            raise FileNotFoundError(f"subject {sid}: series file {path} not found")
        values = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
        if shape is None:
            shape = values.shape
        elif values.shape != shape:
            raise ValueError(f"subject {sid}: series shape {values.shape} != {shape}")
        try:
            bold = TimeSeriesMatrix(values)
        except ValueError as exc:
            raise ValueError(f"subject {sid}: {exc}") from None
        subjects.append(Subject(sid, bold, target))
    if len(subjects) < 2:
        raise ValueError(f"{manifest_path}: need at least 2 subjects, found {len(subjects)}")
    ds = Dataset(subjects, task, atlas)
    ds.validate_full()
    return ds


def save_dataset(dataset: Dataset, out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write ``dataset`` as manifest + per-subject CSV files; returns manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "series").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.subjects:
        rel = f"series/{s.subject_id}.csv"
        # repr-exact floats so reloads round-trip bit for bit
        np.savetxt(out_dir / rel, s.bold.values, delimiter=",", fmt="%.17g")
        target = int(s.target) if dataset.task == CLASSIFICATION else float(s.target)
        entries.append({"id": s.subject_id, "series_file": rel, "target": target})
    manifest = {"task": dataset.task, "atlas": dataset.atlas_name, "subjects": entries}
    path = out_dir / manifest_name
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def truncate_series(bold: TimeSeriesMatrix, length: int) -> TimeSeriesMatrix:
    if length < 2:
        raise ValueError(f"length must be >= 2, got {length}")
    if bold.length < length:
        raise ValueError(f"series has {bold.length} time points, cannot truncate to {length}")
    return TimeSeriesMatrix(bold.values[:, :length].copy(), list(bold.roi_labels))


def truncate_dataset(dataset: Dataset, length: int) -> Dataset:
    subs = [Subject(s.subject_id, truncate_series(s.bold, length), s.target) for s in dataset.subjects]
    return Dataset(subs, dataset.task, dataset.atlas_name)


# -- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    val_fraction: float = 0.10
    test_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self) -> None:
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) <= 0:
            raise ValueError(f"split fractions must be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_val = _round_half_up(spec.val_fraction * n)
    n_test = _round_half_up(spec.test_fraction * n)
    return n - n_val - n_test, n_val, n_test


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 10:
        raise ValueError(f"need at least 10 subjects to split, got {n}")
    n_train, n_val, n_test = split_sizes(n, spec)
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(f"split of {n} subjects leaves an empty subset: {(n_train, n_val, n_test)}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def make_split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    tr, va, te = split_indices(len(dataset), spec)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Latent-factor generator with target-dependent coupling on planted pairs.

    Each subject's series is ``L f + sum_p (a e_i + c_p e_j) g_p + noise``
    where ``f`` are shared background factors, ``g_p`` is a private factor
    for planted pair ``p = (i, j)``, ``a`` is fixed and
    ``c_p = sign_p * effect_size * z(target)``. The covariance between the
    two planted ROIs therefore shifts linearly with the standardized target
    while the model stays a valid (PSD) factor covariance.
    """

    n_subjects: int = 400
    n_roi: int = 50
    series_length: int = 128
    n_signal_edges: int = 100
    effect_size: float = 0.08
    task: str = CLASSIFICATION
    seed: int = 7
    n_background_factors: int = 5
    background_scale: float = 0.5
    pair_loading: float = 0.6
    noise_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_roi < 2 or self.series_length < 2 or self.n_subjects < 2:
            raise ValueError("need n_roi >= 2, series_length >= 2 and n_subjects >= 2")
        if not 0 <= self.n_signal_edges <= n_pairs(self.n_roi):
            raise ValueError(
                f"n_signal_edges={self.n_signal_edges} exceeds {n_pairs(self.n_roi)} available pairs"
            )
        if self.effect_size < 0:
            raise ValueError("effect_size must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    dataset: Dataset
    planted_pairs: list[tuple[int, int]] = field(default_factory=list)
    planted_signs: list[int] = field(default_factory=list)


def generate_synthetic_with_truth(config: SyntheticConfig) -> SyntheticDataset:
    rng = np.random.default_rng(config.seed)
    n, t = config.n_roi, config.series_length
    pairs_all = np.array(np.triu_indices(n, k=1)).T
    chosen = np.sort(rng.choice(len(pairs_all), size=config.n_signal_edges, replace=False))
    planted = [tuple(int(v) for v in pairs_all[c]) for c in chosen]
    signs = rng.choice([-1, 1], size=config.n_signal_edges).tolist()
    loadings = rng.normal(0.0, config.background_scale, size=(n, config.n_background_factors))

    if config.task == CLASSIFICATION:
        half = config.n_subjects // 2
        targets = np.array([1] * (config.n_subjects - half) + [0] * half, dtype=np.float64)
        rng.shuffle(targets)
    else:
        targets = rng.normal(0.0, 1.0, size=config.n_subjects)
    sd = targets.std()
    zt = (targets - targets.mean()) / (sd if sd > 0 else 1.0)

    subjects = []
    width = len(str(config.n_subjects - 1))
    for s in range(config.n_subjects):
        background = rng.normal(size=(config.n_background_factors, t))
        x = loadings @ background + config.noise_scale * rng.normal(size=(n, t))
        if planted:
            private = rng.normal(size=(len(planted), t))
            for p, (i, j) in enumerate(planted):
                c = signs[p] * config.effect_size * zt[s]
                x[i] += config.pair_loading * private[p]
                x[j] += c * private[p]
        target = int(targets[s]) if config.task == CLASSIFICATION else float(targets[s])
        subjects.append(Subject(f"sub-{s:0{width}d}", TimeSeriesMatrix(x), target))
    ds = Dataset(subjects, config.task, f"synthetic{n}")
    ds.validate_full()
    return SyntheticDataset(ds, planted, signs)


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    return generate_synthetic_with_truth(config).dataset
