"""Connectivity construction from ROI time series.

Everything here is a pure function over 64-bit numpy arrays: Pearson
connectomes, upper-triangle vectorization, top-K% edge thresholding and
connection-profile node features.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

POSITIVE_ONLY = "positive_only"
SIGNED = "signed"
SIGN_MODES = (POSITIVE_ONLY, SIGNED)


class ConnectomeWarning(UserWarning):
    """Raised for recoverable numerical degeneracies (zero variance, etc.)."""


@dataclass
class TimeSeriesMatrix:
    """BOLD signals, one row per ROI and one column per time point."""

    values: np.ndarray
    roi_labels: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected a 2-D (n_roi, t) array, got shape {self.values.shape}")
        n_roi, t = self.values.shape
        if n_roi < 2 or t < 2:
            raise ValueError(f"need at least 2 ROIs and 2 time points, got {self.values.shape}")
        if not self.roi_labels:
            self.roi_labels = [f"roi_{i}" for i in range(n_roi)]
        elif len(self.roi_labels) != n_roi:
            raise ValueError(f"{len(self.roi_labels)} labels for {n_roi} ROIs")
        check_finite_rows(self.values, self.roi_labels)

    @property
    def n_roi(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class BrainGraph:
    adjacency: np.ndarray
    node_features: np.ndarray
    density_k: float
    sign_mode: str = POSITIVE_ONLY

    def __post_init__(self) -> None:
        n = self.adjacency.shape[0]
        if self.node_features.shape[0] != n:
            raise ValueError(
                f"node_features has {self.node_features.shape[0]} rows, adjacency is {n}x{n}"
            )


def check_finite_rows(values: np.ndarray, roi_labels: Sequence[str] | None = None) -> None:
    bad = ~np.isfinite(values).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        name = roi_labels[i] if roi_labels else f"row {i}"
        raise ValueError(f"non-finite values in ROI {name!r} (index {i})")


def _as_array(bold) -> tuple[np.ndarray, list[str] | None]:
    if isinstance(bold, TimeSeriesMatrix):
        return bold.values, bold.roi_labels
    return np.asarray(bold, dtype=np.float64), None


def pearson_connectivity(bold) -> np.ndarray:
    """Pearson correlation between every pair of ROI series.

    Accepts a :class:`TimeSeriesMatrix` or an ``(n_roi, t)`` array. Rows
    with zero variance correlate 0 with every other row (a
    :class:`ConnectomeWarning` is emitted). The result is exactly
    symmetric, has a unit diagonal and is clamped to ``[-1, 1]``.
    """
    x, labels = _as_array(bold)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"expected (n_roi>=2, t>=2) array, got shape {x.shape}")
    check_finite_rows(x, labels)

    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", centered, centered))
    # relative test so huge-offset constant rows still count as flat
    scale = np.abs(x).max(axis=1)
    flat = norms <= 1e-12 * np.maximum(scale, 1.0) * math.sqrt(x.shape[1])
    if flat.any():
        idx = np.flatnonzero(flat).tolist()
        warnings.warn(f"zero-variance ROI series at indices {idx}; correlations set to 0",
                      ConnectomeWarning, stacklevel=2)
    safe = np.where(flat, 1.0, norms)
    z = centered / safe[:, None]
    z[flat] = 0.0
    corr = z @ z.T
    corr = np.clip(corr, -1.0, 1.0)
    # exact symmetry: mirror the upper triangle
    iu = np.triu_indices(corr.shape[0], k=1)
    corr.T[iu] = corr[iu]
    np.fill_diagonal(corr, 1.0)
    return corr


def n_pairs(n: int) -> int:
    return n * (n - 1) // 2


def upper_index_map(n: int) -> list[tuple[int, int]]:
    """Row-major (i, j), i < j, positions of the vectorized upper triangle."""
    rows, cols = np.triu_indices(n, k=1)
    return list(zip(rows.tolist(), cols.tolist()))


def vectorize_upper(conn: np.ndarray) -> np.ndarray:
    conn = np.asarray(conn)
    return conn[np.triu_indices(conn.shape[0], k=1)].copy()


def n_from_pairs(length: int) -> int:
    n = int(round((1 + math.sqrt(1 + 8 * length)) / 2))
    if n_pairs(n) != length:
        raise ValueError(f"{length} is not a triangular number n(n-1)/2")
    return n


def devectorize(u: np.ndarray, diagonal: float = 1.0) -> np.ndarray:
    """Inverse of :func:`vectorize_upper`, filling both triangles."""
    u = np.asarray(u)
    n = n_from_pairs(u.shape[-1])
    out = np.zeros(u.shape[:-1] + (n, n), dtype=u.dtype if u.dtype.kind == "f" else np.float64)
    iu = np.triu_indices(n, k=1)
    out[..., iu[0], iu[1]] = u
    out[..., iu[1], iu[0]] = u
    idx = np.arange(n)
    out[..., idx, idx] = diagonal
    return out


def edge_budget(k_percent: float, n: int) -> int:
    """``ceil(k/100 * n(n-1)/2)`` evaluated in exact rational arithmetic.

    Float evaluation rounds 5% of 64620 up to 3232; ``Fraction(str(k))``
    keeps the decimal literal exact.
    """
    if not 0 <= k_percent <= 100:
        raise ValueError(f"k_percent must lie in [0, 100], got {k_percent}")
    exact = Fraction(str(k_percent)) * n_pairs(n) / 100
    return math.ceil(exact)


def rank_pairs(scores: np.ndarray) -> np.ndarray:
    """Order pair positions by score descending, ties by position ascending.

    Positions follow the row-major upper-triangle order, so position order
    is the (i asc, j asc) lexicographic tie-break.
    """
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def threshold_top_k(conn: np.ndarray, k_percent: float, sign_mode: str = POSITIVE_ONLY) -> np.ndarray:
    """Keep the top ``k_percent`` of all ``n(n-1)/2`` possible pairs.

    ``positive_only`` ranks positive weights and may keep fewer than the
    budget; ``signed`` ranks by ``|w|`` and preserves signs.
    """
    if sign_mode not in SIGN_MODES:
        raise ValueError(f"unknown sign_mode {sign_mode!r}; expected one of {SIGN_MODES}")
    conn = np.asarray(conn, dtype=np.float64)
    n = conn.shape[0]
    budget = edge_budget(k_percent, n)
    adj = np.zeros((n, n), dtype=np.float64)
    if budget == 0:
        return adj
    rows, cols = np.triu_indices(n, k=1)
    w = conn[rows, cols]
    if sign_mode == POSITIVE_ONLY:
        eligible = w > 0
        scores = np.where(eligible, w, -np.inf)
    else:
        eligible = w != 0
        scores = np.where(eligible, np.abs(w), -np.inf)
    keep = rank_pairs(scores)[: min(budget, int(eligible.sum()))]
    adj[rows[keep], cols[keep]] = w[keep]
    adj[cols[keep], rows[keep]] = w[keep]
    return adj


def connection_profiles(conn: np.ndarray) -> np.ndarray:
    """Node features = connectome rows, self-entry included."""
    return np.array(conn, dtype=np.float64, copy=True)


def build_graph(conn: np.ndarray, k_percent: float, sign_mode: str = POSITIVE_ONLY,
                node_features: np.ndarray | None = None) -> BrainGraph:
    adj = threshold_top_k(conn, k_percent, sign_mode)
    feats = connection_profiles(conn) if node_features is None else node_features
    return BrainGraph(adj, feats, float(k_percent), sign_mode)
