"""Edge-, node- and subgraph-level interpretation of a dual-pathway model.

Maps come in two kinds: ``attention`` (first GAT layer, min-max scaled to
[0, 1]) and ``lm_weight`` (linear-pathway weights over ``u``, divided by
their largest magnitude into [-1, 1]). Graph properties of the top
fraction of edges are computed on the binarized, edge-induced subgraph.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import networkx as nx
import numpy as np
import torch
from scipy.sparse.csgraph import shortest_path

from .connectome import ConnectomeWarning, devectorize, edge_budget, rank_pairs
from .data_io import CLASSIFICATION, Dataset

ATTENTION = "attention"
LM_WEIGHT = "lm_weight"
SYSTEMS = ("SM", "DMN", "VS", "CE", "DS", "Vis")
NODE_MODES = {"attention_rowsum": ATTENTION, "positive_weights": LM_WEIGHT,
              "negative_weights": LM_WEIGHT}


@dataclass
class EdgeImportanceMap:
    values: np.ndarray
    kind: str
    normalization: str

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class NodeImportance:
    scores: np.ndarray
    mode: str
    top_k_indices: list[int]


@dataclass
class NullConfig:
    n_nulls: int = 10
    rewires_per_edge: int = 20
    seed: int = 0


@dataclass
class GraphPropertyReport:
    n_nodes: int
    n_edges: int
    degree_histogram: list[int]
    clustering_coefficient: float
    modularity: float
    avg_shortest_path: float
    global_efficiency: float
    small_worldness: float
    assortativity: float
    communities: list[list[int]] = field(default_factory=list)
    undefined: list[str] = field(default_factory=list)
    louvain_seed: int = 0
    null_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no NaN; undefined metrics are listed by name instead
        for key, val in d.items():
            if isinstance(val, float) and not math.isfinite(val):
                d[key] = None
        return d


# -- normalization -------------------------------------------------------------

def minmax_offdiag(m: np.ndarray) -> np.ndarray:
    """Min-max scale off-diagonal entries to [0, 1] and zero the diagonal.

    A single off-diagonal pair (n = 2) maps to 1 when positive. When several
    pairs all share one value the scaling is undefined and the map becomes
    all zeros with a warning.
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    out = np.zeros_like(m)
    if n < 2:
        return out
    iu = np.triu_indices(n, k=1)
    vals = m[iu]
    lo, hi = vals.min(), vals.max()
    if vals.size == 1:
        scaled = np.array([1.0 if vals[0] > 0 else 0.0])
    elif hi == lo:
        warnings.warn("constant map: min-max normalization undefined, returning zeros",
                      ConnectomeWarning, stacklevel=2)
        return out
    else:
        scaled = (vals - lo) / (hi - lo)
    out[iu] = scaled
    out[iu[1], iu[0]] = scaled
    return out


def maxabs_offdiag(m: np.ndarray) -> np.ndarray:
    m = np.array(m, dtype=np.float64)
    np.fill_diagonal(m, 0.0)
    top = np.abs(m).max() if m.size else 0.0
    if top == 0:
        warnings.warn("all-zero weights: returning an all-zero map", ConnectomeWarning, stacklevel=2)
        return np.zeros_like(m)
    return m / top


# -- maps ------------------------------------------------------------------------

def attention_map_from_samples(attention: np.ndarray) -> EdgeImportanceMap:
    """Aggregate ``(samples, heads, n, n)`` attention into a normalized map.

    Heads are averaged, each sample is symmetrized as ``(M + M.T) / 2``,
    samples are averaged, and the result is min-max scaled.
    """
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim != 4 or att.shape[0] == 0:
        raise ValueError("expected nonempty (samples, heads, n, n) attention")
    per_sample = att.mean(axis=1)
    sym = (per_sample + per_sample.transpose(0, 2, 1)) / 2.0
    return EdgeImportanceMap(minmax_offdiag(sym.mean(axis=0)), ATTENTION, "minmax_01")


def mean_attention_map(model, dataset: Dataset, batch_size: int = 64) -> EdgeImportanceMap:
    from .dual_pathway import dataset_tensors

    if len(dataset) == 0:
        raise ValueError("cannot build an attention map from an empty test set")
    dtype = next(model.parameters()).dtype
    bold, adj, _ = dataset_tensors(dataset, model.config.density_k, dtype)
    total = None
    model.eval()
    with torch.no_grad():
        for start in range(0, bold.shape[0], batch_size):
            att = model.first_layer_attention(bold[start:start + batch_size], adj[start:start + batch_size])
            m = att.double().mean(dim=1)
            m = (m + m.transpose(1, 2)) / 2.0
            s = m.sum(dim=0)
            total = s if total is None else total + s
    mean = (total / bold.shape[0]).numpy()
    return EdgeImportanceMap(minmax_offdiag(mean), ATTENTION, "minmax_01")


def weights_to_map(head_u_weight: np.ndarray, task: str) -> EdgeImportanceMap:
    """Linear-pathway weights (``out x n_pairs``) as a max-abs scaled map.

    For classification the class-difference ``w[1] - w[0]`` is used.
    """
    w = np.asarray(head_u_weight, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    vec = w[1] - w[0] if task == CLASSIFICATION else w[0]
    return EdgeImportanceMap(maxabs_offdiag(devectorize(vec, diagonal=0.0)), LM_WEIGHT, "maxabs_pm1")


def lm_weight_map(model) -> EdgeImportanceMap:
    return weights_to_map(model.head_u.weight.detach().double().numpy(), model.task)


def _importance(emap: EdgeImportanceMap, values: np.ndarray) -> np.ndarray:
    return np.abs(values) if emap.kind == LM_WEIGHT else values


def top_edges(emap: EdgeImportanceMap, fraction: float) -> list[tuple[int, int, float]]:
    """Top ``fraction`` percent of the ``n(n-1)/2`` pairs, most important first."""
    if not 0 < fraction <= 100:
        raise ValueError(f"fraction must lie in (0, 100], got {fraction}")
    n = emap.n
    rows, cols = np.triu_indices(n, k=1)
    vals = emap.values[rows, cols]
    order = rank_pairs(_importance(emap, vals))[: edge_budget(fraction, n)]
    return [(int(rows[k]), int(cols[k]), float(vals[k])) for k in order]


def node_importance(emap: EdgeImportanceMap, mode: str, top_k: int = 20) -> NodeImportance:
    if mode not in NODE_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if NODE_MODES[mode] != emap.kind:
        raise ValueError(f"mode {mode!r} requires a {NODE_MODES[mode]} map, got {emap.kind}")
    m = np.array(emap.values, dtype=np.float64)
    np.fill_diagonal(m, 0.0)
    if mode == "attention_rowsum":
        scores = m.sum(axis=1)
    elif mode == "positive_weights":
        scores = np.maximum(m, 0.0).sum(axis=1)
    else:
        scores = np.maximum(-m, 0.0).sum(axis=1)
    order = rank_pairs(scores)[:top_k]
    return NodeImportance(scores, mode, [int(i) for i in order])


# -- graph properties ----------------------------------------------------------------

def _binary(adj: np.ndarray) -> np.ndarray:
    a = np.asarray(adj) != 0
    a = a | a.T
    np.fill_diagonal(a, False)
    return a


def distance_matrix(adj: np.ndarray) -> np.ndarray:
    """Hop distances; ``inf`` for disconnected pairs."""
    return shortest_path(_binary(adj).astype(np.float64), method="D", unweighted=True, directed=False)


def average_clustering(adj: np.ndarray) -> float:
    a = _binary(adj).astype(np.int64)
    n = a.shape[0]
    if n == 0:
        return float("nan")
    k = a.sum(axis=1)
    tri2 = np.einsum("ij,jk,ki->i", a, a, a)  # 2 x triangles through i
    total = sum((Fraction(int(t), int(d) * (int(d) - 1)) for t, d in zip(tri2, k) if d >= 2), Fraction(0))
    return float(total / n)


def _pair_distance_counts(adj: np.ndarray) -> dict[int, int]:
    d = distance_matrix(adj)
    iu = np.triu_indices(d.shape[0], k=1)
    vals = d[iu]
    vals = vals[np.isfinite(vals)].astype(np.int64)
    uniq, counts = np.unique(vals, return_counts=True)
    return dict(zip(uniq.tolist(), counts.tolist()))


def average_shortest_path(adj: np.ndarray) -> float:
    """Mean hop distance over connected pairs only."""
    counts = _pair_distance_counts(adj)
    pairs = sum(counts.values())
    if pairs == 0:
        return float("nan")
    return sum(d * c for d, c in counts.items()) / pairs


def global_efficiency(adj: np.ndarray) -> float:
    """Mean of ``1/d`` over all pairs, disconnected pairs contributing 0."""
    n = np.asarray(adj).shape[0]
    if n < 2:
        return float("nan")
    counts = _pair_distance_counts(adj)
    total = sum((Fraction(c, d) for d, c in counts.items()), Fraction(0))
    return float(total / (n * (n - 1) // 2))


def degree_assortativity(adj: np.ndarray) -> float:
    """Newman's degree correlation over edge endpoints (``nan`` if undefined)."""
    a = _binary(adj)
    k = a.sum(axis=1).astype(np.int64)
    rows, cols = np.nonzero(np.triu(a, k=1))
    m = len(rows)
    if m == 0:
        return float("nan")
    j, kk = k[rows].tolist(), k[cols].tolist()
    s_prod = sum(x * y for x, y in zip(j, kk))
    s_sum = sum(x + y for x, y in zip(j, kk))
    s_sq = sum(x * x + y * y for x, y in zip(j, kk))
    mean = Fraction(s_sum, 2 * m)
    num = Fraction(s_prod, m) - mean ** 2
    den = Fraction(s_sq, 2 * m) - mean ** 2
    if den == 0:
        return float("nan")
    return float(num / den)


def modularity(adj: np.ndarray, communities) -> float:
    """Newman-Girvan modularity of a node partition."""
    a = _binary(adj)
    k = a.sum(axis=1)
    two_m = k.sum()
    if two_m == 0:
        return float("nan")
    q = 0.0
    for comm in communities:
        idx = np.asarray(sorted(comm), dtype=np.int64)
        inner = a[np.ix_(idx, idx)].sum()  # counts each internal edge twice
        q += inner / two_m - (k[idx].sum() / two_m) ** 2
    return float(q)


def louvain_partition(adj: np.ndarray, seed: int = 0) -> list[list[int]]:
    g = to_networkx(adj)
    comms = nx.community.louvain_communities(g, seed=seed)
    return sorted(sorted(int(v) for v in c) for c in comms)


def to_networkx(adj: np.ndarray) -> nx.Graph:
    a = _binary(adj)
    g = nx.Graph()
    g.add_nodes_from(range(a.shape[0]))
    rows, cols = np.nonzero(np.triu(a, k=1))
    g.add_edges_from(zip(rows.tolist(), cols.tolist()))
    return g


def degree_preserving_nulls(adj: np.ndarray, config: NullConfig) -> list[np.ndarray]:
    g = to_networkx(adj)
    m = g.number_of_edges()
    rng = np.random.default_rng(config.seed)
    nulls = []
    for _ in range(config.n_nulls):
        h = g.copy()
        nswap = config.rewires_per_edge * m
        try:
            nx.double_edge_swap(h, nswap=nswap, max_tries=max(100 * nswap, 1000),
                                seed=int(rng.integers(2**31 - 1)))
        except (nx.NetworkXError, nx.NetworkXAlgorithmError):
            warnings.warn("graph too small or dense to rewire; null equals the input graph",
                          ConnectomeWarning, stacklevel=2)
        nulls.append(nx.to_numpy_array(h, nodelist=range(adj.shape[0])) != 0)
    return nulls


def small_worldness(adj: np.ndarray, config: NullConfig | None = None) -> float:
    """Humphries-Gurney sigma against degree-preserving rewired nulls."""
    config = config or NullConfig()
    c, l = average_clustering(adj), average_shortest_path(adj)
    nulls = degree_preserving_nulls(adj, config)
    c_null = float(np.mean([average_clustering(h) for h in nulls]))
    l_null = float(np.mean([average_shortest_path(h) for h in nulls]))
    if not all(math.isfinite(v) for v in (c, l, c_null, l_null)) or c_null == 0 or l == 0:
        return float("nan")
    return (c / c_null) / (l / l_null)


def graph_properties(adj: np.ndarray, null_config: NullConfig | None = None,
                     louvain_seed: int = 0) -> GraphPropertyReport:
    null_config = null_config or NullConfig()
    a = _binary(adj)
    n = a.shape[0]
    n_edges = int(np.triu(a, k=1).sum())
    if n_edges == 0:
        nan = float("nan")
        names = ["clustering_coefficient", "modularity", "avg_shortest_path", "global_efficiency",
                 "small_worldness", "assortativity"]
        return GraphPropertyReport(n, 0, np.bincount(np.zeros(n, dtype=int)).tolist() if n else [],
                                   nan, nan, nan, nan, nan, nan, [], names, louvain_seed, null_config.seed)
    deg = a.sum(axis=1)
    comms = louvain_partition(a, louvain_seed)
    report = GraphPropertyReport(
        n_nodes=n,
        n_edges=n_edges,
        degree_histogram=np.bincount(deg).tolist(),
        clustering_coefficient=average_clustering(a),
        modularity=modularity(a, comms),
        avg_shortest_path=average_shortest_path(a),
        global_efficiency=global_efficiency(a),
        small_worldness=small_worldness(a, null_config),
        assortativity=degree_assortativity(a),
        communities=comms,
        louvain_seed=louvain_seed,
        null_seed=null_config.seed,
    )
    report.undefined = [k for k in ("clustering_coefficient", "modularity", "avg_shortest_path",
                                    "global_efficiency", "small_worldness", "assortativity")
                        if not math.isfinite(getattr(report, k))]
    return report


def top_edge_subgraph(emap: EdgeImportanceMap, fraction: float) -> tuple[np.ndarray, list[int]]:
    """Binary adjacency of the edge-induced top-``fraction`` subgraph and its ROI ids."""
    edges = top_edges(emap, fraction)
    nodes = sorted({i for i, _, _ in edges} | {j for _, j, _ in edges})
    pos = {v: k for k, v in enumerate(nodes)}
    a = np.zeros((len(nodes), len(nodes)), dtype=bool)
    for i, j, _ in edges:
        a[pos[i], pos[j]] = a[pos[j], pos[i]] = True
    return a, nodes


def subgraph_metrics(emap: EdgeImportanceMap, fraction: float = 5.0,
                     null_config: NullConfig | None = None, louvain_seed: int = 0) -> GraphPropertyReport:
    a, nodes = top_edge_subgraph(emap, fraction)
    report = graph_properties(a, null_config, louvain_seed)
    report.communities = [[nodes[v] for v in c] for c in report.communities]
    return report


# -- neural systems ------------------------------------------------------------------

@dataclass
class SystemAtlas:
    roi_labels: list[str]
    systems: list[str]

    def __post_init__(self) -> None:
        if len(self.roi_labels) != len(self.systems):
            raise ValueError("roi_labels and systems differ in length")
        bad = sorted(set(self.systems) - set(SYSTEMS))
        if bad:
            raise ValueError(f"unknown systems {bad}; expected names from {SYSTEMS}")

    def __len__(self) -> int:
        return len(self.systems)


def load_atlas(path) -> SystemAtlas:
    """Read ``roi_index,roi_label,system`` CSV rows (any order) into an atlas."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["roi_index"]))
    idx = [int(r["roi_index"]) for r in rows]
    if idx != list(range(len(rows))):
        raise ValueError(f"{path}: roi_index must cover 0..{len(rows) - 1} exactly once")
    return SystemAtlas([r["roi_label"] for r in rows], [r["system"].strip() for r in rows])


def save_atlas(atlas: SystemAtlas, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["roi_index", "roi_label", "system"])
        for i, (lab, sysname) in enumerate(zip(atlas.roi_labels, atlas.systems)):
            w.writerow([i, lab, sysname])


def round_robin_atlas(n_roi: int) -> SystemAtlas:
    """Placeholder atlas cycling through the six systems (for synthetic data)."""
    return SystemAtlas([f"roi_{i}" for i in range(n_roi)], [SYSTEMS[i % len(SYSTEMS)] for i in range(n_roi)])


def map_rois_to_systems(atlas: SystemAtlas, emap: EdgeImportanceMap):
    """6x6 mean importance between systems plus the ROI indices of each system."""
    n = emap.n
    if len(atlas) != n:
        raise ValueError(f"atlas covers {len(atlas)} ROIs but the map has {n}")
    groups = {s: [i for i, name in enumerate(atlas.systems) if name == s] for s in SYSTEMS}
    vals = np.asarray(emap.values, dtype=np.float64)
    blocks = np.zeros((len(SYSTEMS), len(SYSTEMS)))
    for a, sa in enumerate(SYSTEMS):
        for b, sb in enumerate(SYSTEMS):
            ia, ib = groups[sa], groups[sb]
            if not ia or not ib:
                continue
            sub = vals[np.ix_(ia, ib)]
            if sa == sb:
                count = len(ia) * (len(ia) - 1)
                total = sub.sum() - np.trace(sub)
            else:
                count = len(ia) * len(ib)
                total = sub.sum()
            blocks[a, b] = total / count if count else 0.0
    blocks = (blocks + blocks.T) / 2.0
    return blocks, groups


# -- bundle ------------------------------------------------------------------------------

def write_report_bundle(out_dir, maps: dict[str, EdgeImportanceMap], atlas: SystemAtlas,
                        top_fraction: float = 0.1, subgraph_fraction: float = 5.0,
                        null_config: NullConfig | None = None, louvain_seed: int = 0,
                        top_nodes: int = 20, metadata: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, emap in maps.items():
        p = out / f"edge_map_{kind}.csv"
        np.savetxt(p, emap.values, delimiter=",", fmt="%.17g")
        written.append(p)

        p = out / f"top_edges_{kind}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "value", "system_i", "system_j"])
            for i, j, v in top_edges(emap, top_fraction):
                w.writerow([i, j, repr(v), atlas.systems[i], atlas.systems[j]])
        written.append(p)

        modes = ["attention_rowsum"] if kind == ATTENTION else ["positive_weights", "negative_weights"]
        for mode in modes:
            ni = node_importance(emap, mode, top_nodes)
            p = out / f"node_importance_{mode}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["roi_index", "roi_label", "system", "score", "rank"])
                rank = {r: k + 1 for k, r in enumerate(ni.top_k_indices)}
                for i, s in enumerate(ni.scores):
                    w.writerow([i, atlas.roi_labels[i], atlas.systems[i], repr(float(s)), rank.get(i, "")])
            written.append(p)

        report = subgraph_metrics(emap, subgraph_fraction, null_config, louvain_seed)
        payload = {"kind": kind, "fraction": subgraph_fraction, **report.to_dict(),
                   "metadata": metadata or {}}
        p = out / f"graph_properties_{kind}.json"
        p.write_text(json.dumps(payload, indent=2, sort_keys=True))
        written.append(p)

        blocks, _ = map_rois_to_systems(atlas, emap)
        p = out / f"system_blocks_{kind}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["system", *SYSTEMS])
            for s, row in zip(SYSTEMS, blocks):
                w.writerow([s, *(repr(float(v)) for v in row)])
        written.append(p)
    return written
