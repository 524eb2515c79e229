"""Dense message-passing models over brain graphs.

All layers take a padded dense batch: node features ``(B, n, d)`` and an
adjacency ``(B, n, n)`` with zero diagonal. Self-loops are handled inside
each layer:

* GCN adds weight-1 self-loops before symmetric degree normalization and
  aggregates with the correlation weights themselves.
* GAT attends over ``neighbours ∪ self`` (edge presence only).
* GIN and GraphSAGE treat the centre node through their explicit self terms
  and binarize edges.

With an empty adjacency (K = 0) every layer is a per-node map, so no
information flows between ROIs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .connectome import POSITIVE_ONLY, SIGN_MODES, BrainGraph, n_pairs, threshold_top_k
from .data_io import Dataset, SplitSpec, connectomes, make_split
from .metrics import evaluate
from .training import TrainConfig, TrainHistory, fit_model, output_dim, predict_scores

ARCHITECTURES = ("gcn", "gat", "gin", "sage")
READOUTS = ("concat", "mean")

# top-K% default densities per model family
DEFAULT_DENSITY = {"gcn": 5.0, "gat": 5.0, "gin": 5.0, "sage": 5.0, "neurograph": 5.0,
                   "braingnn": 10.0, "signed": 100.0}


@dataclass(frozen=True)
class GNNSpec:
    """Architecture and graph-construction settings for one GNN.

    ``layer_concat`` switches to the residual-wrapper head: pooled
    embeddings of every layer are concatenated, batch-normalized and fed to
    a two-layer MLP. ``residual`` additionally appends the vectorized
    connectome ``u`` to that concatenation (and implies ``layer_concat``).
    """

    architecture: str = "gcn"
    n_layers: int = 2
    hidden_dim: int = 32
    heads: int = 2
    epsilon: float = 0.0
    aggregator: str = "mean"
    readout: str = "concat"
    residual: bool = False
    layer_concat: bool = False
    density_k: float = 5.0
    sign_mode: str = POSITIVE_ONLY
    seed: int = 0

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.n_layers < 1 or self.hidden_dim < 1 or self.heads < 1:
            raise ValueError("n_layers, hidden_dim and heads must all be >= 1")
        if self.aggregator not in ("mean", "max"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.sign_mode not in SIGN_MODES:
            raise ValueError(f"unknown sign_mode {self.sign_mode!r}")
        if not 0 <= self.density_k <= 100:
            raise ValueError("density_k must lie in [0, 100]")

    @property
    def wrapped(self) -> bool:
        return self.residual or self.layer_concat

    def to_dict(self) -> dict:
        return asdict(self)


def _eye_like(adj: torch.Tensor) -> torch.Tensor:
    n = adj.shape[-1]
    return torch.eye(n, dtype=adj.dtype, device=adj.device).expand_as(adj)


class GCNLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lin = nn.Linear(in_dim, out_dim, bias=False)
        self.bias = nn.Parameter(torch.zeros(out_dim))
        bound = 1.0 / math.sqrt(in_dim)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        a_hat = adj + _eye_like(adj)
        # |w| keeps the degree positive for signed graphs
        deg = a_hat.abs().sum(-1)
        norm = deg.clamp(min=1e-12).rsqrt()
        h = self.lin(x)
        agg = norm.unsqueeze(-1) * (a_hat @ (norm.unsqueeze(-1) * h))
        return agg + self.bias


class GATLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, heads: int = 1, concat: bool = True,
                 negative_slope: float = 0.2):
        super().__init__()
        self.heads, self.out_dim, self.concat = heads, out_dim, concat
        self.negative_slope = negative_slope
        self.lin = nn.Linear(in_dim, heads * out_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, out_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, out_dim))
        self.bias = nn.Parameter(torch.zeros(heads * out_dim if concat else out_dim))
        bound = 1.0 / math.sqrt(out_dim)
        for p in (self.att_src, self.att_dst, self.bias):
            nn.init.uniform_(p, -bound, bound)

    @property
    def out_features(self) -> int:
        return self.heads * self.out_dim if self.concat else self.out_dim

    def forward(self, x: torch.Tensor, adj: torch.Tensor, return_attention: bool = False):
        bsz, n, _ = x.shape
        h = self.lin(x).view(bsz, n, self.heads, self.out_dim)
        e_src = (h * self.att_src).sum(-1)  # (B, n, H)
        e_dst = (h * self.att_dst).sum(-1)
        # score[b, k, i, j]: message j -> i
        score = e_dst.permute(0, 2, 1).unsqueeze(-1) + e_src.permute(0, 2, 1).unsqueeze(-2)
        score = F.leaky_relu(score, self.negative_slope)
        mask = (adj != 0) | _eye_like(adj).bool()
        score = score.masked_fill(~mask.unsqueeze(1), float("-inf"))
        alpha = torch.softmax(score, dim=-1)  # (B, H, n, n)
        out = alpha @ h.permute(0, 2, 1, 3)  # (B, H, n, out)
        out = out.permute(0, 2, 1, 3)
        out = out.reshape(bsz, n, -1) if self.concat else out.mean(dim=2)
        out = out + self.bias
        return (out, alpha) if return_attention else out


class GINLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, epsilon: float = 0.0):
        super().__init__()
        self.epsilon = epsilon
        self.mlp = nn.Sequential(nn.Linear(in_dim, out_dim), nn.ReLU(), nn.Linear(out_dim, out_dim))

    def aggregate(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        return (1.0 + self.epsilon) * x + (adj != 0).to(x.dtype) @ x

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.aggregate(x, adj))


class SAGELayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, aggregator: str = "mean"):
        super().__init__()
        self.aggregator = aggregator
        self.lin_self = nn.Linear(in_dim, out_dim)
        self.lin_neigh = nn.Linear(in_dim, out_dim, bias=False)

    def aggregate(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        mask = adj != 0
        has_nb = mask.any(-1, keepdim=True)
        if self.aggregator == "mean":
            a = mask.to(x.dtype)
            return (a @ x) / a.sum(-1, keepdim=True).clamp(min=1.0)
        expanded = x.unsqueeze(1).expand(-1, x.shape[1], -1, -1)  # (B, i, j, d)
        masked = expanded.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        agg = masked.max(dim=2).values
        return torch.where(has_nb, agg, torch.zeros_like(agg))

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        return self.lin_self(x) + self.lin_neigh(self.aggregate(x, adj))


def build_convs(spec: GNNSpec, in_dim: int) -> tuple[nn.ModuleList, list[int]]:
    convs, dims = nn.ModuleList(), []
    d = in_dim
    for layer in range(spec.n_layers):
        last = layer == spec.n_layers - 1
        if spec.architecture == "gcn":
            conv = GCNLayer(d, spec.hidden_dim)
            d = spec.hidden_dim
        elif spec.architecture == "gat":
            conv = GATLayer(d, spec.hidden_dim, spec.heads, concat=not last)
            d = conv.out_features
        elif spec.architecture == "gin":
            conv = GINLayer(d, spec.hidden_dim, spec.epsilon)
            d = spec.hidden_dim
        else:
            conv = SAGELayer(d, spec.hidden_dim, spec.aggregator)
            d = spec.hidden_dim
        convs.append(conv)
        dims.append(d)
    return convs, dims


def readout(h: torch.Tensor, kind: str) -> torch.Tensor:
    return h.flatten(1) if kind == "concat" else h.mean(dim=1)


def residual_augment(hidden_embeddings, u: torch.Tensor | None) -> torch.Tensor:
    """Concatenate per-layer pooled embeddings, plus ``u`` when given."""
    parts = list(hidden_embeddings)
    if u is not None:
        parts.append(u)
    return torch.cat(parts, dim=-1)


class GNNModel(nn.Module):
    def __init__(self, spec: GNNSpec, in_dim: int, n_nodes: int, task: str):
        super().__init__()
        self.spec, self.task, self.n_nodes = spec, task, n_nodes
        with torch.random.fork_rng():
            torch.manual_seed(spec.seed)
            self.convs, dims = build_convs(spec, in_dim)
            pooled = [d * n_nodes if spec.readout == "concat" else d for d in dims]
            out = output_dim(task)
            if spec.wrapped:
                width = sum(pooled) + (n_pairs(n_nodes) if spec.residual else 0)
                self.norm = nn.BatchNorm1d(width)
                self.head = nn.Sequential(nn.Linear(width, spec.hidden_dim), nn.ReLU(),
                                          nn.Linear(spec.hidden_dim, out))
            else:
                self.norm = None
                self.head = nn.Linear(pooled[-1], out)
        self.act = F.elu if spec.architecture == "gat" else F.relu
        self.register_buffer("_triu", torch.triu_indices(n_nodes, n_nodes, offset=1), persistent=False)

    def node_embeddings(self, adj: torch.Tensor, x: torch.Tensor) -> list[torch.Tensor]:
        hs, h = [], x
        for conv in self.convs:
            h = self.act(conv(h, adj))
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations in {type(conv).__name__}")
            hs.append(h)
        return hs

    def forward(self, adj: torch.Tensor, x: torch.Tensor, u: torch.Tensor | None = None) -> torch.Tensor:
        hs = self.node_embeddings(adj, x)
        if not self.spec.wrapped:
            return self.head(readout(hs[-1], self.spec.readout))
        if self.spec.residual and u is None:
            u = x[:, self._triu[0], self._triu[1]]
        z = residual_augment([readout(h, self.spec.readout) for h in hs],
                             u if self.spec.residual else None)
        return self.head(self.norm(z))


# -- data plumbing -----------------------------------------------------------

def graph_arrays(conns: np.ndarray, density_k: float, sign_mode: str):
    """(adjacency, node features, u) arrays for a stack of connectomes."""
    adj = np.stack([threshold_top_k(c, density_k, sign_mode) for c in conns])
    iu = np.triu_indices(conns.shape[1], k=1)
    return adj, conns.copy(), conns[:, iu[0], iu[1]]


def graph_tensors(conns: np.ndarray, spec: GNNSpec, dtype: torch.dtype = torch.float32):
    adj, x, u = graph_arrays(conns, spec.density_k, spec.sign_mode)
    return tuple(torch.as_tensor(a, dtype=dtype) for a in (adj, x, u))


def gnn_forward(model: GNNModel, graph: BrainGraph) -> torch.Tensor:
    """Raw model output (1 value or 2 logits) for a single graph."""
    n = graph.adjacency.shape[0]
    if graph.node_features.shape[0] != n:
        raise ValueError("node feature rows must match adjacency size")
    dtype = next(model.parameters()).dtype
    adj = torch.as_tensor(graph.adjacency, dtype=dtype).unsqueeze(0)
    x = torch.as_tensor(graph.node_features, dtype=dtype).unsqueeze(0)
    was = model.training
    model.eval()
    with torch.no_grad():
        out = model(adj, x)
    model.train(was)
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite model output")
    return out[0]


@dataclass
class TrainedGNN:
    model: GNNModel
    history: TrainHistory
    test_metric: float | None = None


def train(spec: GNNSpec, splits: tuple[Dataset, Dataset, Dataset], config: TrainConfig,
          conn_cache: dict | None = None) -> TrainedGNN:
    """Fit a GNN on the train split, select on val, report test."""
    train_ds, val_ds, test_ds = splits
    task = train_ds.task
    dtype = config.torch_dtype

    def tensors(ds):
        conns = connectomes(ds) if conn_cache is None else np.stack([conn_cache[i] for i in ds.ids])
        return graph_tensors(conns, spec, dtype)

    tr, va, te = tensors(train_ds), tensors(val_ds), tensors(test_ds)
    model = GNNModel(spec, in_dim=train_ds.n_roi, n_nodes=train_ds.n_roi, task=task).to(dtype)
    history = fit_model(model, tr, train_ds.targets, task, config, va, val_ds.targets)
    test_metric = evaluate(predict_scores(model, te, task), test_ds.targets, task)
    return TrainedGNN(model, history, test_metric)


# -- density sweep -----------------------------------------------------------

@dataclass
class SweepResult:
    model: str
    k_values: list[float]
    per_k: dict  # str(K) -> {"mean", "std", "runs"}

    def to_dict(self) -> dict:
        return {"model": self.model, "k_values": list(self.k_values), "per_k": self.per_k}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        return cls(d["model"], list(d["k_values"]), dict(d["per_k"]))


def k_key(k: float) -> str:
    return f"{float(k):g}"


def density_sweep(spec: GNNSpec, dataset: Dataset, k_values, runs: int = 10,
                  config: TrainConfig | None = None, master_seed: int = 0,
                  split: SplitSpec | None = None, model_name: str | None = None) -> SweepResult:
    """Retrain ``spec`` at every density in ``k_values`` over ``runs`` seeds.

    Run ``r`` uses split seed ``master_seed + 1000 + r`` and init/shuffle
    seed ``master_seed + 2000 + r``, so every K sees identical splits.
    """
    k_values = list(k_values)
    if not k_values:
        raise ValueError("k_values must be nonempty")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    config = config or TrainConfig()
    split = split or SplitSpec()
    cache = dict(zip(dataset.ids, connectomes(dataset)))
    per_k = {}
    for k in k_values:
        scores = []
        for r in range(runs):
            s = replace(split, seed=master_seed + 1000 + r)
            run_spec = replace(spec, density_k=float(k), seed=master_seed + 2000 + r)
            run_cfg = replace(config, seed=master_seed + 2000 + r)
            res = train(run_spec, make_split(dataset, s), run_cfg, conn_cache=cache)
            scores.append(res.test_metric)
        per_k[k_key(k)] = {"mean": float(np.mean(scores)), "std": float(np.std(scores)),
                           "runs": [float(v) for v in scores]}
    return SweepResult(model_name or spec.architecture, [float(k) for k in k_values], per_k)
