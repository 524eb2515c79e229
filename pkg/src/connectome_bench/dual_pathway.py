"""Linear pathway on the vectorized connectome fused with a GAT pathway.

The GAT pathway runs on the positive part of the connectome (top-K%
density, 5% by default) with node features produced by a shared 1-D CNN
over each ROI's z-scored BOLD series. Node embeddings are concatenated
into one graph vector ``h_graph`` and the head computes
``W [h_graph; u] + b``; the weight matrix is stored as two blocks
(``head_graph`` with the bias, ``head_u`` without) so the linear pathway
can be frozen on its own.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .connectome import POSITIVE_ONLY, n_pairs, pearson_connectivity, threshold_top_k
from .data_io import CLASSIFICATION, Dataset
from .graph_models import GNNSpec, build_convs
from .metrics import evaluate
from .training import TrainConfig, TrainHistory, fit_model, output_dim, predict_scores

CHECKPOINT_MAGIC = b"CBDUALPW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    conv_layers: int = 2
    kernel_size: int = 7
    stride: int = 2
    out_dim: int = 32
    channels: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.out_dim < 1 or self.kernel_size < 1 or self.conv_layers < 1:
            raise ValueError("out_dim, kernel_size and conv_layers must be >= 1")
        if self.stride < 1 or self.channels < 1:
            raise ValueError("stride and channels must be >= 1")


@dataclass(frozen=True)
class DualConfig:
    """Everything needed to rebuild a dual-pathway model."""

    n_roi: int
    task: str
    encoder: EncoderSpec = EncoderSpec()
    gat: GNNSpec = GNNSpec(architecture="gat", n_layers=2, hidden_dim=32, heads=2)
    density_k: float = 5.0
    seed: int = 0
    standardize_u: bool = True

    def to_dict(self) -> dict:
        return {"n_roi": self.n_roi, "task": self.task, "encoder": asdict(self.encoder),
                "gat": self.gat.to_dict(), "density_k": self.density_k, "seed": self.seed,
                "standardize_u": self.standardize_u}

    @classmethod
    def from_dict(cls, d: dict) -> "DualConfig":
        return cls(d["n_roi"], d["task"], EncoderSpec(**d["encoder"]), GNNSpec(**d["gat"]),
                   float(d["density_k"]), int(d["seed"]), bool(d.get("standardize_u", True)))


class BoldEncoder(nn.Module):
    """Shared 1-D CNN mapping each ROI series to a ``out_dim`` embedding.

    Convolutions use ``kernel_size // 2`` zero padding, followed by global
    average pooling over time and an affine map, so any series with at
    least ``kernel_size`` samples gives a fixed-size embedding.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        chans = [1] + [spec.channels] * spec.conv_layers
        self.convs = nn.ModuleList(
            nn.Conv1d(a, b, spec.kernel_size, stride=spec.stride, padding=spec.kernel_size // 2)
            for a, b in zip(chans[:-1], chans[1:])
        )
        self.proj = nn.Linear(spec.channels, spec.out_dim)

    def forward(self, bold: torch.Tensor) -> torch.Tensor:
        bsz, n, t = bold.shape
        if t < self.spec.kernel_size:
            raise ValueError(f"series of length {t} shorter than kernel size {self.spec.kernel_size}")
        h = bold.reshape(bsz * n, 1, t)
        for conv in self.convs:
            h = F.relu(conv(h))
        h = h.mean(dim=-1)
        return self.proj(h).view(bsz, n, -1)


def zscore_rows(x: np.ndarray) -> np.ndarray:
    """Per-ROI z-scoring along the last axis; flat rows map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return np.where(sd > 0, (x - mu) / np.where(sd > 0, sd, 1.0), 0.0)


class DualPathwayModel(nn.Module):
    def __init__(self, config: DualConfig):
        super().__init__()
        if config.gat.architecture != "gat":
            raise ValueError("the graph pathway must be a GAT")
        self.config = config
        n, out = config.n_roi, output_dim(config.task)
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.encoder = BoldEncoder(config.encoder)
            self.convs, dims = build_convs(config.gat, config.encoder.out_dim)
            self.d_prime = dims[-1]
            self.head_graph = nn.Linear(n * self.d_prime, out)
            self.head_u = nn.Linear(n_pairs(n), out, bias=False)
        # identity until fit_u_scaling is called on training data
        self.register_buffer("u_mean", torch.zeros(n_pairs(n)))
        self.register_buffer("u_scale", torch.ones(n_pairs(n)))

    @property
    def task(self) -> str:
        return self.config.task

    @property
    def fused_dim(self) -> int:
        return self.config.n_roi * self.d_prime + n_pairs(self.config.n_roi)

    def fit_u_scaling(self, u: torch.Tensor) -> None:
        """Z-score ``u`` with statistics of the given (training) rows."""
        sd = u.std(dim=0, unbiased=False)
        with torch.no_grad():
            self.u_mean.copy_(u.mean(dim=0))
            self.u_scale.copy_(torch.where(sd > 0, sd, torch.ones_like(sd)))

    def head_weight(self) -> torch.Tensor:
        """Full fused weight ``W`` acting on ``[h_graph; u]``."""
        return torch.cat([self.head_graph.weight, self.head_u.weight], dim=1)

    def graph_embedding(self, bold: torch.Tensor, adj: torch.Tensor, return_attention: bool = False):
        h = self.encoder(bold)
        attention = []
        for conv in self.convs:
            h, alpha = conv(h, adj, return_attention=True)
            h = F.elu(h)
            attention.append(alpha)
        h_graph = h.flatten(1)
        return (h_graph, attention) if return_attention else h_graph

    def forward(self, bold: torch.Tensor, adj: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        h_graph = self.graph_embedding(bold, adj)
        return self.head_graph(h_graph) + self.head_u((u - self.u_mean) / self.u_scale)

    def first_layer_attention(self, bold: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        """``(B, heads, n, n)`` attention of the first GAT layer; row i attends over j."""
        _, att = self.graph_embedding(bold, adj, return_attention=True)
        return att[0]


def encode_bold(encoder: BoldEncoder, bold) -> np.ndarray:
    """Node features ``(n_roi, out_dim)`` for one subject's raw BOLD matrix."""
    values = bold.values if hasattr(bold, "values") else np.asarray(bold)
    dtype = next(encoder.parameters()).dtype
    x = torch.as_tensor(zscore_rows(values), dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        return encoder(x)[0].double().numpy()


def sample_arrays(bold_values: np.ndarray, density_k: float, conn: np.ndarray | None = None):
    """(z-scored bold, positive top-K adjacency, u) for one subject."""
    if conn is None:
        conn = pearson_connectivity(bold_values)
    adj = threshold_top_k(conn, density_k, POSITIVE_ONLY)
    iu = np.triu_indices(conn.shape[0], k=1)
    return zscore_rows(bold_values), adj, conn[iu]


def dataset_tensors(dataset: Dataset, density_k: float, dtype: torch.dtype = torch.float32):
    parts = [sample_arrays(s.bold.values, density_k) for s in dataset.subjects]
    return tuple(torch.as_tensor(np.stack(p), dtype=dtype) for p in zip(*parts))


def dual_forward(model: DualPathwayModel, bold, conn: np.ndarray | None = None) -> np.ndarray:
    """Class probabilities (classification) or the scalar prediction."""
    values = bold.values if hasattr(bold, "values") else np.asarray(bold)
    dtype = next(model.parameters()).dtype
    z, adj, u = (torch.as_tensor(a, dtype=dtype).unsqueeze(0)
                 for a in sample_arrays(values, model.config.density_k, conn))
    with torch.no_grad():
        out = model(z, adj, u)[0]
    if model.task == CLASSIFICATION:
        return torch.softmax(out, dim=0).double().numpy()
    return out.double().numpy()


def phased_train(model: DualPathwayModel, splits: tuple[Dataset, Dataset, Dataset],
                 config: TrainConfig, phase1_epochs: int = 10):
    """Train with the linear pathway frozen for ``phase1_epochs`` epochs.

    Returns ``(model, history, test_metric)``. Best-epoch selection only
    considers the joint phase.
    """
    if not 0 <= phase1_epochs < config.epochs:
        raise ValueError(f"phase1_epochs must lie in [0, epochs), got {phase1_epochs}")
    train_ds, val_ds, test_ds = splits
    dtype = config.torch_dtype
    model.to(dtype)
    density = model.config.density_k
    tr = dataset_tensors(train_ds, density, dtype)
    if model.config.standardize_u:
        model.fit_u_scaling(tr[2])
    va = dataset_tensors(val_ds, density, dtype)
    history = fit_model(model, tr, train_ds.targets, model.task, config, va, val_ds.targets,
                        frozen_params=[model.head_u.weight], freeze_epochs=phase1_epochs)
    te = dataset_tensors(test_ds, density, dtype)
    test_metric = evaluate(predict_scores(model, te, model.task), test_ds.targets, model.task)
    return model, history, test_metric


def build_model(n_roi: int, task: str, *, hidden_dim: int = 32, n_layers: int = 2, heads: int = 2,
                embed_dim: int = 32, density_k: float = 5.0, seed: int = 0,
                standardize_u: bool = True) -> DualPathwayModel:
    enc = EncoderSpec(out_dim=embed_dim, seed=seed)
    gat = GNNSpec(architecture="gat", n_layers=n_layers, hidden_dim=hidden_dim, heads=heads,
                  density_k=density_k, seed=seed)
    return DualPathwayModel(DualConfig(n_roi, task, enc, gat, density_k, seed, standardize_u))


# -- checkpoint ------------------------------------------------------------------
#
# layout: MAGIC (8 bytes) | version uint32 LE | header length uint64 LE |
#         header JSON (utf-8) | state tensors (parameters, then the u scaling
#         buffers) as float64 LE, concatenated in the order of
#         header["parameters"], each flattened row-major

def save_checkpoint(model: DualPathwayModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    params = [(name, t.detach().double().cpu().numpy()) for name, t in model.state_dict().items()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "parameters": [{"name": n, "shape": list(a.shape)} for n, a in params],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in params:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[DualPathwayModel, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a dual-pathway checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    model = DualPathwayModel(DualConfig.from_dict(header["model"]))
    dtype = getattr(torch, header.get("dtype", "float64"))
    model.to(dtype)
    named = model.state_dict()
    offset = 0
    with torch.no_grad():
        for entry in header["parameters"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).reshape(entry["shape"])
            offset += 8 * size
            named[entry["name"]].copy_(torch.tensor(arr, dtype=dtype))
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes in parameter blob")
    return model, header


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().double().cpu().numpy().tobytes())
    return h.hexdigest()


def with_seed(config: DualConfig, seed: int) -> DualConfig:
    return replace(config, seed=seed, encoder=replace(config.encoder, seed=seed),
                   gat=replace(config.gat, seed=seed))
