"""Mini-batch training loop shared by every torch model in the package."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_io import CLASSIFICATION
from .metrics import evaluate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    weight_decay: float = 1e-4
    learning_rate: float = 1e-3
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_metric: float = float("nan")
    select_from: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


def output_dim(task: str) -> int:
    return 2 if task == CLASSIFICATION else 1


def loss_fn(out: torch.Tensor, y: torch.Tensor, task: str) -> torch.Tensor:
    if task == CLASSIFICATION:
        return F.cross_entropy(out, y.long())
    return F.mse_loss(out[:, 0], y.to(out.dtype))


def scores_from_output(out: torch.Tensor, task: str) -> torch.Tensor:
    """Class-1 probability (classification) or the scalar prediction."""
    if task == CLASSIFICATION:
        return torch.softmax(out, dim=1)[:, 1]
    return out[:, 0]


def batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Mini-batch slices; a trailing single sample joins the previous batch."""
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], n)]
    return bounds


def to_tensors(arrays: Sequence[np.ndarray], dtype: torch.dtype) -> tuple[torch.Tensor, ...]:
    return tuple(torch.as_tensor(np.asarray(a), dtype=dtype) for a in arrays)


@torch.no_grad()
def predict_scores(model: nn.Module, inputs: Sequence[torch.Tensor], task: str,
                   batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    n = inputs[0].shape[0]
    chunks = []
    for start in range(0, n, batch_size):
        batch = [x[start:start + batch_size] for x in inputs]
        out = model(*batch)
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite values in model forward pass")
        chunks.append(scores_from_output(out, task).double().numpy())
    model.train(was_training)
    return np.concatenate(chunks) if chunks else np.zeros(0)


def fit_model(
    model: nn.Module,
    train_inputs: Sequence[torch.Tensor],
    y_train: np.ndarray,
    task: str,
    config: TrainConfig,
    val_inputs: Sequence[torch.Tensor] | None = None,
    y_val: np.ndarray | None = None,
    frozen_params: Sequence[nn.Parameter] = (),
    freeze_epochs: int = 0,
    on_epoch_end: Callable[[int, nn.Module], None] | None = None,
) -> TrainHistory:
    """Train ``model`` in place and restore the best validation epoch.

    Parameters listed in ``frozen_params`` receive no update (their
    gradient is dropped, so Adam's weight decay is skipped as well) during
    the first ``freeze_epochs`` epochs; best-epoch selection only considers
    epochs after that. Without validation data the last epoch is kept.
    """
    y_t = torch.as_tensor(np.asarray(y_train), dtype=torch.float64)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(int(config.seed))
    n = train_inputs[0].shape[0]
    history = TrainHistory(select_from=freeze_epochs)
    best_state = None
    frozen = list(frozen_params)

    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for start, stop in batch_bounds(n, config.batch_size):
            idx = perm[start:stop]
            batch = [x[idx] for x in train_inputs]
            out = model(*batch)
            loss = loss_fn(out, y_t[idx], task)
            if not torch.isfinite(loss):
                history.train_loss.append(float("nan"))
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {start}", history)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if epoch < freeze_epochs:
                for p in frozen:
                    p.grad = None
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        history.train_loss.append(total / max(seen, 1))

        if val_inputs is not None:
            metric = evaluate(predict_scores(model, val_inputs, task), y_val, task)
            if not math.isfinite(metric):
                metric = float("-inf")
        else:
            metric = float("nan")
        history.val_metric.append(metric)
        if epoch >= freeze_epochs:
            better = (val_inputs is None or best_state is None
                      or metric > history.best_val_metric)
            if better:
                history.best_epoch = epoch
                history.best_val_metric = metric
                best_state = copy.deepcopy(model.state_dict())
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
        log.debug("epoch %d loss %.5f val %.4f", epoch, history.train_loss[-1], metric)

    if best_state is not None:
        model.load_state_dict(best_state)
    return history
