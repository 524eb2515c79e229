"""Non-graph baselines on the vectorized connectome.

Classical estimators are scikit-learn models behind a small contract:
p-value feature selection on training data, optional z-scoring, and
``predict`` returning class-1 scores in ``[0, 1]`` for classification or
real values for regression. MLP-Flatten and MLP-Node are torch modules
trained with :func:`connectome_bench.training.fit_model`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
from scipy import special, stats
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor
from sklearn.kernel_ridge import KernelRidge
from sklearn.linear_model import ElasticNet, LinearRegression, LogisticRegression
from sklearn.naive_bayes import GaussianNB
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC, SVR
from torch import nn

from .connectome import ConnectomeWarning, devectorize, n_from_pairs, rank_pairs
from .data_io import CLASSIFICATION, REGRESSION
from .training import TrainConfig, fit_model, output_dim, predict_scores

CLASSIFICATION_KINDS = {"logistic", "elasticnet", "svm", "random_forest", "naive_bayes",
                        "mlp_flatten", "mlp_node", "cpm_pos", "cpm_neg"}
REGRESSION_KINDS = {"linear", "elasticnet", "svr", "random_forest", "kernel_ridge",
                    "mlp_flatten", "mlp_node", "cpm_pos", "cpm_neg"}
ALL_KINDS = CLASSIFICATION_KINDS | REGRESSION_KINDS
SCALED_KINDS = {"logistic", "elasticnet", "svm", "svr", "kernel_ridge"}
MLP_KINDS = {"mlp_flatten", "mlp_node"}
CPM_KINDS = {"cpm_pos", "cpm_neg"}
# kinds that take an ``n_features`` univariate pre-selection step
SELECTABLE_KINDS = {"logistic", "linear", "elasticnet", "svm", "svr", "random_forest",
                    "naive_bayes", "kernel_ridge"}

# value sets searched per kind; "n_features" is filled in per dataset
DEFAULT_GRIDS: dict[str, dict[str, list]] = {
    "logistic": {"C": [0.1, 1, 10], "solver": ["liblinear", "lbfgs", "saga"]},
    "linear": {},
    "elasticnet": {"alpha": [0.001, 0.01, 0.1, 0.5, 1], "l1_ratio": [0.2, 0.5, 0.7]},
    "svm": {"kernel": ["linear", "rbf"]},
    "svr": {"kernel": ["linear", "rbf"]},
    "random_forest": {"n_estimators": [100, 200], "max_depth": [10, None]},
    "naive_bayes": {},
    "kernel_ridge": {"alpha": [0.1, 1, 10], "kernel": ["linear", "rbf", "polynomial"]},
    "cpm_pos": {"p_threshold": [0.001, 0.01, 0.05, 0.1, 0.5, 1]},
    "cpm_neg": {"p_threshold": [0.001, 0.01, 0.05, 0.1, 0.5, 1]},
    "mlp_flatten": {"hidden_dim": [32, 128, 256], "learning_rate": [1e-4, 5e-4, 1e-3, 1e-2]},
    "mlp_node": {"hidden_dim": [32, 128, 256], "learning_rate": [1e-4, 5e-4, 1e-3, 1e-2]},
}


def feature_count_grid(n_roi: int) -> list[int]:
    full = n_roi * (n_roi - 1) // 2
    return sorted({m for m in (100, 200, 500, 1000, 5000, 10000) if m < full} | {full})


# -- feature selection -------------------------------------------------------

def _welch_pvalues(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n1, n2 = a.shape[0], b.shape[0]
    diff = a.mean(0) - b.mean(0)
    v1 = a.var(0, ddof=1) / n1
    v2 = b.var(0, ddof=1) / n2
    se2 = v1 + v2
    p = np.ones(a.shape[1])
    ok = se2 > 0
    t = diff[ok] / np.sqrt(se2[ok])
    df = se2[ok] ** 2 / (v1[ok] ** 2 / (n1 - 1) + v2[ok] ** 2 / (n2 - 1))
    p[ok] = 2.0 * stats.t.sf(np.abs(t), df)
    # no spread within either class: perfect separation unless means agree
    p[~ok & (diff != 0)] = 0.0
    return p


def correlation_pvalues(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature Pearson r with ``y`` and its two-sided p-value."""
    n = X.shape[0]
    xc = X - X.mean(0)
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum(0) * (yc @ yc))
    r = np.zeros(X.shape[1])
    ok = denom > 0
    r[ok] = np.clip((yc @ xc[:, ok]) / denom[ok], -1.0, 1.0)
    p = np.ones(X.shape[1])
    df = n - 2
    # same closed form as scipy.stats.pearsonr: incomplete beta of 1 - r^2
    p[ok] = special.betainc(df / 2.0, 0.5, np.clip(1.0 - r[ok] ** 2, 0.0, 1.0))
    return r, p


def _flag_constant(X: np.ndarray) -> np.ndarray:
    const = np.ptp(X, axis=0) == 0
    if const.any():
        warnings.warn(f"{int(const.sum())} zero-variance features assigned p = 1",
                      ConnectomeWarning, stacklevel=3)
    return const


def feature_pvalues(X, y, task: str) -> np.ndarray:
    """Welch t-test (classification) or Pearson-correlation (regression) p-values."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if X.shape[0] < 3:
        raise ValueError("need at least 3 samples for feature p-values")
    const = _flag_constant(X)
    if task == CLASSIFICATION:
        pos, neg = X[y == 1], X[y == 0]
        if len(pos) == 0 or len(neg) == 0:
            raise ValueError("both classes must be present")
        if len(pos) < 2 or len(neg) < 2:
            raise ValueError("each class needs at least 2 samples for a t-test")
        p = _welch_pvalues(pos, neg)
    else:
        _, p = correlation_pvalues(X, y)
    p[const] = 1.0
    return np.clip(p, 0.0, 1.0)


def select_top_m(pvalues, m: int) -> np.ndarray:
    """Indices of the ``m`` smallest p-values, ties broken by index."""
    if m < 1:
        raise ValueError("m must be >= 1")
    p = np.asarray(pvalues, dtype=np.float64)
    return rank_pairs(-p)[: min(m, p.shape[0])]


# -- CPM -----------------------------------------------------------------------

@dataclass
class CPMModel:
    mode: str
    selected: np.ndarray
    intercept: float
    slope: float
    task: str
    constant: float | None = None

    def summary(self, X: np.ndarray) -> np.ndarray:
        return X[:, self.selected].sum(axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.constant is not None:
            return np.full(X.shape[0], self.constant)
        lin = self.intercept + self.slope * self.summary(X)
        return special.expit(lin) if self.task == CLASSIFICATION else lin


def cpm_fit(X_train, y_train, p_threshold: float, mode: str, task: str = REGRESSION) -> CPMModel:
    """Connectome-based predictive modelling on summed selected edges.

    Edges with ``p < p_threshold`` whose correlation with the target has
    the requested sign are summed per subject; a univariate model (linear
    for regression, logistic for classification) maps the sum to the target.
    """
    if not 0 < p_threshold <= 1:
        raise ValueError("p_threshold must lie in (0, 1]")
    if mode not in ("pos", "neg"):
        raise ValueError(f"mode must be 'pos' or 'neg', got {mode!r}")
    X = np.asarray(X_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.float64)
    r, p = correlation_pvalues(X, y)
    sign_ok = r > 0 if mode == "pos" else r < 0
    selected = np.flatnonzero((p < p_threshold) & sign_ok)
    fallback = float(y.mean())
    if selected.size == 0:
        warnings.warn("CPM selected no edges; predicting the training mean",
                      ConnectomeWarning, stacklevel=2)
        return CPMModel(mode, selected, 0.0, 0.0, task, constant=fallback)
    score = X[:, selected].sum(axis=1)
    if np.ptp(score) == 0:
        warnings.warn("CPM summary score is constant; predicting the training mean",
                      ConnectomeWarning, stacklevel=2)
        return CPMModel(mode, selected, 0.0, 0.0, task, constant=fallback)
    if task == CLASSIFICATION:
        clf = LogisticRegression().fit(score[:, None], y.astype(int))
        return CPMModel(mode, selected, float(clf.intercept_[0]), float(clf.coef_[0, 0]), task)
    slope, intercept = np.polyfit(score, y, 1)
    return CPMModel(mode, selected, float(intercept), float(slope), task)


def cpm_fit_predict(X_train, y_train, X_test, p_threshold: float, mode: str,
                    task: str = REGRESSION) -> np.ndarray:
    return cpm_fit(X_train, y_train, p_threshold, mode, task).predict(X_test)


# -- MLP baselines -------------------------------------------------------------

class MLPFlatten(nn.Module):
    """Two affine layers with a ReLU in between, on the vectorized connectome."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim))

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        return self.net(u)


class MLPNode(nn.Module):
    """Shared per-node layers, concatenation over nodes, affine head."""

    def __init__(self, n_nodes: int, in_dim: int, hidden_dim: int, out_dim: int, n_layers: int = 1):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * n_layers
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.head = nn.Linear(n_nodes * hidden_dim, out_dim)

    def node_embeddings(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = torch.relu(layer(x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.node_embeddings(x).flatten(1))


def mlp_forward(model: nn.Module, sample) -> torch.Tensor:
    """Raw output of an MLP baseline on one unbatched input."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(sample), dtype=dtype)
    expected = 1 if isinstance(model, MLPFlatten) else 2
    if x.ndim != expected:
        raise ValueError(f"{type(model).__name__} expects a {expected}-D sample, got shape {tuple(x.shape)}")
    return model(x.unsqueeze(0))[0]


# -- estimator contract ----------------------------------------------------------

@dataclass
class EstimatorSpec:
    kind: str
    task: str
    hyperparameters: dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        allowed = CLASSIFICATION_KINDS if self.task == CLASSIFICATION else REGRESSION_KINDS
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind not in allowed:
            raise ValueError(f"estimator kind {self.kind!r} does not support task {self.task!r}")


@dataclass
class FittedEstimator:
    spec: EstimatorSpec
    model: Any
    feature_indices: np.ndarray
    n_input_features: int
    scaler: StandardScaler | None = None
    y_offset: float = 0.0
    history: Any = None


def _sklearn_model(spec: EstimatorSpec):
    hp, seed, clf = spec.hyperparameters, spec.seed, spec.task == CLASSIFICATION
    if spec.kind == "logistic":
        return LogisticRegression(C=hp.get("C", 1.0), solver=hp.get("solver", "lbfgs"),
                                  max_iter=hp.get("max_iter", 5000), random_state=seed)
    if spec.kind == "linear":
        return LinearRegression()
    if spec.kind == "elasticnet":
        alpha, l1 = hp.get("alpha", 0.01), hp.get("l1_ratio", 0.5)
        if clf:
            return LogisticRegression(penalty="elasticnet", solver="saga", C=1.0 / alpha,
                                      l1_ratio=l1, max_iter=hp.get("max_iter", 5000), random_state=seed)
        return ElasticNet(alpha=alpha, l1_ratio=l1, max_iter=hp.get("max_iter", 10000), random_state=seed)
    if spec.kind == "svm":
        return SVC(kernel=hp.get("kernel", "linear"), C=hp.get("C", 1.0), random_state=seed)
    if spec.kind == "svr":
        return SVR(kernel=hp.get("kernel", "linear"), C=hp.get("C", 1.0))
    if spec.kind == "random_forest":
        cls = RandomForestClassifier if clf else RandomForestRegressor
        return cls(n_estimators=hp.get("n_estimators", 100), max_depth=hp.get("max_depth"),
                   random_state=seed, n_jobs=1)
    if spec.kind == "naive_bayes":
        return GaussianNB()
    if spec.kind == "kernel_ridge":
        return KernelRidge(alpha=hp.get("alpha", 1.0), kernel=hp.get("kernel", "linear"))
    raise ValueError(f"no scikit-learn backend for {spec.kind!r}")


def _check_xy(X, y=None) -> tuple[np.ndarray, np.ndarray | None]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D (samples, features), got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if not np.isfinite(y).all():
            raise ValueError("y contains non-finite values")
    return X, y


def mlp_inputs(kind: str, X: np.ndarray, dtype: torch.dtype) -> tuple[torch.Tensor]:
    if kind == "mlp_node":
        return (torch.as_tensor(devectorize(X), dtype=dtype),)
    return (torch.as_tensor(X, dtype=dtype),)


def build_mlp(kind: str, n_features: int, hidden_dim: int, task: str, seed: int,
              n_layers: int = 1) -> nn.Module:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if kind == "mlp_flatten":
            return MLPFlatten(n_features, hidden_dim, output_dim(task))
        n = n_from_pairs(n_features)
        return MLPNode(n, n, hidden_dim, output_dim(task), n_layers)


def fit_estimator(spec: EstimatorSpec, X, y, X_val=None, y_val=None) -> FittedEstimator:
    """Fit ``spec`` on training rows; validation data is used by MLP kinds only."""
    X, y = _check_xy(X, y)
    hp = spec.hyperparameters
    n_in = X.shape[1]

    if spec.kind in CPM_KINDS:
        model = cpm_fit(X, y, hp.get("p_threshold", 0.05), spec.kind[4:], spec.task)
        return FittedEstimator(spec, model, np.arange(n_in), n_in)

    if spec.kind in MLP_KINDS:
        cfg = TrainConfig(epochs=hp.get("epochs", 100), batch_size=hp.get("batch_size", 16),
                          weight_decay=hp.get("weight_decay", 1e-4),
                          learning_rate=hp.get("learning_rate", 1e-3), seed=spec.seed,
                          dtype=hp.get("dtype", "float32"))
        model = build_mlp(spec.kind, n_in, hp.get("hidden_dim", 64), spec.task, spec.seed,
                          hp.get("n_layers", 1)).to(cfg.torch_dtype)
        val = None
        if X_val is not None:
            X_val, y_val = _check_xy(X_val, y_val)
            val = mlp_inputs(spec.kind, X_val, cfg.torch_dtype)
        history = fit_model(model, mlp_inputs(spec.kind, X, cfg.torch_dtype), y, spec.task, cfg,
                            val, y_val)
        return FittedEstimator(spec, model, np.arange(n_in), n_in, history=history)

    m = hp.get("n_features")
    if m is None or m >= n_in:
        idx = np.arange(n_in)
    else:
        idx = np.sort(select_top_m(feature_pvalues(X, y, spec.task), int(m)))
    Xs = X[:, idx]
    scaler = None
    if spec.kind in SCALED_KINDS:
        scaler = StandardScaler().fit(Xs)
        Xs = scaler.transform(Xs)
    offset = 0.0
    target = y
    if spec.kind == "kernel_ridge":
        # kernel ridge has no intercept; centre the target instead
        offset = float(y.mean())
        target = y - offset
    elif spec.task == CLASSIFICATION:
        target = y.astype(int)
    model = _sklearn_model(spec).fit(Xs, target)
    return FittedEstimator(spec, model, idx, n_in, scaler, offset)


def predict(fitted: FittedEstimator, X) -> np.ndarray:
    X, _ = _check_xy(X)
    if X.shape[1] != fitted.n_input_features:
        raise ValueError(f"expected {fitted.n_input_features} features, got {X.shape[1]}")
    spec = fitted.spec
    if spec.kind in CPM_KINDS:
        return fitted.model.predict(X)
    if spec.kind in MLP_KINDS:
        dtype = next(fitted.model.parameters()).dtype
        return predict_scores(fitted.model, mlp_inputs(spec.kind, X, dtype), spec.task)
    Xs = X[:, fitted.feature_indices]
    if fitted.scaler is not None:
        Xs = fitted.scaler.transform(Xs)
    model = fitted.model
    if spec.task == CLASSIFICATION:
        if hasattr(model, "predict_proba"):
            return model.predict_proba(Xs)[:, 1]
        return special.expit(model.decision_function(Xs))
    return model.predict(Xs) + fitted.y_offset
