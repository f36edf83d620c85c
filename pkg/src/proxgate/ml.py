"""Binary proximity classifiers: logistic regression, k-NN and Gaussian naive Bayes.

All three are written against numpy only. Scores are the probability (or vote
fraction) of the *proximate* class; a score of exactly 0.5 maps to
"not proximate" so that access control fails closed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DegenerateLabels, DimensionError, InvalidData, InvalidK, ModelFormatError
from .rssi import LabeledDataset

FORMAT_VERSION = 1
STD_FLOOR = 1e-9
VAR_FLOOR = 1e-6
KNN_CHUNK = 256


@dataclass(frozen=True)
class Prediction:
    label: bool
    score: float

    def to_dict(self) -> dict:
        return {"label": self.label, "score": self.score}


@dataclass(frozen=True)
class LogisticHyper:
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 1e-4


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _labels_from_scores(scores: np.ndarray) -> np.ndarray:
    return scores > 0.5


def _check_features(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise DimensionError(f"expected {dim} features, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidData("features must be finite")
    return X


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def _validate_training(data: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    X, y = data.features, data.labels
    if not np.all(np.isfinite(X)):
        raise InvalidData("features must be finite")
    if len(y) < 2 or y.all() or not y.any():
        raise DegenerateLabels("training data needs both classes")
    return X, y


# ---------------------------------------------------------------------------
# logistic regression


def logistic_loss_and_grad(
    weights: np.ndarray, bias: float, X: np.ndarray, y: np.ndarray, l2: float
) -> tuple[float, np.ndarray, float]:
    """Mean negative log-likelihood plus (l2/2)*||w||^2, and its gradient."""
    z = X @ weights + bias
    yf = y.astype(float)
    loss = float(np.mean(np.logaddexp(0.0, z) - yf * z) + 0.5 * l2 * weights @ weights)
    residual = _sigmoid(z) - yf
    grad_w = X.T @ residual / len(yf) + l2 * weights
    grad_b = float(residual.mean())
    return loss, grad_w, grad_b


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    bias: float
    standardizer: Standardizer
    loss_history: tuple[float, ...] = ()
    metadata: dict = field(default_factory=dict)

    variant = "LR"

    @property
    def dim(self) -> int:
        return len(self.weights)

    def scores(self, X) -> np.ndarray:
        Xs = self.standardizer.transform(_check_features(X, self.dim))
        # elementwise sum keeps a row's score independent of batch size
        return _sigmoid((Xs * self.weights).sum(axis=1) + self.bias)

    def params(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "standardizer": self.standardizer.to_dict(),
        }


def train_logistic(data: LabeledDataset, hyper: LogisticHyper | None = None) -> LogisticModel:
    hyper = hyper or LogisticHyper()
    X, y = _validate_training(data)
    scaler = Standardizer.fit(X)
    Xs = scaler.transform(X)
    w = np.zeros(X.shape[1])
    b = 0.0
    history = []
    for _ in range(hyper.epochs):
        loss, gw, gb = logistic_loss_and_grad(w, b, Xs, y, hyper.l2)
        history.append(loss)
        w = w - hyper.learning_rate * gw
        b = b - hyper.learning_rate * gb
    history.append(logistic_loss_and_grad(w, b, Xs, y, hyper.l2)[0])
    if not np.all(np.isfinite(w)) or not math.isfinite(b):
        raise InvalidData("training diverged")
    return LogisticModel(
        weights=w,
        bias=float(b),
        standardizer=scaler,
        loss_history=tuple(history),
        metadata={"hyper": asdict(hyper)},
    )


# ---------------------------------------------------------------------------
# k-nearest neighbours


@dataclass(frozen=True)
class KnnModel:
    k: int
    train_features: np.ndarray  # standardized
    train_labels: np.ndarray
    standardizer: Standardizer
    metadata: dict = field(default_factory=dict)

    variant = "KNN"

    @property
    def dim(self) -> int:
        return self.train_features.shape[1]

    def scores(self, X) -> np.ndarray:
        Q = self.standardizer.transform(_check_features(X, self.dim))
        k = self.k
        labels = self.train_labels.astype(float)
        out = np.empty(len(Q))
        T = self.train_features
        for start in range(0, len(Q), KNN_CHUNK):
            q = Q[start : start + KNN_CHUNK]
            d2 = np.zeros((len(q), len(T)))
            for j in range(T.shape[1]):
                d2 += (q[:, j, None] - T[None, :, j]) ** 2
            kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
            closer = d2 < kth
            tied = d2 == kth
            room = k - closer.sum(axis=1)
            chosen = closer | tied
            # where more points tie at the k-th distance than there are slots
            # left, take them in training-row order
            crowded = tied.sum(axis=1) > room
            if crowded.any():
                t = tied[crowded]
                chosen[crowded] = closer[crowded] | (t & (np.cumsum(t, axis=1) <= room[crowded, None]))
            out[start : start + KNN_CHUNK] = (chosen @ labels) / k
        return out

    def params(self) -> dict:
        return {
            "k": self.k,
            "train_features": self.train_features.tolist(),
            "train_labels": self.train_labels.astype(int).tolist(),
            "standardizer": self.standardizer.to_dict(),
        }


def train_knn(data: LabeledDataset, k: int = 5) -> KnnModel:
    X = data.features
    if not np.all(np.isfinite(X)):
        raise InvalidData("features must be finite")
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0 or k > len(X):
        raise InvalidK(f"k must be odd and in [1, {len(X)}], got {k}")
    scaler = Standardizer.fit(X)
    return KnnModel(
        k=int(k),
        train_features=scaler.transform(X),
        train_labels=data.labels.copy(),
        standardizer=scaler,
        metadata={"hyper": {"k": int(k)}},
    )


# ---------------------------------------------------------------------------
# Gaussian naive Bayes


@dataclass(frozen=True)
class GnbModel:
    priors: np.ndarray  # [P(false), P(true)]
    means: np.ndarray  # 2 x D
    variances: np.ndarray  # 2 x D
    metadata: dict = field(default_factory=dict)

    variant = "GNB"

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def joint_log(self, X: np.ndarray) -> np.ndarray:
        """log P(class) + sum_j log N(x_j | mean, var), shape N x 2."""
        X = _check_features(X, self.dim)
        diff = X[:, None, :] - self.means[None, :, :]
        ll = -0.5 * (np.log(2 * np.pi * self.variances)[None] + diff**2 / self.variances[None])
        return np.log(self.priors)[None, :] + ll.sum(axis=2)

    def posteriors(self, X) -> np.ndarray:
        j = self.joint_log(X)
        j = j - j.max(axis=1, keepdims=True)
        p = np.exp(j)
        return p / p.sum(axis=1, keepdims=True)

    def scores(self, X) -> np.ndarray:
        return self.posteriors(X)[:, 1]

    def params(self) -> dict:
        return {
            "priors": self.priors.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


def train_gnb(data: LabeledDataset) -> GnbModel:
    X, y = data.features, data.labels
    if not np.all(np.isfinite(X)):
        raise InvalidData("features must be finite")
    counts = [int((~y).sum()), int(y.sum())]
    if min(counts) < 2:
        raise DegenerateLabels("each class needs at least two samples")
    means, variances = [], []
    for cls in (False, True):
        Xc = X[y == cls]
        means.append(Xc.mean(axis=0))
        variances.append(np.maximum(Xc.var(axis=0), VAR_FLOOR))
    n = len(y)
    priors = np.array([counts[0] / n, counts[1] / n])
    return GnbModel(priors=priors, means=np.array(means), variances=np.array(variances))


# ---------------------------------------------------------------------------
# shared surface

TrainedModel = Union[LogisticModel, KnnModel, GnbModel]
MODEL_NAMES = ("LR", "KNN", "GNB")


def train(name: str, data: LabeledDataset, *, k: int = 5, hyper: LogisticHyper | None = None) -> TrainedModel:
    name = name.upper()
    if name == "LR":
        return train_logistic(data, hyper)
    if name == "KNN":
        return train_knn(data, k)
    if name in ("GNB", "NB"):
        return train_gnb(data)
    raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")


def predict_batch(model: TrainedModel, X) -> tuple[np.ndarray, np.ndarray]:
    scores = model.scores(X)
    return _labels_from_scores(scores), scores


def predict(model: TrainedModel, features) -> Prediction:
    labels, scores = predict_batch(model, np.asarray(features, dtype=float).reshape(1, -1))
    return Prediction(bool(labels[0]), float(scores[0]))


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "variant": model.variant,
        "parameters": model.params(),
        "metadata": model.metadata,
    }


def model_from_dict(doc: dict) -> TrainedModel:
    try:
        if doc["format_version"] != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format {doc['format_version']}")
        p = doc["parameters"]
        meta = doc.get("metadata") or {}
        variant = doc["variant"]
        if variant == "LR":
            return LogisticModel(
                weights=np.asarray(p["weights"], dtype=float),
                bias=float(p["bias"]),
                standardizer=Standardizer.from_dict(p["standardizer"]),
                metadata=meta,
            )
        if variant == "KNN":
            return KnnModel(
                k=int(p["k"]),
                train_features=np.asarray(p["train_features"], dtype=float),
                train_labels=np.asarray(p["train_labels"], dtype=bool),
                standardizer=Standardizer.from_dict(p["standardizer"]),
                metadata=meta,
            )
        if variant == "GNB":
            return GnbModel(
                priors=np.asarray(p["priors"], dtype=float),
                means=np.asarray(p["means"], dtype=float),
                variances=np.asarray(p["variances"], dtype=float),
                metadata=meta,
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
    raise ModelFormatError(f"unknown model variant {doc.get('variant')!r}")


def model_id(model: TrainedModel) -> str:
    blob = json.dumps(model_to_dict(model), sort_keys=True).encode()
    return f"{model.variant.lower()}-{hashlib.sha256(blob).hexdigest()[:12]}"


def save_model(model: TrainedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> TrainedModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not JSON ({exc})") from exc
    return model_from_dict(doc)
