"""Linear and one-hidden-layer ReLU classifiers with analytic gradients."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LINEAR = "linear"
MLP = "mlp"


@dataclass
class LossSpec:
    weight_decay: float = 0.0
    learning_rate: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    momentum: float = 0.0
    loss_kind: str = "cross_entropy"

    def __post_init__(self):
        if self.loss_kind != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss_kind!r}")
        if self.weight_decay < 0 or self.learning_rate <= 0:
            raise ValueError("weight_decay must be >= 0 and learning_rate > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class ModelConfig:
    kind: str = LINEAR
    hidden: int = 32


@dataclass
class Classifier:
    """Featurizer followed by a linear head producing one logit per superclass.

    For ``kind == "linear"`` the featurizer is the identity. Parameters live in
    ``params`` (an ordered dict of arrays) so they can be flattened for
    gradient checks and checkpoints.
    """

    kind: str
    params: dict
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.params["W1" if self.kind == MLP else "W"].shape[0]

    @property
    def n_classes(self) -> int:
        return self.params["W2" if self.kind == MLP else "W"].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.params["W1"].shape[1] if self.kind == MLP else self.input_dim

    @property
    def head(self):
        if self.kind == MLP:
            return self.params["W2"], self.params["b2"]
        return self.params["W"], self.params["b"]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def with_flat(self, theta) -> "Classifier":
        theta = np.asarray(theta, dtype=float)
        new, i = {}, 0
        for name, p in self.params.items():
            new[name] = theta[i:i + p.size].reshape(p.shape).copy()
            i += p.size
        return Classifier(self.kind, new, self.seed)

    def copy(self) -> "Classifier":
        return Classifier(self.kind, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def binary_direction(self):
        """(w1 - w0, b1 - b0): the normal and offset of the binary decision boundary."""
        W, b = self.head
        if W.shape[1] != 2:
            raise ValueError("binary head required")
        return W[:, 1] - W[:, 0], b[1] - b[0]


def init_classifier(kind: str, input_dim: int, n_classes: int, seed: int,
                    hidden: int = 32) -> Classifier:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return (rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                rng.uniform(-bound, bound, size=fan_out))

    if kind == LINEAR:
        W, b = layer(input_dim, n_classes)
        params = {"W": W, "b": b}
    elif kind == MLP:
        W1, b1 = layer(input_dim, hidden)
        W2, b2 = layer(hidden, n_classes)
        params = {"W1": W1, "b1": b1, "W2": W2, "b2": b2}
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return Classifier(kind, params, seed)


def zero_classifier(input_dim: int, n_classes: int) -> Classifier:
    return Classifier(LINEAR, {"W": np.zeros((input_dim, n_classes)), "b": np.zeros(n_classes)})


def log_softmax(logits) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_input(model: Classifier, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.input_dim:
        raise ValueError(f"expected input dim {model.input_dim}, got {X.shape[1]}")
    return X


def featurize(model: Classifier, X) -> np.ndarray:
    X = _check_input(model, X)
    if model.kind == MLP:
        return np.maximum(X @ model.params["W1"] + model.params["b1"], 0.0)
    return X


def forward(model: Classifier, X):
    """Return (features, logits) for a single vector or a batch."""
    single = np.ndim(X) == 1
    feats = featurize(model, X)
    W, b = model.head
    logits = feats @ W + b
    if single:
        return feats[0], logits[0]
    return feats, logits


def predict_proba(model: Classifier, X) -> np.ndarray:
    return np.exp(log_softmax(forward(model, np.atleast_2d(X))[1]))


def predict(model: Classifier, X) -> np.ndarray:
    return np.argmax(forward(model, np.atleast_2d(X))[1], axis=1)


def binary_scores(model: Classifier, X) -> np.ndarray:
    """Logit of class 1 minus logit of class 0."""
    logits = forward(model, np.atleast_2d(X))[1]
    return logits[:, 1] - logits[:, 0]


def per_example_loss(model: Classifier, X, y) -> np.ndarray:
    logits = forward(model, np.atleast_2d(X))[1]
    return -log_softmax(logits)[np.arange(len(y)), np.asarray(y)]


def weighted_loss_grad(model: Classifier, X, y, sample_weights, weight_decay=0.0):
    """sum_i s_i * CE_i + weight_decay/2 * |theta|^2 and its gradient as a param dict."""
    X = _check_input(model, X)
    y = np.asarray(y)
    s = np.asarray(sample_weights, dtype=float)
    n = len(y)
    if model.kind == MLP:
        pre = X @ model.params["W1"] + model.params["b1"]
        feats = np.maximum(pre, 0.0)
    else:
        feats = X
    W, b = model.head
    logits = feats @ W + b
    logp = log_softmax(logits)
    loss = -np.dot(s, logp[np.arange(n), y])
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= s[:, None]
    grads = {}
    if model.kind == MLP:
        grads["W2"] = feats.T @ dlogits
        grads["b2"] = dlogits.sum(axis=0)
        dpre = (dlogits @ W.T) * (pre > 0)
        grads["W1"] = X.T @ dpre
        grads["b1"] = dpre.sum(axis=0)
        grads = {k: grads[k] for k in model.params}
    else:
        grads["W"] = feats.T @ dlogits
        grads["b"] = dlogits.sum(axis=0)
    if weight_decay:
        for k, p in model.params.items():
            loss += 0.5 * weight_decay * np.sum(p * p)
            grads[k] = grads[k] + weight_decay * p
    return float(loss), grads


def loss_and_grad(model: Classifier, X, y, spec: LossSpec | None = None):
    """Mean cross-entropy plus weight decay, with its exact gradient as a flat vector."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty batch")
    wd = 0.0 if spec is None else spec.weight_decay
    loss, grads = weighted_loss_grad(model, X, y, np.full(len(y), 1.0 / len(y)), wd)
    return loss, np.concatenate([g.ravel() for g in grads.values()])


def loss_component(model: Classifier, features) -> np.ndarray:
    """Signed distance of each feature vector to the binary decision boundary."""
    w, b = model.binary_direction()
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ValueError("head weight difference is zero; decision boundary undefined")
    features = np.atleast_2d(np.asarray(features, dtype=float))
    return (features @ w + b) / norm


def save_checkpoint(model: Classifier, path) -> None:
    """Structured header line followed by the raw little-endian float64 parameter vector."""
    header = {
        "kind": model.kind,
        "seed": model.seed,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(model.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> Classifier:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        theta = np.frombuffer(fh.read(), dtype="<f8")
    params, i = {}, 0
    for name, shape in header["shapes"].items():
        size = int(np.prod(shape))
        params[name] = theta[i:i + size].reshape(shape).copy()
        i += size
    if i != theta.size:
        raise ValueError("checkpoint size does not match header")
    return Classifier(header["kind"], params, header["seed"])
