"""Dimensionality reduction applied to feature representations before clustering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import models

IDENTITY = "identity"
PCA = "pca"
LOSS_COMPONENT = "loss_component"


@dataclass(frozen=True)
class Reduction:
    kind: str
    out_dim: int
    mean: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None  # (d, out_dim), orthonormal columns
    eigenvalues: Optional[np.ndarray] = None  # full spectrum, descending
    padded: bool = False  # basis completed beyond the data rank
    model: Optional[models.Classifier] = None

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        total = self.eigenvalues.sum()
        if total == 0:
            return np.zeros(self.out_dim)
        return self.eigenvalues[: self.out_dim] / total


def fit_reduction(kind: str, features, out_dim: int = 2, model=None) -> Reduction:
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if kind == IDENTITY:
        return Reduction(IDENTITY, features.shape[1])
    if kind == LOSS_COMPONENT:
        if model is None:
            raise ValueError("loss_component reduction needs the trained classifier")
        models.loss_component(model, features[:1])  # validates the head
        return Reduction(LOSS_COMPONENT, 1, model=model)
    if kind != PCA:
        raise ValueError(f"unknown reduction {kind!r}")
    n, d = features.shape
    if out_dim > d:
        raise ValueError(f"out_dim {out_dim} exceeds feature dim {d}")
    if n < out_dim:
        raise ValueError("need at least out_dim points for pca")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude loading of each axis is positive
    flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(d)])
    vecs = vecs * np.where(flip == 0, 1.0, flip)
    rank = int(np.sum(vals > 1e-12 * max(vals.max(), 1e-300)))
    return Reduction(PCA, out_dim, mean, vecs[:, :out_dim], vals, padded=out_dim > rank)


def transform(reduction: Reduction, features) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if reduction.kind == IDENTITY:
        if features.shape[1] != reduction.out_dim:
            raise ValueError("feature dimension mismatch")
        return features
    if reduction.kind == LOSS_COMPONENT:
        return models.loss_component(reduction.model, features)[:, None]
    if features.shape[1] != reduction.basis.shape[0]:
        raise ValueError("feature dimension mismatch")
    return (features - reduction.mean) @ reduction.basis


def inverse_transform(reduction: Reduction, reduced) -> np.ndarray:
    if reduction.kind != PCA:
        raise ValueError("only pca reductions are invertible")
    return np.atleast_2d(reduced) @ reduction.basis.T + reduction.mean


def to_dict(reduction: Reduction) -> dict:
    """JSON-ready description; a loss_component reduction omits its classifier."""
    doc = {"kind": reduction.kind, "out_dim": reduction.out_dim, "padded": reduction.padded}
    if reduction.kind == PCA:
        doc["mean"] = reduction.mean.tolist()
        doc["basis"] = reduction.basis.tolist()
        doc["eigenvalues"] = reduction.eigenvalues.tolist()
    return doc


def from_dict(doc: dict, model=None) -> Reduction:
    kind = doc["kind"]
    if kind == PCA:
        return Reduction(PCA, int(doc["out_dim"]), np.array(doc["mean"]),
                         np.array(doc["basis"]).reshape(len(doc["mean"]), -1),
                         np.array(doc["eigenvalues"]), bool(doc["padded"]))
    if kind == LOSS_COMPONENT:
        if model is None:
            raise ValueError("loss_component reduction needs the trained classifier")
        return Reduction(LOSS_COMPONENT, 1, model=model)
    return Reduction(kind, int(doc["out_dim"]))
