"""Hierarchical Gaussian generative model and the synthetic families built on it.

Binary attributes Z in {-1,+1}^k pick a subclass; the subclass fixes a Gaussian
over latent features V; observations are X = g(V) and the superclass label is
Y = h(Z).
"""
from __future__ import annotations

import contextlib
import itertools
import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mixture import GaussianMixture

# Rows are generated in fixed-size blocks, each with its own seeded stream, so
# any index range can be reproduced without generating the rows before it.
BLOCK_SIZE = 4096


def attribute_table(k: int) -> np.ndarray:
    """All 2^k attribute vectors in lexicographic order, -1 before +1."""
    return np.array(list(itertools.product((-1, 1), repeat=k)), dtype=int)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class GenerativeSpec:
    """Parameters of the generative model, tabulated over all 2^k attribute vectors.

    ``labels[j]`` is the superclass assigned to attribute vector ``j``.
    Attribute vectors with zero probability are kept in the tables but do not
    form subclasses.
    """

    attribute_probs: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    labels: np.ndarray
    feature_map: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        probs = np.asarray(self.attribute_probs, dtype=float)
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "attribute_probs", probs)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "labels", labels)

        m = probs.shape[0]
        k = int(round(np.log2(m)))
        if 2**k != m:
            raise ValueError(f"attribute_probs must have 2^k entries, got {m}")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("attribute_probs must be nonnegative and sum to 1")
        d = means.shape[1]
        if means.shape != (m, d) or covs.shape != (m, d, d):
            raise ValueError("means/covs must be tabulated for every attribute vector")
        if labels.shape != (m,) or labels.min() < 0:
            raise ValueError("labeler must map every attribute vector to a superclass")
        for j, cov in enumerate(covs):
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError(f"covariance {j} is not symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-10:
                raise ValueError(f"covariance {j} is not positive semidefinite")
        if len(np.unique(labels[probs > 0])) < 2:
            raise ValueError("need at least two superclasses with positive mass")

    @property
    def k(self) -> int:
        return int(round(np.log2(len(self.attribute_probs))))

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def subclass_attributes(self) -> np.ndarray:
        """Indices into the 2^k tables of the attribute vectors that form subclasses."""
        return np.flatnonzero(self.attribute_probs > 0)

    @property
    def n_subclasses(self) -> int:
        return len(self.subclass_attributes)

    @property
    def n_superclasses(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def subclass_probs(self) -> np.ndarray:
        return self.attribute_probs[self.subclass_attributes]

    @property
    def subclass_means(self) -> np.ndarray:
        return self.means[self.subclass_attributes]

    @property
    def subclass_covs(self) -> np.ndarray:
        return self.covs[self.subclass_attributes]

    @property
    def superclass_of(self) -> np.ndarray:
        """S(c) for every subclass index c."""
        return self.labels[self.subclass_attributes]

    @property
    def superclass_probs(self) -> np.ndarray:
        return np.bincount(self.superclass_of, weights=self.subclass_probs,
                           minlength=self.n_superclasses)

    def subclass_of_attribute(self, z) -> int:
        """Subclass index of an attribute vector given as a +-1 tuple."""
        table = attribute_table(self.k)
        j = int(np.flatnonzero(np.all(table == np.asarray(z), axis=1))[0])
        hits = np.flatnonzero(self.subclass_attributes == j)
        if hits.size == 0:
            raise KeyError(f"attribute vector {tuple(z)} has zero probability")
        return int(hits[0])

    def superclass_mixture(self, b: int) -> GaussianMixture:
        """p(v | y = b) as a Gaussian mixture over the subclasses of ``b``."""
        members = np.flatnonzero(self.superclass_of == b)
        w = self.subclass_probs[members]
        return GaussianMixture(w / w.sum(), self.subclass_means[members],
                               self.subclass_covs[members])

    def to_dict(self) -> dict:
        if self.feature_map is not None:
            raise ValueError("specs with a custom feature map are not serializable")
        return {
            "k": self.k,
            "d": self.d,
            "attribute_probs": self.attribute_probs.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "labeler": self.labels.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GenerativeSpec":
        spec = cls(doc["attribute_probs"], doc["means"], doc["covs"], doc["labeler"])
        if spec.k != doc.get("k", spec.k) or spec.d != doc.get("d", spec.d):
            raise ValueError("declared k/d disagree with the tables")
        return spec

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "GenerativeSpec":
        return cls.from_dict(json.loads(text))


class Dataset:
    """Features with superclass labels and, optionally, true subclass labels.

    Reads of ``z`` are recorded in ``z_reads`` under the current audit stage so
    pipelines can prove they never looked at subclass labels outside of
    oracle-labelled evaluation.
    """

    def __init__(self, features, y, z=None, eval_weights=None, n_classes=None):
        self.features = np.atleast_2d(np.asarray(features, dtype=float))
        self.y = np.asarray(y, dtype=int)
        n = self.features.shape[0]
        if self.y.shape != (n,):
            raise ValueError("y must have one label per row")
        self.n_classes = int(n_classes if n_classes is not None else self.y.max() + 1)
        if self.n_classes < 2:
            raise ValueError("need at least two superclasses")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError("superclass label out of range")
        self._z = None if z is None else np.asarray(z, dtype=int)
        if self._z is not None:
            if self._z.shape != (n,) or self._z.min() < 0:
                raise ValueError("z must be a nonnegative label per row")
            for c in np.unique(self._z):
                if len(np.unique(self.y[self._z == c])) != 1:
                    raise ValueError(f"subclass {c} spans several superclasses")
        if eval_weights is None:
            self.eval_weights = np.ones(n)
        else:
            self.eval_weights = np.asarray(eval_weights, dtype=float)
            if self.eval_weights.shape != (n,) or np.any(self.eval_weights < 0):
                raise ValueError("eval_weights must be nonnegative, one per row")
            if not np.any(self.eval_weights > 0):
                raise ValueError("eval_weights are all zero")
        self.stage = "unstaged"
        self.z_reads: list[str] = []

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def has_z(self) -> bool:
        return self._z is not None

    @property
    def z(self) -> np.ndarray:
        if self._z is None:
            raise AttributeError("dataset has no subclass labels")
        self.z_reads.append(self.stage)
        return self._z

    @contextlib.contextmanager
    def audit(self, stage: str):
        prev, self.stage = self.stage, stage
        try:
            yield self
        finally:
            self.stage = prev

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.y[idx],
                       None if self._z is None else self._z[idx],
                       self.eval_weights[idx], n_classes=self.n_classes)

    def with_features(self, features) -> "Dataset":
        out = Dataset(features, self.y, self._z, self.eval_weights, self.n_classes)
        return out

    def with_weights(self, eval_weights) -> "Dataset":
        return Dataset(self.features, self.y, self._z, eval_weights, self.n_classes)


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(block)]))


def _sample_block(spec: GenerativeSpec, probs: np.ndarray, factors, size, rng):
    z = rng.choice(len(probs), size=size, p=probs)
    eps = rng.standard_normal((size, spec.d))
    v = spec.subclass_means[z] + np.einsum("nij,nj->ni", factors[z], eps)
    return v, z


def sample_rows(spec: GenerativeSpec, start: int, stop: int, seed: int,
                subclass_probs=None):
    """Rows ``start:stop`` of the infinite seeded stream; returns (v, z)."""
    probs = spec.subclass_probs if subclass_probs is None else np.asarray(subclass_probs)
    probs = probs / probs.sum()
    factors = np.stack([_psd_factor(c) for c in spec.subclass_covs])
    vs, zs = [], []
    for block in range(start // BLOCK_SIZE, (stop - 1) // BLOCK_SIZE + 1):
        v, z = _sample_block(spec, probs, factors, BLOCK_SIZE, _block_rng(seed, block))
        lo = max(start - block * BLOCK_SIZE, 0)
        hi = min(stop - block * BLOCK_SIZE, BLOCK_SIZE)
        vs.append(v[lo:hi])
        zs.append(z[lo:hi])
    return np.concatenate(vs), np.concatenate(zs)


def sample_dataset(spec: GenerativeSpec, n: int, seed: int, subclass_probs=None) -> Dataset:
    """Draw ``n`` i.i.d. rows (Z, V, X = g(V), Y = h(Z)).

    ``subclass_probs`` overrides the subclass frequencies, e.g. to draw a
    balanced evaluation split that is later reweighted.
    """
    if n < 1:
        raise ValueError("n must be positive")
    v, z = sample_rows(spec, 0, n, seed, subclass_probs)
    x = v if spec.feature_map is None else np.asarray(spec.feature_map(v))
    return Dataset(x, spec.superclass_of[z], z, n_classes=spec.n_superclasses)


def example1_spec(alpha: float) -> GenerativeSpec:
    """Two superclasses, each a big subclass (weight 1-alpha) plus a rare one (alpha).

    Means are (4 Z1, Z1 + 3 Z2) with covariance alpha^2 I and Y = 1[Z2 = +1].
    """
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    table = attribute_table(2)
    probs = np.array([(1 - alpha) / 2 if z1 == z2 else alpha / 2 for z1, z2 in table])
    means = np.array([[4.0 * z1, z1 + 3.0 * z2] for z1, z2 in table])
    covs = np.stack([alpha**2 * np.eye(2)] * 4)
    labels = (table[:, 1] == 1).astype(int)
    return GenerativeSpec(probs, means, covs, labels)


def lemma1_spec(d: int, seed: int, per_superclass: int = 6) -> GenerativeSpec:
    """Random 2 x ``per_superclass`` Gaussian mixture with uniform subclass weights.

    Means are uniform in [-5, 5]^d and covariances diagonal with entries
    uniform in [0.25, 1]. The first attribute decides the superclass.
    """
    if d < 1:
        raise ValueError("d must be positive")
    k = 1 + int(np.ceil(np.log2(per_superclass)))
    table = attribute_table(k)
    labels = (table[:, 0] == 1).astype(int)
    probs = np.zeros(len(table))
    for b in (0, 1):
        probs[np.flatnonzero(labels == b)[:per_superclass]] = 1.0
    probs /= probs.sum()
    rng = np.random.default_rng(seed)
    means = rng.uniform(-5.0, 5.0, size=(len(table), d))
    covs = np.stack([np.diag(rng.uniform(0.25, 1.0, size=d)) for _ in table])
    return GenerativeSpec(probs, means, covs, labels)
