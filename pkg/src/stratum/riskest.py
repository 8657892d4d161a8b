"""Per-subclass risk estimators built on density-ratio weights.

w(x, c) = p(x | z = c) / p(x | y = S(c)) turns superclass-level averages into
unbiased per-subclass risk estimates; the plug-in version uses mixtures
fitted with EM.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import cluster, models, synthgen
from .mixture import logsumexp_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightMatrix:
    """n x C density-ratio weights, zero outside each example's superclass block."""

    values: np.ndarray
    superclass: np.ndarray  # S(c) per column
    class_prior: np.ndarray  # p(z = c | y = S(c)) per column
    underflow: np.ndarray  # rows whose superclass density underflowed

    @property
    def n_groups(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GmmEstimate:
    mixtures: list  # GaussianMixture per superclass
    superclass_marginals: np.ndarray

    @property
    def superclass(self) -> np.ndarray:
        return np.concatenate([np.full(m.k, b) for b, m in enumerate(self.mixtures)])

    @property
    def class_prior(self) -> np.ndarray:
        return np.concatenate([m.weights for m in self.mixtures])

    @property
    def pi_min_hat(self) -> float:
        return float(np.min(self.class_prior * self.superclass_marginals[self.superclass]))


def _weights_from_mixtures(mixtures, superclass_marginals, x, y) -> WeightMatrix:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=int)
    sizes = [m.k for m in mixtures]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    superclass = np.concatenate([np.full(k, b) for b, k in enumerate(sizes)])
    prior = np.concatenate([m.weights for m in mixtures])
    pi_min = float(np.min(prior * np.asarray(superclass_marginals)[superclass]))
    ceiling = 1.0 / pi_min
    W = np.zeros((len(y), len(prior)))
    underflow = np.zeros(len(y), dtype=bool)
    for b, mix in enumerate(mixtures):
        rows = np.flatnonzero(y == b)
        if rows.size == 0:
            continue
        comp = mix.component_logpdf(x[rows])
        with np.errstate(divide="ignore"):
            total = logsumexp_rows(comp + np.log(mix.weights), keepdims=True)
        bad = ~np.isfinite(total[:, 0])
        with np.errstate(invalid="ignore"):
            w = np.exp(comp - total)
        w[bad] = ceiling
        underflow[rows[bad]] = True
        W[rows, offsets[b]:offsets[b] + mix.k] = np.clip(w, 0.0, ceiling)
    return WeightMatrix(W, superclass, prior, underflow)


def spec_weight_matrix(spec: synthgen.GenerativeSpec, x, y) -> WeightMatrix:
    """True weights w(x_i, c) for every example and subclass of a generative spec.

    Columns follow the generative model's subclass order.
    """
    mixtures = [spec.superclass_mixture(b) for b in range(spec.n_superclasses)]
    W = _weights_from_mixtures(mixtures, spec.superclass_probs, x, y)
    # reorder columns from superclass-block order to subclass order
    order = np.concatenate([np.flatnonzero(spec.superclass_of == b)
                            for b in range(spec.n_superclasses)])
    values = np.zeros_like(W.values)
    values[:, order] = W.values
    prior = np.zeros(len(order))
    prior[order] = W.class_prior
    return WeightMatrix(values, spec.superclass_of.copy(), prior, W.underflow)


def true_weight(spec: synthgen.GenerativeSpec, x, c: int) -> float:
    """w(x, c) under the generative model's densities, clamped to [0, 1/pi_min]."""
    b = int(spec.superclass_of[c])
    W = spec_weight_matrix(spec, np.atleast_2d(x), np.array([b]))
    return float(W.values[0, c])


def fit_superclass_mixtures(dataset, features, components_per_superclass,
                            seed: int = 0, n_init: int = 3) -> GmmEstimate:
    """EM mixture per superclass; marginals from empirical label frequencies."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    B = dataset.n_classes
    if np.isscalar(components_per_superclass):
        components_per_superclass = [int(components_per_superclass)] * B
    mixtures = []
    for b in range(B):
        pts = features[dataset.y == b]
        k = components_per_superclass[b]
        if k < 1 or len(pts) < k:
            raise ValueError(f"superclass {b}: cannot fit {k} components to {len(pts)} points")
        mixtures.append(cluster.gmm_em(pts, k, seed, n_init=n_init).mixture)
    marginals = np.bincount(dataset.y, minlength=B) / dataset.n
    return GmmEstimate(mixtures, marginals)


def estimated_weight_matrix(est: GmmEstimate, x, y) -> WeightMatrix:
    return _weights_from_mixtures(est.mixtures, est.superclass_marginals, x, y)


def estimated_weight(est: GmmEstimate, x, c: int) -> float:
    b = int(est.superclass[c])
    return float(estimated_weight_matrix(est, np.atleast_2d(x), np.array([b])).values[0, c])


def _losses(model, dataset, loss_fn: Optional[Callable]):
    if loss_fn is None:
        return models.per_example_loss(model, dataset.features, dataset.y)
    return np.asarray(loss_fn(model, dataset.features, dataset.y), dtype=float)


def per_subclass_risk(model, dataset, loss_fn=None, n_subclasses: int | None = None):
    """R_c = mean loss over examples with z = c; empty subclasses are NaN."""
    losses = _losses(model, dataset, loss_fn)
    z = dataset.z
    C = int(z.max()) + 1 if n_subclasses is None else n_subclasses
    counts = np.bincount(z, minlength=C)
    sums = np.bincount(z, weights=losses, minlength=C)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def robust_risk(risks) -> float:
    return float(np.nanmax(risks))


def reweighted_risk(model, dataset, weights: WeightMatrix, loss_fn=None) -> np.ndarray:
    """R~_c = (1 / #{y = S(c)}) * sum over y_i = S(c) of w(x_i, c) * loss_i."""
    losses = _losses(model, dataset, loss_fn)
    y = dataset.y
    out = np.empty(weights.n_groups)
    for c, b in enumerate(weights.superclass):
        mask = y == b
        out[c] = np.dot(weights.values[mask, c], losses[mask]) / max(mask.sum(), 1)
    return out


def mc_total_variation(p, q, n_samples: int, seed: int = 0):
    """Monte-Carlo TV(p, q) = 1/2 E_{x~m} |p - q| / m with m = (p + q) / 2.

    ``p`` and ``q`` need ``logpdf(x)`` and ``sample(n, rng)``. Returns
    (estimate, standard error).
    """
    rng = np.random.default_rng(seed)
    from_p = rng.random(n_samples) < 0.5
    n_p = int(from_p.sum())
    xs = np.concatenate([p.sample(n_p, rng)[0], q.sample(n_samples - n_p, rng)[0]])
    lp, lq = p.logpdf(xs), q.logpdf(xs)
    lm = np.logaddexp(lp, lq) - np.log(2.0)
    vals = 0.5 * np.abs(np.exp(lp - lm) - np.exp(lq - lm))
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))


@dataclass
class Lemma1Result:
    slope: float
    intercept: float
    n_grid: np.ndarray
    mean_gaps: np.ndarray
    gaps: np.ndarray  # (trials, len(n_grid))

    def to_csv(self) -> str:
        lines = ["n,trial,max_gap"]
        for t, row in enumerate(self.gaps):
            lines += [f"{n},{t},{g!r}" for n, g in zip(self.n_grid, row)]
        lines.append(f"summary,slope={self.slope!r},intercept={self.intercept!r}")
        return "\n".join(lines) + "\n"


def fit_loglog(n_grid, mean_gaps):
    slope, intercept = np.polyfit(np.log(n_grid), np.log(mean_gaps), 1)
    return float(slope), float(intercept)


def lemma1_gap(spec, model, n: int, seed: int) -> float:
    """max_c |R~_c - R_c| on a fresh sample of size n, with true-density weights."""
    data = synthgen.sample_dataset(spec, n, seed)
    W = spec_weight_matrix(spec, data.features, data.y)
    R = per_subclass_risk(model, data, n_subclasses=spec.n_subclasses)
    R_tilde = reweighted_risk(model, data, W)
    return float(np.nanmax(np.abs(R_tilde - R)))


def lemma1_experiment(d: int = 3, n_grid=(250, 500, 1000, 2000, 4000, 8000),
                      trials: int = 20, seed: int = 0) -> Lemma1Result:
    """Scaling of the reweighted-risk error with n, fitted on a log-log scale.

    Every trial draws a fresh random spec and a fixed random linear model.
    """
    n_grid = np.asarray(sorted(n_grid))
    if len(n_grid) < 2:
        raise ValueError("need at least two sample sizes to fit a slope")
    if trials < 1:
        raise ValueError("trials must be positive")
    seeds = np.random.SeedSequence(seed).generate_state(trials * (len(n_grid) + 2))
    seeds = seeds.reshape(trials, len(n_grid) + 2)
    gaps = np.empty((trials, len(n_grid)))
    for t in range(trials):
        spec = synthgen.lemma1_spec(d, int(seeds[t, 0]))
        model = models.init_classifier(models.LINEAR, d, 2, int(seeds[t, 1]))
        for j, n in enumerate(n_grid):
            gaps[t, j] = lemma1_gap(spec, model, int(n), int(seeds[t, j + 2]))
    mean_gaps = gaps.mean(axis=0)
    slope, intercept = fit_loglog(n_grid, mean_gaps)
    return Lemma1Result(slope, intercept, n_grid, mean_gaps, gaps)
