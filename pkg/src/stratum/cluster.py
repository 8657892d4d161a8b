"""Per-superclass clustering: k-means, GMM-EM, Silhouette model selection, overclustering."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import reduce as red
from .mixture import GaussianMixture, logsumexp_rows

log = logging.getLogger(__name__)

KMEANS = "kmeans"
GMM = "gmm"
METHOD_ORDER = (KMEANS, GMM)


class ClusteringError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterModel:
    method: str
    k: int
    labels: np.ndarray  # assignments of the points the model was fitted on
    centroids: Optional[np.ndarray] = None
    mixture: Optional[GaussianMixture] = None
    inertia: Optional[float] = None
    log_likelihood: tuple = ()  # per-iteration mean log-likelihood (gmm)
    silhouette: Optional[float] = None  # mean of per-cluster scores
    silhouette_per_cluster: Optional[np.ndarray] = None

    def predict(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.method == KMEANS:
            return np.argmin(cdist(points, self.centroids, "sqeuclidean"), axis=1)
        return np.argmax(self.mixture.joint_logpdf(points), axis=1)


# ---------------------------------------------------------------- k-means

def _kmeanspp(points, k, rng):
    """Greedy k-means++ seeding (several D^2 candidates per step, keep the best)."""
    n = len(points)
    n_local = 2 + int(math.log(k)) if k > 1 else 1
    centers = [points[rng.integers(n)]]
    closest = cdist(points, centers[0][None], "sqeuclidean")[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            cand = rng.integers(n, size=n_local)
        else:
            cand = np.searchsorted(np.cumsum(closest), rng.random(n_local) * total)
            cand = np.minimum(cand, n - 1)
        d_cand = np.minimum(closest[None, :], cdist(points[cand], points, "sqeuclidean"))
        best = int(np.argmin(d_cand.sum(axis=1)))
        centers.append(points[cand[best]])
        closest = d_cand[best]
    return np.array(centers)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300) -> ClusterModel:
    """Lloyd iterations from greedy k-means++ seeds until the assignment is a fixpoint."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(points, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = cdist(points, centroids, "sqeuclidean")
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # reseed an empty cluster at the point farthest from its centroid
            far = int(np.argmax(d2[np.arange(n), new]))
            centroids[j] = points[far]
            d2 = cdist(points, centroids, "sqeuclidean")
            new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    labels = np.argmin(cdist(points, centroids, "sqeuclidean"), axis=1)
    inertia = float(np.sum((points - centroids[labels]) ** 2))
    return _compact(ClusterModel(KMEANS, k, labels, centroids=centroids, inertia=inertia))


# ---------------------------------------------------------------- GMM

def _m_step(points, resp, reg):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    means = (resp.T @ points) / nk[:, None]
    d = points.shape[1]
    diff = points[None, :, :] - means[:, None, :]  # (k, n, d)
    covs = np.matmul((diff * resp.T[:, :, None]).transpose(0, 2, 1), diff) / nk[:, None, None]
    covs += reg * np.eye(d)
    return GaussianMixture(weights, means, covs), nk


def _em_once(points, k, seed, reg, tol, max_iter):
    n = len(points)
    init = kmeans(points, k, seed).labels if k > 1 else np.zeros(n, dtype=int)
    resp = np.zeros((n, k))
    resp[np.arange(n), init] = 1.0
    if resp.sum(axis=0).min() == 0:
        raise ClusteringError("empty component at initialization")
    trace = []
    for _ in range(max_iter):
        mix, nk = _m_step(points, resp, reg)
        if nk.min() < 1e-8 * n or np.linalg.eigvalsh(mix.covs).min() < 1e-12:
            raise ClusteringError("component collapsed")
        joint = mix.joint_logpdf(points)
        norm = logsumexp_rows(joint)
        trace.append(float(norm.mean()))
        resp = np.exp(joint - norm[:, None])
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            break
    return mix, trace


def gmm_em(points, k: int, seed: int = 0, reg: float = 1e-6, tol: float = 1e-6,
           max_iter: int = 500, restarts: int = 5, n_init: int = 1) -> ClusterModel:
    """Full-covariance EM with k-means++/Lloyd initialization.

    ``reg`` is added to every covariance diagonal at each M-step. A collapsed
    fit is retried with a fresh seed up to ``restarts`` times. With
    ``n_init > 1`` the best of several seeds (by final log-likelihood) is kept.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    best = None
    for init in range(n_init):
        fit = None
        for attempt in range(restarts + 1):
            try:
                fit = _em_once(points, k, seed + 7919 * init + 104729 * attempt,
                               reg, tol, max_iter)
                break
            except ClusteringError:
                log.debug("gmm collapse (k=%d, attempt %d)", k, attempt)
        if fit is None:
            raise ClusteringError(f"gmm with k={k} collapsed after {restarts} restarts")
        if best is None or fit[1][-1] > best[1][-1]:
            best = fit
    mix, trace = best
    labels = np.argmax(mix.joint_logpdf(points), axis=1)
    return _compact(ClusterModel(GMM, k, labels, mixture=mix, log_likelihood=tuple(trace)))


def _compact(model: ClusterModel) -> ClusterModel:
    """Drop clusters that own no fitted points and relabel consecutively."""
    used = np.unique(model.labels)
    if len(used) == model.k:
        return model
    remap = np.full(model.k, -1)
    remap[used] = np.arange(len(used))
    labels = remap[model.labels]
    if model.method == KMEANS:
        return replace(model, k=len(used), labels=labels, centroids=model.centroids[used])
    mix = model.mixture
    w = mix.weights[used]
    mix = GaussianMixture(w / w.sum(), mix.means[used], mix.covs[used])
    return replace(model, k=len(used), labels=labels, mixture=mix)


def fit(method: str, points, k: int, seed: int = 0) -> ClusterModel:
    if method == KMEANS:
        return kmeans(points, k, seed)
    if method == GMM:
        return gmm_em(points, k, seed)
    raise ValueError(f"unknown clustering method {method!r}")


# ---------------------------------------------------------------- Silhouette

def silhouette_samples(dist: np.ndarray, labels) -> np.ndarray:
    """Per-point Silhouette (b - a) / max(a, b) from a full distance matrix.

    Points in singleton clusters score 0.
    """
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two clusters")
    n = len(labels)
    onehot = np.zeros((n, len(uniq)))
    onehot[np.arange(n), inv] = 1.0
    sums = dist @ onehot
    counts = onehot.sum(axis=0)
    own = counts[inv]
    a = np.where(own > 1, sums[np.arange(n), inv] / np.maximum(own - 1, 1), 0.0)
    means = sums / counts
    means[np.arange(n), inv] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(denom > 0, (b - a) / denom, 0.0)
    return np.where(own > 1, s, 0.0)


class SilhouetteEvaluator:
    """Caches a seeded subsample and its distance matrix for repeated scoring."""

    def __init__(self, points, cap: int = 2000, seed: int = 0):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        if n > cap:
            self.index = np.sort(np.random.default_rng(seed).choice(n, cap, replace=False))
        else:
            self.index = np.arange(n)
        sub = points[self.index]
        self.dist = cdist(sub, sub)

    def samples(self, labels) -> np.ndarray:
        return silhouette_samples(self.dist, np.asarray(labels)[self.index])

    def score(self, labels):
        """(mean over sampled points, per-cluster means indexed by label value)."""
        labels = np.asarray(labels)
        s = self.samples(labels)
        sub = labels[self.index]
        k = int(labels.max()) + 1
        per = np.full(k, np.nan)
        for c in range(k):
            mask = sub == c
            if mask.any():
                per[c] = s[mask].mean()
        return float(s.mean()), per


def silhouette(points, assignments, cap: int = 2000, seed: int = 0):
    """Euclidean Silhouette: (mean over points, per-cluster mean vector).

    Above ``cap`` points the score is computed on a seeded subsample.
    """
    return SilhouetteEvaluator(points, cap, seed).score(assignments)


def _selection_score(per_cluster) -> float:
    return float(np.nanmean(per_cluster))


# ---------------------------------------------------------------- model selection

def auto_cluster(points, k_range: Sequence[int] = range(2, 11),
                 methods: Sequence[str] = METHOD_ORDER, seed: int = 0, cap: int = 2000,
                 evaluator: Optional[SilhouetteEvaluator] = None) -> ClusterModel:
    """Fit every (k, method) candidate; keep the best mean per-cluster Silhouette.

    Ties go to the smaller k, then to k-means over GMM.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    evaluator = evaluator or SilhouetteEvaluator(points, cap, seed)
    methods = sorted(methods, key=METHOD_ORDER.index)
    best, best_score = None, -np.inf
    for k in sorted(k_range):
        if k > len(points):
            continue
        for method in methods:
            try:
                model = fit(method, points, k, seed)
                if model.k < 2:
                    continue
                _, per = evaluator.score(model.labels)
            except (ClusteringError, ValueError, np.linalg.LinAlgError) as exc:
                log.debug("candidate (%s, k=%d) skipped: %s", method, k, exc)
                continue
            score = _selection_score(per)
            if score > best_score:
                best_score = score
                best = replace(model, silhouette=score, silhouette_per_cluster=per)
    if best is None:
        raise ClusteringError("every clustering candidate failed")
    return best


@dataclass
class Overclustering:
    """Base clustering refined by promoted sub-clusters (local ids)."""

    base: ClusterModel
    labels: np.ndarray
    k: int
    splits: dict = field(default_factory=dict)  # base id -> (sub model, {sub id: final id})

    def predict(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = self.base.predict(points)
        for base_id, (sub, mapping) in self.splits.items():
            mask = out == base_id
            if mask.any():
                sub_ids = sub.predict(points[mask])
                out[mask] = [mapping.get(int(s), base_id) for s in sub_ids]
        return out


def overcluster(points, base: ClusterModel, F: int = 5, s_min: int = 20, seed: int = 0,
                cap: int = 2000, evaluator: Optional[SilhouetteEvaluator] = None) -> Overclustering:
    """Split each base cluster into F sub-clusters and promote the ones that help.

    A sub-cluster becomes its own cluster when its Silhouette in the updated
    assignment beats the Silhouette its points had in the base clustering and
    it holds at least ``s_min`` points. Promotion never shrinks the residual
    base cluster below ``s_min`` points.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    evaluator = evaluator or SilhouetteEvaluator(points, cap, seed)
    labels = base.labels.copy()
    base_samples = evaluator.samples(base.labels)
    in_sample = np.zeros(len(points), dtype=bool)
    in_sample[evaluator.index] = True
    sample_pos = np.full(len(points), -1)
    sample_pos[evaluator.index] = np.arange(len(evaluator.index))
    next_id = base.k
    splits = {}
    for c in range(base.k):
        members = np.flatnonzero(base.labels == c)
        if len(members) < F:
            continue
        try:
            sub = fit(base.method, points[members], F, seed)
        except (ClusteringError, ValueError, np.linalg.LinAlgError):
            continue
        mapping = {}
        for j in range(sub.k):
            part = members[sub.labels == j]
            residual = np.sum(labels[members] == c) - len(part)
            if len(part) < s_min or residual < s_min:
                continue
            sampled = part[in_sample[part]]
            if sampled.size == 0:
                continue
            trial = labels.copy()
            trial[part] = next_id
            s = evaluator.samples(trial)
            new_score = s[sample_pos[sampled]].mean()
            old_score = base_samples[sample_pos[sampled]].mean()
            if new_score > old_score:
                labels = trial
                mapping[j] = next_id
                next_id += 1
        if mapping:
            splits[c] = (sub, mapping)
    return Overclustering(base, labels, next_id, splits)


# ---------------------------------------------------------------- superclass assembly

@dataclass
class ClusterConfig:
    k_range: tuple = tuple(range(2, 11))
    methods: tuple = METHOD_ORDER
    overcluster_factor: int = 5
    s_min: Optional[int] = None  # default max(20, ceil(0.01 n_b))
    cap: int = 2000
    representations: tuple = (red.PCA, red.LOSS_COMPONENT)
    out_dim: int = 2
    overcluster: bool = True
    seed: int = 0


@dataclass
class SuperclassClustering:
    superclass: int
    representation: str
    reduction: Optional[red.Reduction]
    model: Optional[Overclustering]
    k: int
    labels: np.ndarray
    silhouette: float
    silhouette_per_cluster: np.ndarray
    flagged: bool = False

    def predict(self, features) -> np.ndarray:
        if self.model is None:
            return np.zeros(len(features), dtype=int)
        return self.model.predict(red.transform(self.reduction, features))


@dataclass
class Clustering:
    parts: list  # SuperclassClustering per superclass
    offsets: np.ndarray  # first global id of each superclass block
    assignments: np.ndarray  # global ids of the training points

    @property
    def n_clusters(self) -> int:
        return int(self.offsets[-1] + self.parts[-1].k)

    @property
    def superclass_of(self) -> np.ndarray:
        return np.concatenate([np.full(p.k, p.superclass) for p in self.parts])

    def global_id(self, superclass: int, local: int) -> int:
        return int(self.offsets[superclass] + local)

    def to_dict(self) -> dict:
        doc = {"n_clusters": self.n_clusters, "superclasses": []}
        for p, off in zip(self.parts, self.offsets):
            entry = {
                "superclass": p.superclass,
                "representation": p.representation,
                "offset": int(off),
                "k": p.k,
                "flagged": p.flagged,
                "silhouette": None if np.isnan(p.silhouette) else float(p.silhouette),
                "silhouette_per_cluster": [None if np.isnan(v) else float(v)
                                           for v in p.silhouette_per_cluster],
            }
            if p.reduction is not None:
                entry["reduction"] = red.to_dict(p.reduction)
            if p.model is not None:
                entry["base"] = _model_dict(p.model.base)
                entry["splits"] = {
                    str(b): {"model": _model_dict(sub), "promoted": {str(j): int(g) for j, g in m.items()}}
                    for b, (sub, m) in p.model.splits.items()
                }
            doc["superclasses"].append(entry)
        return doc


def _model_dict(m: ClusterModel) -> dict:
    out = {"method": m.method, "k": m.k}
    if m.method == KMEANS:
        out["centroids"] = m.centroids.tolist()
    else:
        out["weights"] = m.mixture.weights.tolist()
        out["means"] = m.mixture.means.tolist()
        out["covs"] = m.mixture.covs.tolist()
    return out


def _model_from_dict(doc: dict) -> ClusterModel:
    empty = np.zeros(0, dtype=int)
    if doc["method"] == KMEANS:
        return ClusterModel(KMEANS, int(doc["k"]), empty, centroids=np.array(doc["centroids"]))
    mix = GaussianMixture(np.array(doc["weights"]), np.array(doc["means"]), np.array(doc["covs"]))
    return ClusterModel(GMM, int(doc["k"]), empty, mixture=mix)


def clustering_from_dict(doc: dict, assignments, model=None) -> Clustering:
    """Rebuild a Clustering from ``Clustering.to_dict`` output and the training assignments.

    ``model`` is the classifier behind any loss_component representation.
    """
    assignments = np.asarray(assignments, dtype=int)
    parts, offsets = [], []
    for entry in doc["superclasses"]:
        reduction = red.from_dict(entry["reduction"], model) if "reduction" in entry else None
        oc = None
        if "base" in entry:
            splits = {int(b): (_model_from_dict(s["model"]),
                               {int(j): int(g) for j, g in s["promoted"].items()})
                      for b, s in entry["splits"].items()}
            oc = Overclustering(_model_from_dict(entry["base"]), np.zeros(0, dtype=int),
                                int(entry["k"]), splits)
        per = np.array([np.nan if v is None else v for v in entry["silhouette_per_cluster"]])
        sil = np.nan if entry["silhouette"] is None else entry["silhouette"]
        off = int(entry["offset"])
        # per-superclass training labels live in ``assignments``
        parts.append(SuperclassClustering(int(entry["superclass"]), entry["representation"],
                                          reduction, oc, int(entry["k"]),
                                          np.zeros(0, dtype=int), sil, per,
                                          bool(entry["flagged"])))
        offsets.append(off)
    return Clustering(parts, np.array(offsets, dtype=int), assignments)


def default_s_min(n_b: int) -> int:
    return max(20, math.ceil(0.01 * n_b))


def _cluster_one(points, cfg: ClusterConfig, rep: str, s_min: int):
    evaluator = SilhouetteEvaluator(points, cfg.cap, cfg.seed)
    base = auto_cluster(points, cfg.k_range, cfg.methods, cfg.seed, evaluator=evaluator)
    if cfg.overcluster and points.shape[1] > 1:
        oc = overcluster(points, base, cfg.overcluster_factor, s_min, cfg.seed,
                         evaluator=evaluator)
    else:
        oc = Overclustering(base, base.labels.copy(), base.k)
    _, per = evaluator.score(oc.labels)
    return oc, _selection_score(per), per


def cluster_superclasses(dataset, features, config: ClusterConfig | None = None,
                         model=None) -> Clustering:
    """Cluster the features of each superclass and assemble global proxy labels.

    For each superclass every configured representation is clustered
    (auto-k, then overclustering for multi-dimensional ones) and the one with
    the higher mean per-cluster Silhouette is kept.
    """
    cfg = config or ClusterConfig()
    features = np.atleast_2d(np.asarray(features, dtype=float))
    y = dataset.y
    parts = []
    for b in range(dataset.n_classes):
        idx = np.flatnonzero(y == b)
        pts = features[idx]
        if len(idx) < min(cfg.k_range):
            log.warning("superclass %d has %d points; kept as one cluster", b, len(idx))
            parts.append(SuperclassClustering(b, red.IDENTITY, None, None, 1,
                                              np.zeros(len(idx), dtype=int), np.nan,
                                              np.array([np.nan]), flagged=True))
            continue
        s_min = cfg.s_min if cfg.s_min is not None else default_s_min(len(idx))
        best = None
        for rep in cfg.representations:
            try:
                if rep == red.LOSS_COMPONENT:
                    if model is None or dataset.n_classes != 2:
                        continue
                    reduction = red.fit_reduction(rep, pts, model=model)
                elif rep == red.PCA:
                    reduction = red.fit_reduction(rep, pts, min(cfg.out_dim, pts.shape[1]))
                else:
                    reduction = red.fit_reduction(rep, pts)
                reduced = red.transform(reduction, pts)
                oc, score, per = _cluster_one(reduced, cfg, rep, s_min)
            except (ClusteringError, ValueError) as exc:
                log.warning("representation %s failed for superclass %d: %s", rep, b, exc)
                continue
            if best is None or score > best.silhouette:
                best = SuperclassClustering(b, rep, reduction, oc, oc.k, oc.labels,
                                            score, per)
        if best is None:
            parts.append(SuperclassClustering(b, red.IDENTITY, None, None, 1,
                                              np.zeros(len(idx), dtype=int), np.nan,
                                              np.array([np.nan]), flagged=True))
        else:
            parts.append(best)
    offsets = np.concatenate([[0], np.cumsum([p.k for p in parts])[:-1]]).astype(int)
    assignments = np.empty(len(y), dtype=int)
    for p, off in zip(parts, offsets):
        assignments[y == p.superclass] = p.labels + off
    return Clustering(parts, offsets, assignments)


def assign(clustering: Clustering, dataset, features) -> np.ndarray:
    """Global cluster ids for new points, each within its own superclass block."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    y = dataset.y
    if y.max() >= len(clustering.parts) or y.min() < 0:
        raise ValueError("dataset has a superclass label the clustering does not know")
    out = np.empty(len(y), dtype=int)
    for p, off in zip(clustering.parts, clustering.offsets):
        mask = y == p.superclass
        if mask.any():
            out[mask] = p.predict(features[mask]) + off
    return out
