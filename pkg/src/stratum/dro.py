"""ERM and group-DRO training.

All GDRO variants share one engine: every group owns a pool of example
indices and a per-example weight. A step draws groups uniformly, then an
example uniformly from each drawn group's pool, raises the drawn groups' log
weights by ``eta_q`` times their (weighted) batch loss, and descends the
q-weighted loss.

  hard        pool = examples labelled g,                    weight 1
  soft        pool = examples of superclass S(c),            weight w_hat(x, c)
  restricted  pool = examples of c + the other superclass,   weight 1
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import models
from .models import Classifier, LossSpec, ModelConfig

log = logging.getLogger(__name__)

ERM = "erm"
HARD = "gdro_hard"
SOFT = "gdro_soft"
RESTRICTED = "gdro_restricted"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DroConfig:
    eta_q: float = 0.1
    group_adjustment: float = 0.0  # C in the additive C / sqrt(n_g) term
    mode: str = HARD

    def __post_init__(self):
        if self.eta_q < 0 or self.group_adjustment < 0:
            raise ValueError("eta_q and group_adjustment must be nonnegative")
        if self.mode not in (ERM, HARD, SOFT, RESTRICTED):
            raise ValueError(f"unknown dro mode {self.mode!r}")


class GroupWeights:
    """Adversary distribution q over groups, kept as log weights for stability."""

    def __init__(self, n_groups: int, log_q=None):
        self.log_q = np.full(n_groups, -np.log(n_groups)) if log_q is None else np.asarray(log_q, float)

    @property
    def q(self) -> np.ndarray:
        return np.exp(self.log_q - np.logaddexp.reduce(self.log_q))

    def update(self, groups, losses, eta_q: float) -> "GroupWeights":
        """q_g <- q_g * exp(eta_q * loss_g) for each listed group, then renormalize."""
        log_q = self.log_q.copy()
        np.add.at(log_q, np.asarray(groups, dtype=int), eta_q * np.asarray(losses, dtype=float))
        return GroupWeights(len(log_q), log_q - np.logaddexp.reduce(log_q))

    def copy(self) -> "GroupWeights":
        return GroupWeights(len(self.log_q), self.log_q.copy())


def adjusted_losses(losses, group_sizes, C: float) -> np.ndarray:
    """Group losses plus the small-group bonus C / sqrt(n_g)."""
    return np.asarray(losses, float) + C / np.sqrt(np.asarray(group_sizes, float))


@dataclass
class TrainRecord:
    """Per-epoch checkpoints and training metrics; evaluation fields filled by the harness."""

    mode: str
    checkpoints: list = field(default_factory=list)
    history: list = field(default_factory=list)  # dict rows per epoch
    q_history: list = field(default_factory=list)
    val_reports: list = field(default_factory=list)
    selected_epoch: Optional[int] = None
    test_reports: dict = field(default_factory=dict)

    @property
    def final(self) -> Classifier:
        return self.checkpoints[-1]

    @property
    def selected(self) -> Classifier:
        return self.checkpoints[-1 if self.selected_epoch is None else self.selected_epoch]

    def to_csv(self) -> str:
        if not self.history:
            return ""
        n_groups = max(len(r.get("group_losses", [])) for r in self.history)
        head = ["epoch", "loss", "accuracy", "robust_loss"] + [f"group_loss_{g}" for g in range(n_groups)]
        lines = [",".join(head)]
        for r in self.history:
            gl = list(r.get("group_losses", []))
            gl += [""] * (n_groups - len(gl))
            row = [r["epoch"], r["loss"], r["accuracy"], r.get("robust_loss", "")] + gl
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
        return "\n".join(lines) + "\n"


class _Momentum:
    def __init__(self, momentum: float):
        self.momentum = momentum
        self.buf = None

    def direction(self, grad):
        if not self.momentum:
            return grad
        self.buf = grad if self.buf is None else self.momentum * self.buf + grad
        return self.buf


def _apply(model: Classifier, grads: dict, lr: float, opt: _Momentum | None = None) -> Classifier:
    flat = np.concatenate([g.ravel() for g in grads.values()])
    step = opt.direction(flat) if opt is not None else flat
    return model.with_flat(model.flat() - lr * step)


def _epoch_metrics(model, X, y, groups=None, n_groups=0):
    losses = models.per_example_loss(model, X, y)
    acc = float(np.mean(models.predict(model, X) == y))
    row = {"loss": float(losses.mean()), "accuracy": acc}
    if groups is not None:
        gl = [float(losses[groups == g].mean()) if np.any(groups == g) else float("nan")
              for g in range(n_groups)]
        row["group_losses"] = gl
        row["robust_loss"] = float(np.nanmax(gl))
    return row


def erm_train(dataset, model_cfg: ModelConfig, loss_spec: LossSpec, seed: int,
              init: Classifier | None = None) -> TrainRecord:
    """Mini-batch gradient descent on mean cross-entropy plus weight decay."""
    X, y = dataset.features, dataset.y
    model = init.copy() if init is not None else models.init_classifier(
        model_cfg.kind, dataset.d, dataset.n_classes, seed, model_cfg.hidden)
    rng = np.random.default_rng([seed, 1])
    opt = _Momentum(loss_spec.momentum)
    record = TrainRecord(ERM)
    n, bs = dataset.n, loss_spec.batch_size
    for epoch in range(loss_spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = models.weighted_loss_grad(
                model, X[idx], y[idx], np.full(len(idx), 1.0 / len(idx)), loss_spec.weight_decay)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            model = _apply(model, grads, loss_spec.learning_rate, opt)
        record.checkpoints.append(model.copy())
        record.history.append({"epoch": epoch, **_epoch_metrics(model, X, y)})
    return record


# ---------------------------------------------------------------- GDRO engine

@dataclass
class GroupPools:
    """Sampling pools and per-example weights for each group."""

    pools: list  # index arrays
    weights: Optional[np.ndarray] = None  # (n, G) per-example group weights, None = all ones
    sizes: Optional[np.ndarray] = None  # n_g used by the size adjustment

    def __post_init__(self):
        for g, p in enumerate(self.pools):
            if len(p) == 0:
                raise ValueError(f"group {g} is empty")
        self._flat = np.concatenate(self.pools)
        self._starts = np.concatenate([[0], np.cumsum([len(p) for p in self.pools])[:-1]])
        self._lens = np.array([len(p) for p in self.pools])
        if self.sizes is None:
            self.sizes = self._lens.astype(float)

    @property
    def n_groups(self) -> int:
        return len(self.pools)

    def draw(self, rng, size: int):
        """Uniform group per slot, then a uniform example from that group's pool."""
        groups = rng.integers(self.n_groups, size=size)
        offs = (rng.random(size) * self._lens[groups]).astype(int)
        return groups, self._flat[self._starts[groups] + offs]

    def example_weights(self, groups, idx) -> np.ndarray:
        if self.weights is None:
            return np.ones(len(idx))
        return self.weights[idx, groups]


def hard_pools(groups, n_groups: int | None = None) -> GroupPools:
    groups = np.asarray(groups, dtype=int)
    G = int(groups.max()) + 1 if n_groups is None else n_groups
    return GroupPools([np.flatnonzero(groups == g) for g in range(G)])


def soft_pools(y, weight_matrix) -> GroupPools:
    """Pools for soft (density-ratio weighted) subclasses; see riskest.WeightMatrix."""
    y = np.asarray(y)
    pools = [np.flatnonzero(y == b) for b in weight_matrix.superclass]
    sizes = np.array([len(p) * pr for p, pr in zip(pools, weight_matrix.class_prior)])
    return GroupPools(pools, weight_matrix.values, sizes)


def restricted_pools(y, groups, designated: int) -> GroupPools:
    """One group per subclass of the designated superclass, each joined with the other superclass."""
    y = np.asarray(y)
    groups = np.asarray(groups)
    other = np.flatnonzero(y != designated)
    ids = np.unique(groups[y == designated])
    return GroupPools([np.sort(np.concatenate([np.flatnonzero((groups == c) & (y == designated)), other]))
                       for c in ids])


def gdro_batch_step(model: Classifier, q: GroupWeights, X, y, groups, sample_w,
                    cfg: DroConfig, loss_spec: LossSpec, group_sizes, opt=None):
    """One GDRO update from a batch of (example, group, weight) triples.

    Per drawn group the batch loss is the mean of weight * loss over its
    slots; q moves by exp(eta_q * (that loss + C / sqrt(n_g))) and the model
    descends sum_g q'_g * grad(batch loss of g). A batch of one reduces to
    the single-example update q_g <- q_g exp(eta_q l), theta <- theta - lr q'_g grad l.
    """
    groups = np.asarray(groups)
    losses = models.per_example_loss(model, X, y) * sample_w
    present, inv, counts = np.unique(groups, return_inverse=True, return_counts=True)
    group_loss = np.bincount(inv, weights=losses) / counts
    adj = adjusted_losses(group_loss, np.asarray(group_sizes)[present], cfg.group_adjustment)
    q = q.update(present, adj, cfg.eta_q)
    coef = q.q[groups] * sample_w / counts[inv]
    loss, grads = models.weighted_loss_grad(model, X, y, coef, loss_spec.weight_decay)
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite GDRO loss")
    return _apply(model, grads, loss_spec.learning_rate, opt), q


def gdro_step_hard(model, q: GroupWeights, x, y, g: int, cfg: DroConfig,
                   loss_spec: LossSpec, group_sizes):
    """Single-example hard-group update."""
    return gdro_batch_step(model, q, np.atleast_2d(x), np.atleast_1d(y), np.atleast_1d(g),
                           np.ones(1), cfg, loss_spec, group_sizes)


def gdro_step_soft(model, q: GroupWeights, c: int, x, superclass: int, w_hat: float,
                   cfg: DroConfig, loss_spec: LossSpec):
    """Single-example modified-GDRO update for subclass ``c`` with weight w_hat(x, c).

    The group-size adjustment does not apply here (C is taken as 0).
    """
    if w_hat < 0:
        raise ValueError("w_hat must be nonnegative")
    soft_cfg = DroConfig(cfg.eta_q, 0.0, SOFT)
    return gdro_batch_step(model, q, np.atleast_2d(x), np.atleast_1d(superclass),
                           np.atleast_1d(c), np.array([float(w_hat)]), soft_cfg, loss_spec,
                           np.ones(len(q.log_q)))


def gdro_train(dataset, pools: GroupPools, model_cfg: ModelConfig, loss_spec: LossSpec,
               cfg: DroConfig, seed: int, init: Classifier | None = None,
               eval_groups=None) -> TrainRecord:
    """Run epochs * ceil(n / batch_size) GDRO steps, checkpointing every epoch.

    ``eval_groups`` (hard labels) drive the per-group losses logged each epoch;
    they default to the pools when those are disjoint hard groups.
    """
    X, y = dataset.features, dataset.y
    model = init.copy() if init is not None else models.init_classifier(
        model_cfg.kind, dataset.d, dataset.n_classes, seed, model_cfg.hidden)
    rng = np.random.default_rng([seed, 2])
    q = GroupWeights(pools.n_groups)
    opt = _Momentum(loss_spec.momentum)
    record = TrainRecord(cfg.mode)
    if eval_groups is None and pools.weights is None and sum(len(p) for p in pools.pools) == dataset.n:
        eval_groups = np.empty(dataset.n, dtype=int)
        for g, p in enumerate(pools.pools):
            eval_groups[p] = g
    n_eval = 0 if eval_groups is None else int(np.max(eval_groups)) + 1
    bs = loss_spec.batch_size
    steps = -(-dataset.n // bs)
    for epoch in range(loss_spec.epochs):
        for _ in range(steps):
            groups, idx = pools.draw(rng, bs)
            model, q = gdro_batch_step(model, q, X[idx], y[idx], groups,
                                       pools.example_weights(groups, idx), cfg, loss_spec,
                                       pools.sizes, opt)
        record.checkpoints.append(model.copy())
        record.q_history.append(q.q)
        record.history.append({"epoch": epoch, **_epoch_metrics(model, X, y, eval_groups, n_eval)})
    return record


def restricted_robust_loss(model: Classifier, dataset, groups, designated: int) -> float:
    """max over designated-superclass groups c of the mean loss over c plus the other superclass."""
    y = dataset.y
    if dataset.n_classes != 2:
        raise ValueError("restricted objective needs a binary task")
    losses = models.per_example_loss(model, dataset.features, y)
    groups = np.asarray(groups)
    other = y != designated
    ids = np.unique(groups[y == designated])
    if len(ids) == 0:
        raise ValueError("designated superclass has no groups")
    worst = -np.inf
    for c in ids:
        mask = ((groups == c) & (y == designated)) | other
        if not mask.any():
            raise ValueError("empty restricted group")
        worst = max(worst, float(losses[mask].mean()))
    return worst
