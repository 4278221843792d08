"""Item-separation objectives over memory items, with hand-derived gradients.

Both losses pick each query's positive as the cosine-nearest item inside a
caller-supplied pool (its class partition during class-aware training, the
whole bank otherwise) and treat the items as constants: gradients flow into
the queries only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, PoolError, ShapeError
from .numerics import cosine_matrix

# Selection switches are non-differentiable; distances below this are treated
# as an exact hit and contribute no gradient.
_DIST_FLOOR = 1e-12


@dataclass(frozen=True)
class ContrastiveConfig:
    """Temperature plus the key/value loss weights of the full objective."""

    temperature: float = 0.1
    key_weight: float = 1.0
    value_weight: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.key_weight < 0.0 or self.value_weight < 0.0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class LossTerm:
    """One loss evaluation: scalar value, per-query positives, query gradient."""

    value: float
    positives: np.ndarray
    grad: np.ndarray


def _check_inputs(queries: np.ndarray, items: np.ndarray, positive_pool) -> np.ndarray:
    if queries.ndim != 2 or items.ndim != 2 or queries.shape[1] != items.shape[1]:
        raise ShapeError(
            f"queries {queries.shape} and items {items.shape} must share channels"
        )
    pool = np.asarray(positive_pool, dtype=np.intp).ravel()
    if pool.size == 0:
        raise PoolError("positive pool is empty")
    if pool.min() < 0 or pool.max() >= items.shape[0]:
        raise PoolError(f"positive pool indices out of range for {items.shape[0]} items")
    return pool


def _select_positives(queries: np.ndarray, items: np.ndarray, pool: np.ndarray) -> np.ndarray:
    sims = cosine_matrix(queries, items[pool])
    return pool[np.argmax(sims, axis=1)]


def contrastive_loss(
    queries: np.ndarray,
    items: np.ndarray,
    positive_pool,
    cfg: ContrastiveConfig,
) -> LossTerm:
    """Softmax loss over temperature-scaled dot products against all items.

    Each query's positive is its cosine-nearest pool item; the denominator
    runs over every item, so all non-positives act as negatives. With a
    single item the loss is exactly zero.
    """
    queries = np.asarray(queries, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    pool = _check_inputs(queries, items, positive_pool)
    positives = _select_positives(queries, items, pool)

    logits = queries @ items.T / cfg.temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    pos_logits = logits[np.arange(queries.shape[0]), positives]
    value = float(np.sum(log_z - pos_logits))

    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(queries.shape[0]), positives] -= 1.0
    grad = probs @ items / cfg.temperature
    return LossTerm(value, positives, grad)


def triplet_loss(
    queries: np.ndarray,
    items: np.ndarray,
    positive_pool,
    margin: float = 1.0,
) -> LossTerm:
    """Hinge between the euclidean distances to the positive and the runner-up.

    The negative is the cosine-nearest item once the positive is excluded,
    which is the second-nearest item whenever the positive is the global
    nearest. Gradients use the subgradient that is zero at an inactive hinge.
    """
    queries = np.asarray(queries, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    pool = _check_inputs(queries, items, positive_pool)
    if items.shape[0] < 2:
        raise PoolError("triplet loss needs at least two items")
    positives = _select_positives(queries, items, pool)

    sims = cosine_matrix(queries, items)
    sims[np.arange(queries.shape[0]), positives] = -np.inf
    negatives = np.argmax(sims, axis=1)

    diff_pos = queries - items[positives]
    diff_neg = queries - items[negatives]
    d_pos = np.linalg.norm(diff_pos, axis=1)
    d_neg = np.linalg.norm(diff_neg, axis=1)
    terms = d_pos - d_neg + margin
    active = terms > 0.0

    value = float(np.sum(np.maximum(terms, 0.0)))
    grad = np.zeros_like(queries)
    pos_ok = active & (d_pos > _DIST_FLOOR)
    neg_ok = active & (d_neg > _DIST_FLOOR)
    grad[pos_ok] += diff_pos[pos_ok] / d_pos[pos_ok, None]
    grad[neg_ok] -= diff_neg[neg_ok] / d_neg[neg_ok, None]
    return LossTerm(value, positives, grad)


@dataclass
class FdReport:
    """Outcome of a central-difference gradient check."""

    passed: bool
    max_rel_error: float
    worst_index: tuple[int, ...]


def fd_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    step: float = 1e-6,
    tolerance: float = 1e-5,
) -> FdReport:
    """Compare an analytic gradient against central finite differences.

    ``loss_fn`` maps an array to (value, gradient-at-that-array). Relative
    errors use per-coordinate denominators floored at 1e-8, so exactly-zero
    gradients compare exactly.
    """
    point = np.asarray(point, dtype=np.float64)
    _, analytic = loss_fn(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != point shape {point.shape}")

    max_rel = 0.0
    worst: tuple[int, ...] = ()
    it = np.nditer(point, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = point.copy()
        bumped[idx] = point[idx] + step
        f_plus, _ = loss_fn(bumped)
        bumped[idx] = point[idx] - step
        f_minus, _ = loss_fn(bumped)
        fd = (f_plus - f_minus) / (2.0 * step)
        denom = max(abs(fd), abs(analytic[idx]), 1e-8)
        rel = abs(fd - analytic[idx]) / denom
        if rel > max_rel:
            max_rel = rel
            worst = idx
        it.iternext()
    return FdReport(max_rel <= tolerance, float(max_rel), worst)
