"""Dense float64 kernels shared by every module.

Matrices throughout the package are plain 2-D ``numpy`` arrays of float64,
row-major. All functions here are pure except :func:`adam_step`, which
mutates its explicit state argument; nothing touches global state, and all
randomness flows through generators owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

# Guard added to cosine and normalization denominators. Zero-feature queries
# then score 0 against every key instead of dividing by zero.
EPS_DIV = 1e-12

ADAM_EPS = 1e-8


def _as_matrix(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    return m


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two equal-length vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape or a.size == 0:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b)) + EPS_DIV
    return float(np.clip(float(a @ b) / denom, -1.0, 1.0))


def cosine_matrix(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarities, (P, C) x (N, C) -> (P, N)."""
    queries = _as_matrix(queries, "queries")
    keys = _as_matrix(keys, "keys")
    if queries.shape[1] != keys.shape[1]:
        raise ShapeError(f"channel mismatch: {queries.shape[1]} vs {keys.shape[1]}")
    denom = np.outer(np.linalg.norm(queries, axis=1), np.linalg.norm(keys, axis=1)) + EPS_DIV
    return np.clip(queries @ keys.T / denom, -1.0, 1.0)


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-paired cosine similarities of two equally shaped matrices, (P,)."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"row-paired cosine needs equal shapes, got {a.shape} and {b.shape}")
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + EPS_DIV
    return np.clip(np.einsum("ij,ij->i", a, b) / denom, -1.0, 1.0)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; each output row sums to 1."""
    m = _as_matrix(m, "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cols(m: np.ndarray) -> np.ndarray:
    """Column-wise softmax with max subtraction; each output column sums to 1."""
    m = _as_matrix(m, "softmax input")
    shifted = m - m.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit L2 norm; vectors with norm <= EPS_DIV pass through."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"l2_normalize needs a non-empty vector, got shape {v.shape}")
    n = float(np.linalg.norm(v))
    if n <= EPS_DIV:
        return v.copy()
    return v / n


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise unit normalization; zero rows pass through unchanged."""
    m = _as_matrix(m, "l2_normalize_rows input")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    safe = np.where(norms <= EPS_DIV, 1.0, norms)
    return m / safe


@dataclass
class AdamState:
    """Adam moment buffers for one parameter array.

    ``step_count`` increases by exactly one per :func:`adam_step`.
    """

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    beta1: float
    beta2: float
    eps: float
    learning_rate: float

    @classmethod
    def for_param(
        cls,
        shape: tuple[int, ...],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = ADAM_EPS,
    ) -> "AdamState":
        return cls(
            first_moment=np.zeros(shape, dtype=np.float64),
            second_moment=np.zeros(shape, dtype=np.float64),
            step_count=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            learning_rate=learning_rate,
        )


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter array.

    The moment buffers and step count in ``state`` are updated in place;
    ``param`` itself is left untouched.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise ShapeError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"moments {state.first_moment.shape}"
        )
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grad
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    return param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the same seed yields the same stream."""
    return np.random.default_rng(np.random.SeedSequence(seed))


def split_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent child stream for (seed, key).

    This is the package's one stream-splitting rule: a child generator is
    ``default_rng(SeedSequence(seed, spawn_key=key))``, so any (seed, key)
    pair names the same stream in every process.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
