"""Dense float64 kernels: softmax, entropies, KL divergence, batch statistics.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. A
probability matrix is a matrix whose rows are distributions over classes.
All logarithms are natural, so every entropy and divergence is in nats.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

# Floor applied inside logarithms only; stored probabilities are never clipped.
PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-9


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return m


def check_prob_matrix(p, name: str = "probabilities") -> np.ndarray:
    p = as_matrix(p, name)
    if p.size and (p.min() < 0.0 or np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL):
        raise InvalidInputError(f"{name} rows must be non-negative and sum to 1")
    return p


def safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def stable_softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction.

    Raises InvalidInputError for non-finite logits.
    """
    z = as_matrix(logits, "logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _plogp(p: np.ndarray) -> np.ndarray:
    # 0 log 0 = 0
    return np.where(p > 0.0, p * safe_log(p), 0.0)


def row_entropy(p) -> np.ndarray:
    """Shannon entropy of every row of a probability matrix."""
    p = check_prob_matrix(p)
    return -_plogp(p).sum(axis=1)


def mean_distribution(p) -> np.ndarray:
    p = check_prob_matrix(p)
    if p.shape[0] < 1:
        raise InvalidInputError("mean_distribution needs at least one row")
    return p.mean(axis=0)


def entropy(d) -> float:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or not np.all(np.isfinite(d)):
        raise InvalidInputError("distribution must be a finite 1-D vector")
    if d.min() < 0.0 or abs(d.sum() - 1.0) > ROW_SUM_TOL:
        raise InvalidInputError("distribution must be non-negative and sum to 1")
    return float(-_plogp(d).sum())


def row_kl(p, q) -> np.ndarray:
    """KL(p_i || q_i) for each row i; q is floored at PROB_FLOOR inside the log."""
    p = check_prob_matrix(p, "p")
    q = check_prob_matrix(q, "q")
    if p.shape != q.shape:
        raise InvalidInputError(f"shape mismatch: {p.shape} vs {q.shape}")
    terms = np.where(p > 0.0, p * (safe_log(p) - safe_log(q)), 0.0)
    # Tiny negative values can appear from rounding when p == q.
    return np.maximum(terms.sum(axis=1), 0.0)


def batch_std_profile(m) -> tuple[np.ndarray, np.ndarray]:
    """Population standard deviation of each column and of each row.

    Returns ``(col_stds, row_stds)``.
    """
    m = as_matrix(m)
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise InvalidInputError("batch_std_profile needs a non-empty matrix")
    return m.std(axis=0), m.std(axis=1)
