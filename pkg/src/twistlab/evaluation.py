"""Scoring an unsupervised classifier against held-out labels.

Labels enter the library only here. Predicted classes are matched to true
classes with an optimal one-to-one assignment before accuracy is computed;
NMI, AMI and ARI are permutation invariant and need no matching.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .numerics import batch_std_profile, check_prob_matrix, entropy, row_entropy


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # K_pred x K_true, int64

    @property
    def row_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class AssignmentMap:
    mapping: dict  # predicted class -> true class
    matched_count: int


@dataclass(frozen=True)
class MetricsReport:
    nmi: float
    ami: float
    ari: float
    acc: float
    effective_class_count: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _labels(x, name) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim != 1:
        raise InvalidInputError(f"{name} must be a 1-D label vector")
    if a.size and not np.issubdtype(a.dtype, np.integer):
        if not np.all(a == np.round(a)):
            raise InvalidInputError(f"{name} must contain integers")
    a = a.astype(np.int64)
    if a.size and a.min() < 0:
        raise InvalidInputError(f"{name} must be non-negative")
    return a


def _pair(pred, true, min_len=1):
    pred = _labels(pred, "pred")
    true = _labels(true, "true")
    if pred.shape != true.shape:
        raise InvalidInputError(f"length mismatch: {pred.size} vs {true.size}")
    if pred.size < min_len:
        raise InvalidInputError(f"need at least {min_len} labels")
    return pred, true


def build_contingency(pred, true) -> ContingencyTable:
    pred, true = _pair(pred, true)
    counts = np.zeros((pred.max() + 1, true.max() + 1), dtype=np.int64)
    np.add.at(counts, (pred, true), 1)
    return ContingencyTable(counts)


# ----------------------------------------------------------------- matching


def _min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Optimal assignment for a square cost matrix.

    Shortest augmenting paths with row/column potentials, O(n^3). Returns
    ``col_of_row``.
    """
    n = cost.shape[0]
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)  # 1-based; 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[row_of_col[1:] - 1] = np.arange(n)
    return col_of_row


def hungarian_match(table: ContingencyTable) -> AssignmentMap:
    """Maximum-weight one-to-one mapping of predicted to true classes.

    Non-square tables are zero-padded; a predicted class paired with a
    padding column is left unmapped.
    """
    counts = np.asarray(table.counts)
    if counts.size == 0:
        raise InvalidInputError("empty contingency table")
    kp, kt = counts.shape
    n = max(kp, kt)
    padded = np.zeros((n, n), dtype=np.float64)
    padded[:kp, :kt] = counts
    cols = _min_cost_assignment(-padded)
    mapping = {int(i): int(cols[i]) for i in range(kp) if cols[i] < kt}
    matched = int(sum(counts[i, j] for i, j in mapping.items()))
    return AssignmentMap(mapping, matched)


def unsup_accuracy(pred, true) -> float:
    pred, true = _pair(pred, true)
    return hungarian_match(build_contingency(pred, true)).matched_count / pred.size


def accuracy_under_mapping(pred, true, mapping: dict) -> float:
    pred, true = _pair(pred, true)
    mapped = np.array([mapping.get(int(p), -1) for p in pred])
    return float(np.mean(mapped == true))


# ------------------------------------------------------------------ metrics


def _entropy_of_counts(counts: np.ndarray, n: int) -> float:
    c = counts[counts > 0].astype(np.float64)
    return float(-np.sum(c / n * np.log(c / n)))


def _mutual_info(counts: np.ndarray, n: int) -> float:
    a = counts.sum(axis=1, keepdims=True).astype(np.float64)
    b = counts.sum(axis=0, keepdims=True).astype(np.float64)
    nz = counts > 0
    c = counts.astype(np.float64)
    terms = np.where(nz, c / n * np.log(np.where(nz, c * n, 1.0) / (a * b)), 0.0)
    return max(float(terms.sum()), 0.0)


def expected_mutual_info(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """E[I] under the hypergeometric model of random partitions with fixed marginals."""
    lg = math.lgamma
    lg_n1 = lg(n + 1)
    total = 0.0
    for ai in a:
        ai = int(ai)
        for bj in b:
            bj = int(bj)
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if lo > hi:
                continue
            base = lg(ai + 1) + lg(bj + 1) + lg(n - ai + 1) + lg(n - bj + 1) - lg_n1
            for nij in range(lo, hi + 1):
                log_p = base - (lg(nij + 1) + lg(ai - nij + 1) + lg(bj - nij + 1)
                                + lg(n - ai - bj + nij + 1))
                total += nij / n * math.log(n * nij / (ai * bj)) * math.exp(log_p)
    return total


def _comb2(x) -> int:
    x = int(x)
    return x * (x - 1) // 2


def clustering_metrics(pred, true) -> MetricsReport:
    """NMI (arithmetic normalization), AMI (hypergeometric expectation), ARI and ACC.

    When both partitions are a single cluster every score is 1.
    """
    pred, true = _pair(pred, true, min_len=2)
    n = pred.size
    # Drop empty rows/columns so label gaps do not matter.
    counts = build_contingency(pred, true).counts
    counts = counts[counts.sum(axis=1) > 0][:, counts.sum(axis=0) > 0]
    a = counts.sum(axis=1)
    b = counts.sum(axis=0)
    h_pred = _entropy_of_counts(a, n)
    h_true = _entropy_of_counts(b, n)
    acc = unsup_accuracy(pred, true)
    eff = math.exp(h_pred)

    if len(a) == 1 and len(b) == 1:
        return MetricsReport(1.0, 1.0, 1.0, acc, eff)

    mi = _mutual_info(counts, n)
    mean_h = 0.5 * (h_pred + h_true)
    nmi = mi / mean_h if mean_h > 0 else 1.0
    nmi = min(max(nmi, 0.0), 1.0)

    emi = expected_mutual_info(a, b, n)
    denom = mean_h - emi
    if abs(denom) < 1e-15:
        ami = 1.0
    else:
        ami = (mi - emi) / denom

    sum_comb = sum(_comb2(x) for x in counts.ravel())
    sum_a = sum(_comb2(x) for x in a)
    sum_b = sum(_comb2(x) for x in b)
    pairs = _comb2(n)
    expected = sum_a * sum_b / pairs
    max_index = (sum_a + sum_b) / 2
    ari = 1.0 if max_index == expected else (sum_comb - expected) / (max_index - expected)
    return MetricsReport(float(nmi), float(ami), float(ari), float(acc), float(eff))


# ------------------------------------------------------------ linear probe


def linear_probe(features, labels, train_idx, test_idx, epochs: int = 500,
                 lr: float = 0.5, weight_decay: float = 0.0) -> float:
    """Test accuracy of softmax regression fit on frozen features.

    Features are standardized with training-split statistics; the model is
    trained by full-batch gradient descent from zero initialization.
    """
    x = np.asarray(features, dtype=np.float64)
    y = _labels(labels, "labels")
    train_idx = np.asarray(train_idx, dtype=np.int64)
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if np.intersect1d(train_idx, test_idx).size:
        raise InvalidInputError("train and test splits overlap")
    if len(np.unique(y[train_idx])) < 2:
        raise InvalidInputError("training labels contain a single class")
    k = int(y.max()) + 1
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mu) / sd
    xt, yt = xs[train_idx], y[train_idx]
    w = np.zeros((x.shape[1], k))
    bias = np.zeros(k)
    onehot = np.eye(k)[yt]
    n = len(yt)
    for _ in range(epochs):
        z = xt @ w + bias
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (xt.T @ g + weight_decay * w)
        bias -= lr * g.sum(axis=0)
    pred = np.argmax(xs[test_idx] @ w + bias, axis=1)
    return float(np.mean(pred == y[test_idx]))


# -------------------------------------------------------------- diagnostics


def collapse_report(probs, pre_softmax) -> dict:
    """Entropy and spread diagnostics of one evaluation pass."""
    p = check_prob_matrix(probs)
    mean_p = p.mean(axis=0)
    mean_p = mean_p / mean_p.sum()
    h_mean = entropy(mean_p)
    col_std, row_std = batch_std_profile(pre_softmax)
    return {
        "mean_row_entropy": float(row_entropy(p).mean()),
        "entropy_of_mean": h_mean,
        "effective_class_count": math.exp(h_mean),
        "col_std_mean": float(col_std.mean()),
        "row_std_mean": float(row_std.mean()),
        "col_std": col_std.tolist(),
        "row_std": row_std.tolist(),
    }


# ---------------------------------------------------------------------- I/O


def read_labels(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    try:
        return np.array([int(ln) for ln in lines if ln], dtype=np.int64)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from None


def write_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))
