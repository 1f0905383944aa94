"""TWIST objective, mutual-information estimate and a DINO-style baseline.

The symmetric loss for two views with class probabilities ``p1`` and ``p2``
(B rows, C classes) is

    consistency = 1/(2B) * sum_i [KL(p1_i || p2_i) + KL(p2_i || p1_i)]
    sharpness   = 1/2 * sum_k mean_i H(pk_i)
    diversity   = 1/2 * sum_k H(mean_i pk_i)
    total       = consistency + alpha * sharpness - beta * diversity

With alpha = beta = 1 the entropy part equals minus the average batch
estimate of I(X; Y) over both views, so the total is the symmetric KL minus
that estimate.

Gradients are taken with respect to the logits fed to the softmax. They are
written in closed form using the softmax Jacobian ``dz = p * (dp - <p, dp>)``,
which keeps them finite even when a probability underflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import (
    as_matrix,
    check_prob_matrix,
    entropy,
    log_softmax,
    mean_distribution,
    row_entropy,
    row_kl,
    safe_log,
)


@dataclass(frozen=True)
class TwistCoefficients:
    alpha: float = 1.0
    beta: float = 1.0
    class_count: int = 4

    def __post_init__(self):
        if not (self.alpha >= 0.0 and self.beta >= 0.0):
            raise InvalidInputError("alpha and beta must be non-negative")
        if self.class_count < 2:
            raise InvalidInputError("class_count must be at least 2")


@dataclass(frozen=True)
class LossBreakdown:
    consistency: float
    sharpness: float
    diversity: float
    total: float

    @classmethod
    def combine(cls, consistency, sharpness, diversity, coeffs: TwistCoefficients):
        total = consistency + coeffs.alpha * sharpness - coeffs.beta * diversity
        return cls(float(consistency), float(sharpness), float(diversity), float(total))

    @classmethod
    def mean(cls, items) -> "LossBreakdown":
        items = list(items)
        if not items:
            raise InvalidInputError("cannot average an empty list of losses")
        n = len(items)
        return cls(
            sum(b.consistency for b in items) / n,
            sum(b.sharpness for b in items) / n,
            sum(b.diversity for b in items) / n,
            sum(b.total for b in items) / n,
        )

    def as_dict(self) -> dict:
        return {
            "consistency": self.consistency,
            "sharpness": self.sharpness,
            "diversity": self.diversity,
            "total": self.total,
        }


def _pair(p1, p2):
    p1 = check_prob_matrix(p1, "p1")
    p2 = check_prob_matrix(p2, "p2")
    if p1.shape != p2.shape:
        raise InvalidInputError(f"shape mismatch: {p1.shape} vs {p2.shape}")
    if p1.shape[0] < 1:
        raise InvalidInputError("empty batch")
    return p1, p2


def twist_loss_symmetric(p1, p2, coeffs: TwistCoefficients) -> LossBreakdown:
    p1, p2 = _pair(p1, p2)
    consistency = 0.5 * (row_kl(p2, p1).mean() + row_kl(p1, p2).mean())
    sharpness = 0.5 * (row_entropy(p1).mean() + row_entropy(p2).mean())
    diversity = 0.5 * (entropy(mean_distribution(p1)) + entropy(mean_distribution(p2)))
    return LossBreakdown.combine(consistency, sharpness, diversity, coeffs)


def twist_loss_asymmetric(p_teacher, p_student, coeffs: TwistCoefficients) -> LossBreakdown:
    """Momentum-encoder form: KL(teacher || student) plus entropy terms on the student."""
    pt, ps = _pair(p_teacher, p_student)
    consistency = row_kl(pt, ps).mean()
    sharpness = row_entropy(ps).mean()
    diversity = entropy(mean_distribution(ps))
    return LossBreakdown.combine(consistency, sharpness, diversity, coeffs)


def mutual_information_estimate(p) -> float:
    """Batch estimate H(mean_i p_i) - mean_i H(p_i); never negative."""
    p = check_prob_matrix(p)
    value = entropy(mean_distribution(p)) - row_entropy(p).mean()
    return max(float(value), 0.0)


def dino_baseline_loss(p_teacher, p_student) -> float:
    """Mean cross-entropy of the student against a fixed teacher."""
    pt, ps = _pair(p_teacher, p_student)
    return float((row_kl(pt, ps) + row_entropy(pt)).mean())


# ---------------------------------------------------------------- gradients


def _softmax_parts(logits):
    logp = log_softmax(logits)
    return np.exp(logp), logp


def _entropy_grad(p, logp):
    """d/dz of H(softmax(z)) for each row."""
    h = -(p * logp).sum(axis=1, keepdims=True)
    return -p * (logp + h)


def _diversity_grad(p):
    """Minus B times d/dz of H(mean_i softmax(z_i))."""
    logm = safe_log(p.mean(axis=0))[None, :]
    return p * (logm - (p * logm).sum(axis=1, keepdims=True))


def _kl_grad_wrt_first(p, logp, logq):
    """d/dz_p of KL(p || q)."""
    f = logp - logq
    return p * (f - (p * f).sum(axis=1, keepdims=True))


def symmetric_grads_from_logits(z1, z2, coeffs: TwistCoefficients):
    """Loss breakdown and gradients of the symmetric loss w.r.t. both logit matrices."""
    p1, logp1 = _softmax_parts(z1)
    p2, logp2 = _softmax_parts(z2)
    b = z1.shape[0]
    breakdown = twist_loss_symmetric(p1, p2, coeffs)

    def view_grad(p, logp, p_other, logp_other):
        consistency = _kl_grad_wrt_first(p, logp, logp_other) + (p - p_other)
        g = consistency / (2 * b)
        if coeffs.alpha:
            g += coeffs.alpha / (2 * b) * _entropy_grad(p, logp)
        if coeffs.beta:
            g += coeffs.beta / (2 * b) * _diversity_grad(p)
        return g

    g1 = view_grad(p1, logp1, p2, logp2)
    g2 = view_grad(p2, logp2, p1, logp1)
    return breakdown, g1, g2


def asymmetric_grad_from_logits(z_teacher, z_student, coeffs: TwistCoefficients):
    """Breakdown and gradient w.r.t. the student logits; the teacher is constant."""
    pt, _ = _softmax_parts(z_teacher)
    ps, logps = _softmax_parts(z_student)
    b = z_student.shape[0]
    breakdown = twist_loss_asymmetric(pt, ps, coeffs)
    g = (ps - pt) / b
    if coeffs.alpha:
        g += coeffs.alpha / b * _entropy_grad(ps, logps)
    if coeffs.beta:
        g += coeffs.beta / b * _diversity_grad(ps)
    return breakdown, g


def twist_loss_grad(logits1, logits2, coeffs: TwistCoefficients):
    """Exact gradient of the symmetric loss composed with softmax.

    Returns ``(dL/dlogits1, dL/dlogits2)``.
    """
    z1 = as_matrix(logits1, "logits1")
    z2 = as_matrix(logits2, "logits2")
    if z1.shape != z2.shape:
        raise InvalidInputError(f"shape mismatch: {z1.shape} vs {z2.shape}")
    _, g1, g2 = symmetric_grads_from_logits(z1, z2, coeffs)
    return g1, g2


def cross_entropy_grad_from_logits(logits, labels, weight: float = 1.0):
    """Mean cross-entropy against hard labels, and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    return float(weight * loss), g * (weight / n)
