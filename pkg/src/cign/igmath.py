"""Differentiable information-gain objectives for router training.

All quantities use natural logarithms. Inputs may be numpy arrays or torch
tensors; results are torch tensors so the objectives stay differentiable
with respect to router logits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

# Entropy terms clamp probabilities below this before the log.
LOG_FLOOR = 1e-30
PROB_TOL = 1e-6


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class StarvedNodeError(RuntimeError):
    """A split node received no samples, so its joint is undefined."""


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype if dtype is not None else torch.float64)


def tempered_softmax(logits, tau: float) -> torch.Tensor:
    """Row-wise softmax of ``logits / tau``.

    Large ``tau`` flattens the rows toward uniform; small ``tau`` sharpens
    them toward the argmax indicator.
    """
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    z = _as_tensor(logits)
    if not torch.isfinite(z).all():
        raise DomainError("logits must be finite")
    squeeze = z.dim() == 1
    if squeeze:
        z = z.unsqueeze(0)
    z = z / tau
    z = z - z.max(dim=1, keepdim=True).values.detach()
    e = torch.exp(z)
    p = e / e.sum(dim=1, keepdim=True)
    return p[0] if squeeze else p


def _plogp(p: torch.Tensor) -> torch.Tensor:
    return p * torch.log(torch.clamp(p, min=LOG_FLOOR))


def entropy(p, validate: bool = True) -> torch.Tensor:
    """Shannon entropy in nats of a distribution given as a tensor of any shape."""
    p = _as_tensor(p)
    if validate:
        if (p < -PROB_TOL).any():
            raise DomainError("distribution has negative entries")
        total = float(p.detach().sum())
        if abs(total - 1.0) > PROB_TOL:
            raise DomainError(f"distribution sums to {total}, not 1")
    return -_plogp(p).sum()


@dataclass
class JointEstimate:
    """Minibatch estimate of p(y, n) at one split node (C x K)."""

    joint: torch.Tensor
    count: int

    def __post_init__(self) -> None:
        if self.joint.dim() != 2:
            raise DomainError("joint must be a C x K matrix")
        if (self.joint.detach() < -PROB_TOL).any():
            raise DomainError("joint has negative entries")
        total = float(self.joint.detach().sum())
        if abs(total - 1.0) > PROB_TOL:
            raise DomainError(f"joint sums to {total}, not 1")

    @property
    def p_y(self) -> torch.Tensor:
        return self.joint.sum(dim=1)

    @property
    def p_n(self) -> torch.Tensor:
        return self.joint.sum(dim=0)

    @classmethod
    def from_matrix(cls, matrix, count: int = 0) -> "JointEstimate":
        return cls(_as_tensor(matrix), count)


def estimate_joint(labels, branch_probs, class_count: int) -> JointEstimate:
    """p(c, k) = mean over the node's samples of [label == c] * p(n = k | x)."""
    probs = _as_tensor(branch_probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = labels.shape[0]
    if n == 0:
        raise StarvedNodeError("no samples reached this node")
    if probs.dim() != 2 or probs.shape[0] != n:
        raise DomainError(f"expected {n} probability rows, got shape {tuple(probs.shape)}")
    if labels.min() < 0 or labels.max() >= class_count:
        raise DomainError(f"labels must lie in [0, {class_count})")
    onehot = torch.nn.functional.one_hot(labels, class_count).to(probs.dtype)
    return JointEstimate(onehot.t() @ probs / n, n)


def information_gain(j: JointEstimate) -> torch.Tensor:
    """H[p(y)] - sum_k p(n=k) H[p(y | n=k)], computed in its decomposed form."""
    return (
        entropy(j.p_y, validate=False)
        + entropy(j.p_n, validate=False)
        - entropy(j.joint, validate=False)
    )


def conditional_information_gain(j: JointEstimate) -> torch.Tensor:
    """Information gain as label entropy minus expected post-split label entropy."""
    p_n = j.p_n
    expected = 0.0
    for k in range(j.joint.shape[1]):
        if float(p_n[k]) > 0:
            expected = expected + p_n[k] * entropy(j.joint[:, k] / p_n[k], validate=False)
    return entropy(j.p_y, validate=False) - expected


def kl_divergence(p, q) -> torch.Tensor:
    p, q = _as_tensor(p), _as_tensor(q)
    mask = p > 0
    return (p[mask] * (torch.log(p[mask]) - torch.log(q[mask]))).sum()


def balanced_information_gain(j: JointEstimate, lambda_balance: float) -> torch.Tensor:
    """H[p(y)] + lambda_balance * H[p(n)] - H[p(y, n)].

    Values of ``lambda_balance`` above one reward an even spread of samples
    across the children.
    """
    if lambda_balance < 1:
        warnings.warn(
            f"lambda_balance={lambda_balance} < 1 penalizes balanced splits", stacklevel=2
        )
    return (
        entropy(j.p_y, validate=False)
        + lambda_balance * entropy(j.p_n, validate=False)
        - entropy(j.joint, validate=False)
    )


def ig_loss(j: JointEstimate, lambda_ig: float, lambda_balance: float) -> torch.Tensor:
    """Negative weighted balanced information gain; gradients reach the router logits."""
    if lambda_ig == 0:
        return j.joint.sum() * 0.0
    return -lambda_ig * balanced_information_gain(j, lambda_balance)
