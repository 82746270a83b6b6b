"""One-class softmax loss, the cosine OC score, and a stable cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class OCSoftmaxParams:
    """Fixed hyperparameters of the one-class loss (the center is learned)."""

    alpha: float = 20.0
    m0: float = 0.9  # real margin
    m1: float = 0.2  # fake margin

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.m1 < self.m0:
            raise ValueError("fake margin m1 must be below real margin m0")


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError(f"zero-norm {what}; degenerate initialization")
    return x / norm


def oc_score(emb: torch.Tensor, center: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of each embedding row to the center, in [-1, 1]."""
    s = _unit(emb, "embedding") @ _unit(center, "center")
    return s.clamp(-1.0, 1.0)


def log1p_exp(z: torch.Tensor) -> torch.Tensor:
    return z.clamp(min=0) + torch.log1p(torch.exp(-z.abs()))


def oc_softmax_loss(emb, labels, center, params: OCSoftmaxParams = OCSoftmaxParams()):
    """Batch mean of log(1 + exp(alpha * (m_y - s) * (-1)^y))."""
    s = oc_score(emb, center)
    labels = torch.as_tensor(labels, device=s.device)
    fake = labels.to(torch.bool)
    margin = torch.where(fake, torch.full_like(s, params.m1), torch.full_like(s, params.m0))
    sign = torch.where(fake, -torch.ones_like(s), torch.ones_like(s))
    return log1p_exp(params.alpha * (margin - s) * sign).mean()


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-softmax probability of the true class."""
    if not bool(torch.isfinite(logits).all()):
        raise ValueError("non-finite logits")
    labels = torch.as_tensor(labels, device=logits.device, dtype=torch.long)
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -log_prob.gather(1, labels[:, None]).mean()


class OCSoftmax(nn.Module):
    """Learnable one-class center plus its loss hyperparameters."""

    def __init__(self, dim: int, params: OCSoftmaxParams = OCSoftmaxParams(),
                 generator: torch.Generator | None = None):
        super().__init__()
        w = torch.randn(dim, generator=generator)
        self.center = nn.Parameter(w / w.norm())
        self.params = params

    def score(self, emb):
        return oc_score(emb, self.center)

    def forward(self, emb, labels):
        return oc_softmax_loss(emb, labels, self.center, self.params)
