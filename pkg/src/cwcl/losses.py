"""Loss kernels: cosine similarity, InfoNCE, channel-wise contrast, SupCon, stage objectives.

All contrastive kernels take the two views stacked along the contrast axis:
rows ``0..n-1`` are the first view and row ``i + n`` is the positive of row ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F


@dataclass
class ContrastConfig:
    tau_cwcl: float = 0.5
    tau_supcon: float = 0.1
    symmetrize: bool = False

    def __post_init__(self):
        if self.tau_cwcl <= 0 or self.tau_supcon <= 0:
            raise ValueError("temperatures must be strictly positive")


@dataclass
class StageLossParts:
    ce: object
    contrastive_per_layer: list = field(default_factory=list)
    lam: float = 0.6
    total: object = None

    def recombined(self):
        n = len(self.contrastive_per_layer)
        return (1 - self.lam) * self.ce + (self.lam / n) * sum(self.contrastive_per_layer)


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("cosine similarity of a zero vector is undefined")
    return x / norms


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if not a.is_floating_point():
        a = a.double()
    if not b.is_floating_point():
        b = b.double()
    return (_unit_rows(a) * _unit_rows(b)).sum(-1)


def _pairwise_terms(z: torch.Tensor, tau: float, symmetrize: bool) -> torch.Tensor:
    """Per-anchor -log softmax of the positive for (..., 2n, d) inputs; returns (..., n) or (..., 2n)."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if z.dim() < 2 or z.shape[-2] < 2 or z.shape[-2] % 2:
        raise ValueError(f"expected (..., 2n, d) with n >= 1, got {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise ValueError("non-finite values in contrastive input")
    n2 = z.shape[-2]
    n = n2 // 2
    u = _unit_rows(z)
    logits = u @ u.transpose(-1, -2) / tau
    eye = torch.eye(n2, dtype=torch.bool, device=z.device)
    # denominator runs over k != i and keeps the positive
    log_denom = torch.logsumexp(logits.masked_fill(eye, float("-inf")), dim=-1)
    pos = (torch.arange(n2, device=z.device) + n) % n2
    pos_logit = logits[..., torch.arange(n2, device=z.device), pos]
    terms = log_denom - pos_logit
    return terms if symmetrize else terms[..., :n]


def iwcl_loss(z: torch.Tensor, tau: float = 0.5, symmetrize: bool = False) -> torch.Tensor:
    """InfoNCE summed over anchors; ``z`` is (2N, d) with z[i], z[i+N] two views of instance i.

    With ``symmetrize`` both views act as anchors and the sum is halved.
    """
    if z.dim() != 2:
        raise ValueError(f"iwcl_loss expects (2N, d), got {tuple(z.shape)}")
    terms = _pairwise_terms(z, tau, symmetrize)
    return terms.sum() / 2 if symmetrize else terms.sum()


def cwcl_loss(c: torch.Tensor, tau: float = 0.5, symmetrize: bool = False,
              reduction: str = "sum") -> torch.Tensor:
    """Channel-wise contrastive loss.

    ``c`` is (2M, d) for one sample, channel i of view a in row i and of view b
    in row i+M, or (B, 2M, d) for a batch.  Channels only contrast with channels
    of the same sample; a batch returns the mean of the per-sample values.
    ``reduction="mean"`` divides each sample's anchor sum by M.
    """
    terms = _pairwise_terms(c, tau, symmetrize)
    if reduction == "sum":
        per_sample = terms.sum(-1) / (2 if symmetrize else 1)
    elif reduction == "mean":
        per_sample = terms.mean(-1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return per_sample if per_sample.dim() == 0 else per_sample.mean()


def cwcl_from_banks(bank_a: torch.Tensor, bank_b: torch.Tensor, tau: float = 0.5,
                    symmetrize: bool = False, reduction: str = "sum") -> torch.Tensor:
    """(B, M, d) channel banks of the two views -> batch-mean channel-wise loss."""
    return cwcl_loss(torch.cat([bank_a, bank_b], dim=-2), tau, symmetrize, reduction)


def supcon_loss(features: torch.Tensor, labels: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Supervised contrastive loss over a two-view batch.

    ``features`` is (2B, d) laid out as [view a; view b] and ``labels`` is (B,)
    or (2B,).  For every anchor, -log softmax is averaged over all other rows
    with the same label, then averaged over anchors.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if features.dim() != 2:
        raise ValueError(f"supcon_loss expects (2B, d), got {tuple(features.shape)}")
    if not torch.isfinite(features).all():
        raise ValueError("non-finite values in contrastive input")
    n = features.shape[0]
    labels = torch.as_tensor(labels, device=features.device).reshape(-1)
    if labels.numel() * 2 == n:
        labels = labels.repeat(2)
    if labels.numel() != n:
        raise ValueError(f"{labels.numel()} labels for {n} feature rows")
    u = _unit_rows(features)
    logits = u @ u.T / tau
    eye = torch.eye(n, dtype=torch.bool, device=features.device)
    log_prob = logits - torch.logsumexp(logits.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1)
    if (n_pos == 0).any():
        raise ValueError(f"anchor {int((n_pos == 0).nonzero()[0])} has no positive")
    mean_log_prob_pos = (log_prob * pos).sum(1) / n_pos
    return -mean_log_prob_pos.mean()


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, device=logits.device)
    k = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside [0, {k})")
    return F.cross_entropy(logits, labels)


def _stage_total(ce, per_layer: Sequence, lam: float) -> StageLossParts:
    if len(per_layer) == 0:
        raise ValueError("need at least one layer term")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    parts = StageLossParts(ce, list(per_layer), lam)
    parts.total = parts.recombined()
    return parts


def stage1_total(ce, cwcl_per_layer: Sequence, lam: float = 0.6) -> StageLossParts:
    """(1 - lam) * CE + lam / L * sum of the L channel-wise terms."""
    return _stage_total(ce, cwcl_per_layer, lam)


def stage2_total(ce, supcon_per_layer: Sequence, lam: float = 0.6) -> StageLossParts:
    return _stage_total(ce, supcon_per_layer, lam)
