"""Single-center loss with hand-derived gradients, plus baseline metric losses.

Label convention everywhere: 0 = natural (real), 1 = manipulated (fake).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


class LossInputError(ValueError):
    pass


@dataclass
class SclConfig:
    m: float = 0.3
    lam: float = 0.5
    eps_dist: float = 1e-12

    def __post_init__(self):
        if self.m < 0 or self.lam < 0:
            raise LossInputError(f"m and lambda must be >= 0 (m={self.m}, lambda={self.lam})")


@dataclass(frozen=True)
class SclForwardResult:
    loss: float
    m_nat: float
    m_man: float
    hinge_arg: float
    s: int
    t: int
    active: bool


def _as_inputs(embeddings, labels, center):
    f = torch.as_tensor(embeddings)
    c = torch.as_tensor(center, dtype=f.dtype)
    y = torch.as_tensor(labels).reshape(-1)
    if f.ndim != 2:
        raise LossInputError(f"embeddings must be BxD, got shape {tuple(f.shape)}")
    if f.shape[0] < 1:
        raise LossInputError("empty batch")
    if c.shape != (f.shape[1],):
        raise LossInputError(f"center has shape {tuple(c.shape)}, embeddings have D={f.shape[1]}")
    if y.shape[0] != f.shape[0]:
        raise LossInputError(f"{y.shape[0]} labels for {f.shape[0]} embeddings")
    if not bool(((y == 0) | (y == 1)).all()):
        raise LossInputError("labels must be 0 (natural) or 1 (manipulated)")
    if not (torch.isfinite(f).all() and torch.isfinite(c).all()):
        raise LossInputError("non-finite embeddings or center")
    return f, y.to(torch.bool), c


def scl_forward(embeddings, labels, center, cfg: SclConfig | None = None) -> SclForwardResult:
    """Evaluate the single-center loss and its intermediates.

    Batches holding only one class are inactive and score 0.
    """
    cfg = cfg or SclConfig()
    f, man, c = _as_inputs(embeddings, labels, center)
    with torch.no_grad():
        dist = torch.linalg.vector_norm(f - c, dim=1)
        s, t = int((~man).sum()), int(man.sum())
        margin = cfg.m * math.sqrt(f.shape[1])
        if s == 0 or t == 0:
            m_nat = float(dist[~man].mean()) if s else 0.0
            m_man = float(dist[man].mean()) if t else 0.0
            return SclForwardResult(0.0, m_nat, m_man, m_nat - m_man + margin, s, t, False)
        m_nat = dist[~man].mean()
        m_man = dist[man].mean()
        hinge_arg = m_nat - m_man + margin
        loss = m_nat + torch.clamp(hinge_arg, min=0.0)
    return SclForwardResult(float(loss), float(m_nat), float(m_man), float(hinge_arg), s, t, True)


def scl_backward(embeddings, labels, center, cfg: SclConfig | None, fwd: SclForwardResult):
    """Analytic gradients of the single-center loss.

    Returns ``(grad_embeddings, grad_center)``. The hinge indicator is taken
    from ``fwd.hinge_arg > 0`` so the kink itself gets the zero subgradient.
    """
    cfg = cfg or SclConfig()
    f, man, c = _as_inputs(embeddings, labels, center)
    s, t = int((~man).sum()), int(man.sum())
    if (s, t) != (fwd.s, fwd.t):
        raise LossInputError("forward result was computed on a different batch")
    grad_f = torch.zeros_like(f)
    if not fwd.active:
        return grad_f, torch.zeros_like(c)
    with torch.no_grad():
        diff = f - c
        dist = torch.linalg.vector_norm(diff, dim=1, keepdim=True).clamp_min(cfg.eps_dist)
        unit = diff / dist
        on = 1.0 if fwd.hinge_arg > 0 else 0.0
        grad_f[~man] = unit[~man] * ((1.0 + on) / s)
        grad_f[man] = unit[man] * (-on / t)
        grad_c = -unit[~man].sum(0) * ((1.0 + on) / s) + unit[man].sum(0) * (on / t)
    return grad_f, grad_c


class _SclFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, embeddings, center, labels, cfg, fwd):
        ctx.save_for_backward(embeddings, center, labels)
        ctx.cfg, ctx.fwd = cfg, fwd
        return embeddings.new_tensor(fwd.loss)

    @staticmethod
    def backward(ctx, grad_out):
        embeddings, center, labels = ctx.saved_tensors
        gf, gc = scl_backward(embeddings, labels, center, ctx.cfg, ctx.fwd)
        return gf * grad_out, gc * grad_out, None, None, None


def scl_loss(embeddings: torch.Tensor, labels: torch.Tensor, center: torch.Tensor,
             cfg: SclConfig | None = None) -> tuple[torch.Tensor, SclForwardResult]:
    """Differentiable single-center loss whose backward pass is the analytic one.

    Returns the loss tensor together with the forward intermediates.
    """
    cfg = cfg or SclConfig()
    labels = torch.as_tensor(labels)
    fwd = scl_forward(embeddings.detach(), labels, center.detach(), cfg)
    return _SclFunction.apply(embeddings, center, labels, cfg, fwd), fwd


class SingleCenterLoss(nn.Module):
    """Owns the learnable center of natural-face embeddings."""

    def __init__(self, dim: int, cfg: SclConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg or SclConfig()
        self.center = nn.Parameter(torch.randn(dim, generator=generator) / math.sqrt(dim))
        self.inactive_batches = 0
        self.last: SclForwardResult | None = None

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        center = self.center.to(embeddings.dtype)
        loss, self.last = scl_loss(embeddings, labels, center, self.cfg)
        if not self.last.active:
            self.inactive_batches += 1
            log.warning("single-class batch: SCL inactive (count=%d)", self.inactive_batches)
        return loss


@dataclass
class TotalLoss:
    total: torch.Tensor
    ce: torch.Tensor
    scl: SclForwardResult


def total_loss(logits: torch.Tensor, embeddings: torch.Tensor, labels: torch.Tensor,
               center: torch.Tensor, cfg: SclConfig | None = None) -> TotalLoss:
    """Cross-entropy plus ``lam`` times the single-center loss."""
    cfg = cfg or SclConfig()
    labels = torch.as_tensor(labels)
    ce = F.cross_entropy(logits, labels.long())
    scl, fwd = scl_loss(embeddings, labels, center, cfg)
    return TotalLoss(ce + cfg.lam * scl, ce, fwd)


# -- baselines ---------------------------------------------------------------


class CenterLoss(nn.Module):
    """Mean squared distance of each embedding to its own class center."""

    def __init__(self, dim: int, num_classes: int = 2, weight: float = 0.01,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.weight = weight
        self.centers = nn.Parameter(torch.randn(num_classes, dim, generator=generator) / math.sqrt(dim))

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        c = self.centers.to(embeddings.dtype)[torch.as_tensor(labels).long()]
        return ((embeddings - c) ** 2).sum(dim=1).mean()


@dataclass
class TripletResult:
    loss: torch.Tensor
    num_triplets: int
    degenerate: bool


def triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> TripletResult:
    """Batch-all triplet hinge on Euclidean distances.

    Averages ``max(d(a,p) - d(a,n) + margin, 0)`` over every valid
    (anchor, positive, negative) triple in the batch. A batch with no valid
    triple returns a zero loss flagged as degenerate.
    """
    y = torch.as_tensor(labels).reshape(-1)
    sq = (embeddings.unsqueeze(1) - embeddings.unsqueeze(0)).pow(2).sum(-1)
    # sqrt has an infinite derivative at 0; the diagonal is masked out anyway
    eye = torch.eye(len(y), dtype=torch.bool, device=embeddings.device)
    dist = torch.sqrt(torch.where(eye, torch.ones_like(sq), sq).clamp_min(1e-24))
    same = (y.unsqueeze(0) == y.unsqueeze(1)) & ~eye
    diff = y.unsqueeze(0) != y.unsqueeze(1)
    valid = same.unsqueeze(2) & diff.unsqueeze(1)  # [a, p, n]
    n_valid = int(valid.sum())
    if n_valid == 0:
        return TripletResult(embeddings.sum() * 0.0, 0, True)
    hinge = F.relu(dist.unsqueeze(2) - dist.unsqueeze(1) + margin)
    return TripletResult(hinge[valid].sum() / n_valid, n_valid, False)


class TripletLoss(nn.Module):
    def __init__(self, margin: float = 0.3, weight: float = 0.01):
        super().__init__()
        self.margin = margin
        self.weight = weight
        self.degenerate_batches = 0

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        res = triplet_loss(embeddings, labels, self.margin)
        if res.degenerate:
            self.degenerate_batches += 1
        return res.loss
