"""Training losses: node BCE, reconstruction (MSE + cosine), L1/Lp sparsity."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

BCE_EPS = 1e-7


@dataclass
class LossWeights:
    lam_rec: float = 1.0
    lam_sparse: float = 0.1
    lam_cos: float = 1.0
    lam_mse: float = 1.0


@dataclass
class LossBundle:
    """Per-batch loss components. SSL entries are None when that branch is off."""

    l_ce: torch.Tensor
    l_rec: torch.Tensor | None = None
    l_sparse: torch.Tensor | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    sparse_degenerate: bool = False
    aborted: bool = False

    def as_floats(self) -> dict:
        def f(v):
            return None if v is None else float(v.detach() if torch.is_tensor(v) else v)
        return {"l_ce": f(self.l_ce), "l_rec": f(self.l_rec), "l_sparse": f(self.l_sparse)}


def bce_loss(scores, labels, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy over all nodes with probabilities clamped to [eps, 1 - eps]."""
    scores = torch.as_tensor(scores)
    labels = torch.as_tensor(labels, dtype=scores.dtype)
    if torch.isnan(scores).any():
        raise ValueError("bce_loss received NaN scores")
    p = scores.clamp(eps, 1.0 - eps)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p)).mean()


def recon_loss(x_hat, x, weights: LossWeights | None = None, mask=None) -> torch.Tensor:
    """lam_mse * MSE + lam_cos * mean over nodes of (1 - cos(x_hat_i, x_i)).

    Each node's F x T block is one vector for the cosine term; nodes whose
    target block has zero norm are left out of the cosine mean. ``mask``
    (same shape as x, 1 = include) restricts both terms to selected entries.
    """
    w = weights or LossWeights()
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    if mask is not None:
        mask = mask.to(x.dtype)
        x_hat, x = x_hat * mask, x * mask
        denom = mask.sum().clamp_min(1.0)
        mse = ((x_hat - x) ** 2).sum() / denom
    else:
        mse = ((x_hat - x) ** 2).mean()
    a = x_hat.reshape(x_hat.shape[:-2] + (-1,))
    b = x.reshape(x.shape[:-2] + (-1,))
    dot = (a * b).sum(-1)
    na2 = (a * a).sum(-1)
    nb2 = (b * b).sum(-1)
    valid = nb2 > 0
    tiny = torch.finfo(x.dtype).tiny
    cos = dot / torch.sqrt((na2 * nb2).clamp_min(tiny))
    if valid.any():
        cos_term = (1.0 - cos[valid]).mean()
    else:
        cos_term = x.new_zeros(())
    return w.lam_mse * mse + w.lam_cos * cos_term


def sparse_bounds(n: int, p: int = 4):
    return n ** (1.0 / p - 1.0), 1.0


def sparse_loss(h, p: int = 4, return_flag: bool = False):
    """Normalized L1/Lp ratio ``n**(1/p - 1) * |h|_1 / |h|_p`` over the last three axes.

    The value lies in [n**(1/p - 1), 1]; one-hot inputs hit the lower bound
    and constant-magnitude inputs the upper one. Leading axes are averaged.
    An all-zero sample is assigned the lower bound and flagged degenerate.
    """
    if p < 2:
        raise ValueError(f"p must be >= 2, got {p}")
    flat = h.reshape(h.shape[:-3] + (-1,)) if h.dim() >= 3 else h.reshape(1, -1)
    n = flat.shape[-1]
    # the ratio is scale invariant; dividing by the peak keeps |h|**p from
    # overflowing and makes one-hot inputs land exactly on the lower bound
    peak = flat.detach().abs().amax(-1, keepdim=True)
    zero = peak[..., 0] == 0
    mag = flat.abs() / torch.where(peak == 0, torch.ones_like(peak), peak)
    l1 = mag.sum(-1)
    # p-th power sum, guarded so an all-zero row yields no NaN gradient
    lp = (mag ** p).sum(-1)
    lp = torch.where(zero, torch.ones_like(lp), lp) ** (1.0 / p)
    lower = n ** (1.0 / p - 1.0)
    ratio = torch.where(zero, torch.full_like(l1, lower), lower * l1 / lp)
    value = ratio.mean()
    if return_flag:
        return value, bool(zero.any())
    return value


def total_objective(bundle: LossBundle):
    """(main_loss, ssl_loss). Kept apart so gradient surgery can combine them."""
    main = bundle.l_ce
    w = bundle.weights
    ssl = main.new_zeros(()) if torch.is_tensor(main) else 0.0
    if bundle.l_rec is not None:
        ssl = ssl + w.lam_rec * bundle.l_rec
    if bundle.l_sparse is not None:
        ssl = ssl + w.lam_sparse * bundle.l_sparse
    return main, ssl
