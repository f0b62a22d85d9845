"""Temporal-spectral mask-passing attention and global spatial attention.

Shape conventions: node features are ``(..., N, F, T)`` with any number of
leading batch axes. Per-head quantities insert a head axis ``K`` directly
before the last two axes, e.g. spectral projections of all nodes are
``(..., N, K, F, T)`` and per-edge spectral coefficients ``(..., E, K, F, F)``.

Temporal coefficients ``alpha_T[t_src, t_dst]`` are normalized over the
source index for each target step and are exactly zero for ``t_src > t_dst``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


class PackedTriangular(nn.Module):
    """K stacked square matrices whose only free entries lie on one triangle.

    Only the allowed entries are parameters; the dense matrix is rebuilt by
    scattering them into zeros, so off-support entries are exactly zero no
    matter what the optimizer does.
    """

    def __init__(self, heads: int, size: int, lower: bool):
        super().__init__()
        self.size = size
        self.lower = lower
        if lower:
            idx = torch.tril_indices(size, size)
        else:
            idx = torch.triu_indices(size, size)
        self.register_buffer("rows", idx[0], persistent=False)
        self.register_buffer("cols", idx[1], persistent=False)
        bound = 1.0 / math.sqrt(size)
        self.packed = nn.Parameter(torch.empty(heads, idx.shape[1]).uniform_(-bound, bound))

    def forward(self) -> torch.Tensor:
        heads = self.packed.shape[0]
        dense = self.packed.new_zeros(heads, self.size, self.size)
        dense[:, self.rows, self.cols] = self.packed
        return dense

    def support_mask(self) -> torch.Tensor:
        m = torch.ones(self.size, self.size, dtype=torch.bool)
        return torch.tril(m) if self.lower else torch.triu(m)


def _uniform(shape, fan):
    bound = 1.0 / math.sqrt(fan)
    return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))


class TsmpLayer(nn.Module):
    """Learnable weights of one temporal-spectral mask-passing layer.

    Holds per-head ``W_QF`` (lower), ``W_KF`` (upper), ``W_F`` (lower), all
    T x T; ``W_QT``, ``W_KT``, ``W_T``, all F x F; ``W_V`` (F x T); and the
    1x1 fusion (one weight per head plus a bias).
    """

    def __init__(self, n_bands: int, n_steps: int, heads: int = 2):
        super().__init__()
        if heads < 1:
            raise ValueError(f"heads must be >= 1, got {heads}")
        self.n_bands, self.n_steps, self.heads = n_bands, n_steps, heads
        self.qf = PackedTriangular(heads, n_steps, lower=True)
        self.kf = PackedTriangular(heads, n_steps, lower=False)
        self.wf = PackedTriangular(heads, n_steps, lower=True)
        self.w_qt = _uniform((heads, n_bands, n_bands), n_bands)
        self.w_kt = _uniform((heads, n_bands, n_bands), n_bands)
        self.w_t = _uniform((heads, n_bands, n_bands), n_bands)
        self.w_v = _uniform((heads, n_bands, n_steps), n_steps)
        self.fusion_weight = _uniform((heads,), heads)
        self.fusion_bias = nn.Parameter(torch.zeros(()))

    @property
    def W_QF(self):
        return self.qf()

    @property
    def W_KF(self):
        return self.kf()

    @property
    def W_F(self):
        return self.wf()

    @property
    def W_QT(self):
        return self.w_qt

    @property
    def W_KT(self):
        return self.w_kt

    @property
    def W_T(self):
        return self.w_t

    @property
    def W_V(self):
        return self.w_v

    def forward(self, x, src, dst, unit_gate=False):
        out = mask_passing_aggregate(x, (src, dst), self, unit_gate=unit_gate)
        return apply_gate(x, out)


@dataclass
class MaskPassingOutput:
    gate: torch.Tensor         # (..., N, F, T), in (0, 1)
    alpha_F: torch.Tensor      # (..., E, K, F, F), row-stochastic
    alpha_T: torch.Tensor      # (..., E, K, T, T), zero where t_src > t_dst
    pre_activation: torch.Tensor  # (..., N, F, T), fused before the logistic


def _check_features(x, layer: TsmpLayer, name="x"):
    if x.shape[-2:] != (layer.n_bands, layer.n_steps):
        raise ValueError(
            f"{name} has trailing shape {tuple(x.shape[-2:])}, layer expects "
            f"({layer.n_bands}, {layer.n_steps})"
        )


def spectral_temporal_projections(x_i, x_j, p: TsmpLayer):
    """Spectral (F x T) and temporal (T x F) query/key projections, per head.

    Returns ``(F_i, F_j, T_i, T_j)`` where ``F_i = x_i W_QF``,
    ``F_j = x_j W_KF``, ``T_i = x_i^T W_QT`` and ``T_j = x_j^T W_KT``, each
    with a head axis inserted before the last two axes.
    """
    _check_features(x_i, p, "x_i")
    _check_features(x_j, p, "x_j")
    xi = x_i.unsqueeze(-3)
    xj = x_j.unsqueeze(-3)
    f_i = xi @ p.W_QF
    f_j = xj @ p.W_KF
    t_i = xi.transpose(-1, -2) @ p.W_QT
    t_j = xj.transpose(-1, -2) @ p.W_KT
    return f_i, f_j, t_i, t_j


def causal_time_mask(n_steps: int, device=None) -> torch.Tensor:
    """Boolean (T, T) mask, True where ``t_src > t_dst`` (disallowed)."""
    idx = torch.arange(n_steps, device=device)
    return idx[:, None] > idx[None, :]


def tsmp_coefficients(f_i, f_j, t_i, t_j, p: TsmpLayer):
    """Spectral and temporal attention coefficients for node pairs.

    ``alpha_F = softmax_rows(F_i W_F F_j^T / sqrt(T))``. For ``alpha_T`` the
    logits ``T_j W_T T_i^T / sqrt(F)`` are indexed ``[t_src, t_dst]``; entries
    with ``t_src > t_dst`` are set to -inf and the softmax runs over ``t_src``.
    """
    n_steps = f_i.shape[-1]
    n_bands = t_i.shape[-1]
    spec_logits = (f_i @ p.W_F @ f_j.transpose(-1, -2)) / math.sqrt(n_steps)
    alpha_f = torch.softmax(spec_logits, dim=-1)
    temp_logits = (t_j @ p.W_T @ t_i.transpose(-1, -2)) / math.sqrt(n_bands)
    masked = temp_logits.masked_fill(causal_time_mask(n_steps, temp_logits.device), float("-inf"))
    alpha_t = torch.softmax(masked, dim=-2)
    return alpha_f, alpha_t


def _edge_arrays(g, device):
    if isinstance(g, tuple):
        src, dst = g
    else:
        src, dst = g.edge_index()
    src = torch.as_tensor(src, dtype=torch.long, device=device)
    dst = torch.as_tensor(dst, dtype=torch.long, device=device)
    return src, dst


def mask_passing_aggregate(x, g, p: TsmpLayer, unit_gate: bool = False) -> MaskPassingOutput:
    """Aggregate neighbour influence into a multiplicative gate per node.

    For every head and edge (j -> i) the contribution is
    ``alpha_F_ij (x_j * W_V) alpha_T_ij``; contributions are summed over the
    in-neighbours of i, the K head maps are fused by a 1x1 convolution and
    passed through the logistic function. A node without neighbours gets
    ``sigmoid(fusion_bias)``.

    Args:
        x: (..., N, F, T) node features.
        g: a :class:`~sstg.graph.TactileGraph` or a ``(src, dst)`` pair.
        unit_gate: test hook; forces the gate to exactly 1.
    """
    _check_features(x, p)
    src, dst = _edge_arrays(g, x.device)
    n_bands, n_steps = x.shape[-2:]
    # Per-node factors of the bilinear forms, gathered per edge afterwards.
    # Same arithmetic as tsmp_coefficients, reassociated.
    xs = x.unsqueeze(-3)  # (..., N, 1, F, T)
    xt = xs.transpose(-1, -2)
    spec_q = (xs @ p.W_QF) @ (p.W_F / math.sqrt(n_steps))
    spec_k = xs @ p.W_KF
    temp_q = xt @ p.W_QT
    temp_k = (xt @ p.W_KT) @ (p.W_T / math.sqrt(n_bands))
    values = xs * p.W_V  # (..., N, K, F, T)

    spec_logits = spec_q.index_select(-4, dst) @ spec_k.index_select(-4, src).transpose(-1, -2)
    alpha_f = torch.softmax(spec_logits, dim=-1)
    # transposed layout [t_dst, t_src] so the softmax runs over the last axis
    temp_logits_t = temp_q.index_select(-4, dst) @ temp_k.index_select(-4, src).transpose(-1, -2)
    future = causal_time_mask(n_steps, x.device).transpose(0, 1)
    alpha_t = torch.softmax(temp_logits_t.masked_fill(future, float("-inf")), dim=-1).transpose(-1, -2)

    contrib = alpha_f @ values.index_select(-4, src) @ alpha_t  # (..., E, K, F, T)
    summed = contrib.new_zeros(x.shape[:-2] + contrib.shape[-3:])
    summed = summed.index_add(-4, dst, contrib)  # (..., N, K, F, T)
    fused = torch.einsum("...kft,k->...ft", summed, p.fusion_weight) + p.fusion_bias
    gate = torch.ones_like(fused) if unit_gate else torch.sigmoid(fused)
    return MaskPassingOutput(gate, alpha_f, alpha_t, fused)


def apply_gate(x_i, out) -> torch.Tensor:
    gate = out.gate if isinstance(out, MaskPassingOutput) else out
    return x_i * gate


class GlobalSpatialAttention(nn.Module):
    """Row-stochastic node association matrix for one decoder block.

    ``S = V_s sigmoid((X W1) W2 (X . W3)^T + ((X^T U1) U2) (X U3)^T + b_s)``,
    ``S' = softmax_rows(S)``. ``W1``/``U3`` contract time, ``W3``/``U1``
    contract channels.
    """

    def __init__(self, n_nodes: int, channels: int, n_steps: int):
        super().__init__()
        self.n_nodes, self.channels, self.n_steps = n_nodes, channels, n_steps
        self.V_s = nn.Parameter(torch.zeros(n_nodes, n_nodes))
        self.b_s = nn.Parameter(torch.zeros(n_nodes, n_nodes))
        self.W_1 = _uniform((n_steps,), n_steps)
        self.W_2 = _uniform((channels, n_steps), channels)
        self.W_3 = _uniform((channels,), channels)
        self.U_1 = _uniform((channels,), channels)
        self.U_2 = _uniform((n_steps, channels), n_steps)
        self.U_3 = _uniform((n_steps,), n_steps)

    def forward(self, x_h):
        return global_spatial_attention(x_h, self)


def global_spatial_attention(x_h, p: GlobalSpatialAttention) -> torch.Tensor:
    expected = (p.n_nodes, p.channels, p.n_steps)
    if tuple(x_h.shape[-3:]) != expected:
        raise ValueError(f"x_h has trailing shape {tuple(x_h.shape[-3:])}, expected {expected}")
    left1 = (x_h @ p.W_1) @ p.W_2                           # (..., N, T)
    right1 = torch.einsum("...nct,c->...nt", x_h, p.W_3)    # (..., N, T)
    left2 = torch.einsum("...nct,c->...nt", x_h, p.U_1) @ p.U_2  # (..., N, C)
    right2 = x_h @ p.U_3                                    # (..., N, C)
    inner = left1 @ right1.transpose(-1, -2) + left2 @ right2.transpose(-1, -2) + p.b_s
    s = p.V_s @ torch.sigmoid(inner)
    return torch.softmax(s, dim=-1)
