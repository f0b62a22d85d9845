"""Shared encoder, main-branch decoder/classifier and the masked-autoencoder branch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import GlobalSpatialAttention, TsmpLayer, apply_gate, mask_passing_aggregate

ABLATIONS = ("no_topk", "no_gsa", "no_ssl", "no_st_decoder", "no_tsmp")


@dataclass
class ModelConfig:
    n_nodes: int = 24
    n_bands: int = 16
    n_steps: int = 32
    heads: int = 2
    encoder_layers: int = 2
    decoder_channels: tuple = (32, 32)
    tcn_kernel: int = 3
    classifier_hidden: int = 128
    classifier_layers: int = 2
    recon_kernels: tuple = (3, 5, 7)
    pe_scale: float = 0.1
    graph_strategy: str = "knn"
    graph_param: float = 4
    arch: str = "sstg"
    mlp_hidden: int = 128
    mlp_layers: int = 4

    @property
    def embedding_dim(self) -> int:
        return self.decoder_channels[-1]


@dataclass
class MaskSpec:
    mask_rate: float = 0.1
    granularity: str = "element"
    patch_len: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must lie in [0, 1), got {self.mask_rate}")
        if self.granularity not in ("element", "time-patch"):
            raise ValueError(f"unknown mask granularity {self.granularity!r}")
        if self.patch_len < 1:
            raise ValueError(f"patch_len must be positive, got {self.patch_len}")


def positional_encoding(n_bands: int, n_steps: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal table (F, T): even channels sin, odd channels cos."""
    if n_bands % 2:
        raise ValueError(f"positional encoding needs an even band count, got {n_bands}")
    pos = torch.arange(n_steps, dtype=torch.float64)
    i = torch.arange(n_bands // 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * 2 * i / n_bands)
    angles = freq[:, None] * pos[None, :]
    pe = torch.empty(n_bands, n_steps, dtype=torch.float64)
    pe[0::2] = torch.sin(angles)
    pe[1::2] = torch.cos(angles)
    return pe.to(dtype)


def topk_count(ratio: float, n: int) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"top-k ratio must lie in (0, 1], got {ratio}")
    # round away float noise such as 0.1 * 30 = 3.0000000000000004
    return min(n, math.ceil(round(ratio * n, 9)))


def topk_select(h: torch.Tensor, ratio: float) -> torch.Tensor:
    """Keep the ceil(ratio * N*F*T) largest-|value| entries of each sample.

    Ties go to the lower flat index. The selection mask is treated as a
    constant, so gradients flow through kept entries only.
    """
    if ratio == 1.0:
        topk_count(ratio, 1)
        return h
    flat = h.reshape(h.shape[:-3] + (-1,))
    k = topk_count(ratio, flat.shape[-1])
    with torch.no_grad():
        order = torch.sort(flat.abs(), dim=-1, descending=True, stable=True).indices
        mask = torch.zeros_like(flat)
        mask.scatter_(-1, order[..., :k], 1.0)
    return (flat * mask).reshape(h.shape)


def mask_input(x: torch.Tensor, spec: MaskSpec, generator: torch.Generator | None = None):
    """Zero entries of ``x`` at rate ``spec.mask_rate``.

    Element granularity drops every entry independently. Time-patch
    granularity splits each (node, band) row into runs of ``patch_len``
    steps and drops whole runs.

    Returns:
        (x_masked, M) with M in {0, 1} and the same shape as x.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(spec.seed)
    if spec.granularity == "element":
        u = torch.rand(x.shape, generator=generator, dtype=torch.float64)
        keep = u >= spec.mask_rate
    else:
        n_steps = x.shape[-1]
        n_patches = -(-n_steps // spec.patch_len)
        u = torch.rand(x.shape[:-1] + (n_patches,), generator=generator, dtype=torch.float64)
        keep = (u >= spec.mask_rate).repeat_interleave(spec.patch_len, dim=-1)[..., :n_steps]
    m = keep.to(x.dtype)
    return x * m, m


class TemporalConv(nn.Module):
    """Dilated causal convolution over time, applied per node.

    Input (..., N, C_in, T) -> (..., N, C_out, T). Zero padding of
    (kernel - 1) * dilation sits on the past side only. When C_in == C_out
    the input is added back (residual).
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, dilation=1):
        super().__init__()
        if kernel_size < 1 or dilation < 1:
            raise ValueError("kernel_size and dilation must be >= 1")
        self.kernel_size, self.dilation = kernel_size, dilation
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size, dilation=dilation)
        self.residual = in_channels == out_channels

    def forward(self, x):
        lead = x.shape[:-2]
        flat = x.reshape((-1,) + tuple(x.shape[-2:]))
        y = self.conv(F.pad(flat, ((self.kernel_size - 1) * self.dilation, 0)))
        if self.residual:
            y = y + flat
        return y.reshape(lead + y.shape[-2:])


def tcn_forward(x, block) -> torch.Tensor:
    tcn = block.tcn if isinstance(block, DecoderBlock) else block
    return tcn(x)


class EdgeGATv2(nn.Module):
    """GATv2 attention over in-neighbours plus self, one score per time step.

    For edge (j -> i) at step t the logit is
    ``a . leaky_relu(W_dst x_i[:, t] + W_src x_j[:, t] + w_edge * S'[i, j])``;
    weights are normalized over {i} and N(i). The edge term is dropped when
    no spatial attention matrix is supplied.
    """

    def __init__(self, channels: int, negative_slope: float = 0.2):
        super().__init__()
        self.channels = channels
        self.negative_slope = negative_slope
        self.lin_dst = nn.Linear(channels, channels, bias=False)
        self.lin_src = nn.Linear(channels, channels, bias=False)
        bound = 1.0 / math.sqrt(channels)
        self.w_edge = nn.Parameter(torch.empty(channels).uniform_(-bound, bound))
        self.att = nn.Parameter(torch.empty(channels).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(channels))

    def attention(self, x, src, dst, s_prime=None):
        """Dense (..., T, N, N) weights alpha[t, i, j]; zero off the self+edge pattern."""
        xt = x.transpose(-1, -2)  # (..., N, T, C)
        g_dst = self.lin_dst(xt)
        g_src = self.lin_src(xt)
        z = g_dst.index_select(-3, dst) + g_src.index_select(-3, src)  # (..., E, T, C)
        if s_prime is not None:
            edge_feat = s_prime[..., dst, src]  # (..., E)
            z = z + edge_feat[..., None, None] * self.w_edge
        logits = F.leaky_relu(z, self.negative_slope) @ self.att  # (..., E, T)
        n = x.shape[-3]
        dense = logits.new_full(logits.shape[:-2] + (logits.shape[-1], n, n), float("-inf"))
        dense[..., dst, src] = logits.transpose(-1, -2)
        return torch.softmax(dense, dim=-1), g_src

    def forward(self, x, src, dst, s_prime=None):
        alpha, g_src = self.attention(x, src, dst, s_prime)
        out = alpha @ g_src.transpose(-3, -2) + self.bias  # (..., T, N, C)
        return out.permute(*range(out.dim() - 3), -2, -1, -3)


def with_self_loops(src, dst, n_nodes):
    loops = torch.arange(n_nodes, dtype=torch.long)
    return torch.cat([torch.as_tensor(src), loops]), torch.cat([torch.as_tensor(dst), loops])


def gat_forward(x, src, dst, s_prime, block) -> torch.Tensor:
    gat = block.gat if isinstance(block, DecoderBlock) else block
    return gat(x, src, dst, s_prime)


class DecoderBlock(nn.Module):
    """Global spatial attention -> causal TCN -> edge-featured GATv2, with a skip around the GAT."""

    def __init__(self, n_nodes, in_channels, out_channels, n_steps, kernel_size, dilation):
        super().__init__()
        self.gsa = GlobalSpatialAttention(n_nodes, in_channels, n_steps)
        self.tcn = TemporalConv(in_channels, out_channels, kernel_size, dilation)
        self.gat = EdgeGATv2(out_channels)

    def forward(self, x, src, dst, use_gsa=True):
        s_prime = self.gsa(x) if use_gsa else None
        h = F.relu(self.tcn(x))
        return F.relu(self.gat(h, src, dst, s_prime) + h)


class Classifier(nn.Module):
    def __init__(self, in_dim, hidden=128, layers=2):
        super().__init__()
        dims = [in_dim] + [hidden] * layers
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], 1)

    def logits(self, emb):
        h = emb
        for lin in self.hidden:
            h = F.relu(lin(h))
        return self.out(h).squeeze(-1)

    def forward(self, emb):
        return torch.sigmoid(self.logits(emb))


class ReconstructionHead(nn.Module):
    """Parallel depthwise causal convolutions (kernels 3, 5, 7 by default), summed, then a 1x1 band mix."""

    def __init__(self, in_channels, out_bands, kernel_sizes=(3, 5, 7)):
        super().__init__()
        self.kernel_sizes = tuple(kernel_sizes)
        self.branches = nn.ModuleList(
            nn.Conv1d(in_channels, in_channels, k, groups=in_channels) for k in self.kernel_sizes
        )
        self.mix = nn.Conv1d(in_channels, out_bands, 1)

    def branch(self, idx, flat):
        k = self.kernel_sizes[idx]
        return self.branches[idx](F.pad(flat, (k - 1, 0)))

    def forward(self, z):
        lead = z.shape[:-2]
        flat = z.reshape((-1,) + tuple(z.shape[-2:]))
        summed = sum(self.branch(i, flat) for i in range(len(self.branches)))
        y = self.mix(summed)
        return y.reshape(lead + y.shape[-2:])


def he_init(module: nn.Module) -> nn.Module:
    """He-normal weights and zero biases for every Linear / Conv1d below ``module``.

    Attention parameters keep their own initialization.
    """
    for mod in module.modules():
        if isinstance(mod, (nn.Linear, nn.Conv1d)):
            nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
    return module


def _decoder_stack(cfg: ModelConfig, in_channels):
    blocks = []
    chans = [in_channels] + list(cfg.decoder_channels)
    for r in range(len(cfg.decoder_channels)):
        blocks.append(DecoderBlock(cfg.n_nodes, chans[r], chans[r + 1], cfg.n_steps,
                                   cfg.tcn_kernel, 2 ** r))
    return nn.ModuleList(blocks)


class SSTGMPAN(nn.Module):
    """Two-branch spatio-temporal graph mask-passing network bound to one graph.

    The shared encoder (mask-passing layers and the positional-encoding
    scale) feeds a classification branch (top-k, decoder, MLP head) and a
    masked-autoencoder branch (own decoder, reconstruction head).
    """

    def __init__(self, cfg: ModelConfig, graph, ablate=(), topk_ratio=0.8, topk_on_ssl=False):
        super().__init__()
        unknown = set(ablate) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}")
        if graph.node_count != cfg.n_nodes:
            raise ValueError(f"graph has {graph.node_count} nodes, config expects {cfg.n_nodes}")
        self.cfg = cfg
        self.graph = graph
        self.ablate = frozenset(ablate)
        self.topk_ratio = topk_ratio
        self.topk_on_ssl = topk_on_ssl
        src, dst = graph.edge_index()
        self.register_buffer("src", torch.as_tensor(src, dtype=torch.long), persistent=False)
        self.register_buffer("dst", torch.as_tensor(dst, dtype=torch.long), persistent=False)
        loop_src, loop_dst = with_self_loops(self.src, self.dst, cfg.n_nodes)
        self.register_buffer("loop_src", loop_src, persistent=False)
        self.register_buffer("loop_dst", loop_dst, persistent=False)
        # kept in float64 outside the buffer registry so dtype casts of the
        # module never round it; cast to the input dtype on use
        self.pe = positional_encoding(cfg.n_bands, cfg.n_steps, dtype=torch.float64)

        self.pe_scale = nn.Parameter(torch.tensor(float(cfg.pe_scale)))
        self.encoder = nn.ModuleList(
            TsmpLayer(cfg.n_bands, cfg.n_steps, cfg.heads) for _ in range(cfg.encoder_layers)
        )
        if "no_st_decoder" in self.ablate:
            self.main_proj = nn.Linear(cfg.n_bands, cfg.embedding_dim)
        else:
            self.main_decoder = _decoder_stack(cfg, cfg.n_bands)
        self.classifier = Classifier(cfg.embedding_dim, cfg.classifier_hidden, cfg.classifier_layers)
        if self.use_ssl:
            self.ssl_decoder = _decoder_stack(cfg, cfg.n_bands)
            self.recon_head = ReconstructionHead(cfg.decoder_channels[-1], cfg.n_bands, cfg.recon_kernels)
        for name, child in self.named_children():
            if name != "encoder":
                he_init(child)

    @property
    def use_ssl(self) -> bool:
        return "no_ssl" not in self.ablate

    def _edges(self, with_loops=False):
        return (self.loop_src, self.loop_dst) if with_loops else (self.src, self.dst)

    def encode(self, x, unit_gate=False):
        """(..., N, F, T) -> latent of the same shape."""
        h = x + self.pe_scale * self.pe.to(x.dtype)
        if "no_tsmp" in self.ablate:
            return h
        for layer in self.encoder:
            out = mask_passing_aggregate(h, self._edges(), layer, unit_gate=unit_gate)
            h = apply_gate(h, out)
        return h

    def _run_blocks(self, blocks, h):
        src, dst = self._edges(with_loops=True)
        use_gsa = "no_gsa" not in self.ablate
        for block in blocks:
            h = block(h, src, dst, use_gsa=use_gsa)
        return h

    def decode_main(self, h_prime):
        """Latent (..., N, F, T) -> per-node embedding (..., N, D), mean-pooled over time."""
        if "no_st_decoder" in self.ablate:
            z = F.relu(self.main_proj(h_prime.transpose(-1, -2)))
            return z.mean(dim=-2)
        return self._run_blocks(self.main_decoder, h_prime).mean(dim=-1)

    def classify(self, emb):
        return self.classifier(emb)

    def decode_ssl(self, h_tilde):
        return self._run_blocks(self.ssl_decoder, h_tilde)

    def reconstruct(self, z):
        return self.recon_head(z)

    def forward_main(self, x):
        """Returns (scores (..., N), embedding (..., N, D))."""
        h = self.encode(x)
        if "no_topk" not in self.ablate:
            h = topk_select(h, self.topk_ratio)
        emb = self.decode_main(h)
        return self.classify(emb), emb

    def forward_ssl(self, x_masked):
        """Returns (reconstruction (..., N, F, T), encoder latent (..., N, F, T))."""
        h_tilde = self.encode(x_masked)
        z_in = topk_select(h_tilde, self.topk_ratio) if self.topk_on_ssl else h_tilde
        return self.reconstruct(self.decode_ssl(z_in)), h_tilde

    def forward(self, x):
        return self.forward_main(x)[0]

    def shared_parameters(self):
        return [self.pe_scale] + list(self.encoder.parameters())

    def main_parameters(self):
        mods = [self.main_proj] if "no_st_decoder" in self.ablate else [self.main_decoder]
        mods.append(self.classifier)
        return [p for m in mods for p in m.parameters()]

    def ssl_parameters(self):
        if not self.use_ssl:
            return []
        return list(self.ssl_decoder.parameters()) + list(self.recon_head.parameters())


class MLPBaseline(nn.Module):
    """Per-node MLP on the flattened F*T features; sees no neighbour information."""

    def __init__(self, cfg: ModelConfig, graph=None, **_):
        super().__init__()
        self.cfg = cfg
        self.graph = graph
        self.ablate = frozenset(("no_ssl",))
        dims = [cfg.n_bands * cfg.n_steps] + [cfg.mlp_hidden] * cfg.mlp_layers
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], 1)
        he_init(self)

    use_ssl = False

    def forward_main(self, x):
        h = x.reshape(x.shape[:-2] + (-1,))
        for lin in self.hidden:
            h = F.relu(lin(h))
        return torch.sigmoid(self.out(h).squeeze(-1)), h

    def forward(self, x):
        return self.forward_main(x)[0]

    def shared_parameters(self):
        return []

    def main_parameters(self):
        return list(self.parameters())

    def ssl_parameters(self):
        return []


def build_model(cfg: ModelConfig, graph, ablate=(), topk_ratio=0.8, topk_on_ssl=False):
    if cfg.arch == "mlp":
        return MLPBaseline(cfg, graph)
    if cfg.arch != "sstg":
        raise ValueError(f"unknown architecture {cfg.arch!r}")
    return SSTGMPAN(cfg, graph, ablate=ablate, topk_ratio=topk_ratio, topk_on_ssl=topk_on_ssl)
