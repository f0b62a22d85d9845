"""Synthetic multi-point vibrotactile data with a deterministic masking oracle.

Samples are built directly in the (N, F, T) wavelet-packet domain as sparse
band-limited bursts plus white noise. Labels come from :func:`masking_oracle`
applied to the clean (noise-free) coefficients:

* temporal masking: |x| is smoothed by a causal exponential window with time
  constant ``tau`` steps, ``s[t] = (1 - lam) * sum_{u <= t} lam**(t - u) |x[u]|``
  with ``lam = exp(-1 / tau)``; a node's perceptual energy is the maximum of
  ``s`` over bands and steps;
* spatial masking: node i's threshold is raised by its in-neighbours,
  ``theta_i = theta_p + c_s * sum_j w(d_ij) * e_j`` with ``w(d) = 1 / (1 + d)``;
* a node is important (label 1) iff ``e_i > theta_i``.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .graph import TactileGraph, default_graph


@dataclass
class SynthConfig:
    node_count: int = 24
    sample_count: int = 2000
    n_bands: int = 16
    n_steps: int = 32
    carrier_bands: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    amp_min: float = 0.2
    amp_max: float = 2.0
    active_prob: float = 0.75
    max_bursts: int = 3
    min_duration: int = 2
    max_duration: int = 10
    noise_floor: float = 0.02
    spatial_masking_coeff: float = 0.8
    temporal_masking_decay: float = 3.0
    threshold: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if self.amp_min < 0 or self.amp_max < self.amp_min:
            raise ValueError("amplitudes must satisfy 0 <= amp_min <= amp_max")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.spatial_masking_coeff < 0:
            raise ValueError("spatial_masking_coeff must be non-negative")
        if not self.temporal_masking_decay > 0:
            raise ValueError("temporal_masking_decay must be positive")
        bad = [b for b in self.carrier_bands if not 0 <= b < self.n_bands]
        if bad:
            raise ValueError(f"carrier bands {bad} outside [0, {self.n_bands})")


@dataclass
class LabeledSample:
    x: np.ndarray        # (N, F, T) float64, includes noise
    y: np.ndarray        # (N,) uint8
    clean: np.ndarray    # (N, F, T) float64, the oracle's input
    graph_id: str


@dataclass
class Dataset:
    x: np.ndarray        # (S, N, F, T)
    y: np.ndarray        # (S, N)
    graph: TactileGraph
    meta: dict

    def __len__(self):
        return self.x.shape[0]


def graph_id(g: TactileGraph) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(g.coords).tobytes())
    h.update(repr(g.edges).encode())
    return h.hexdigest()[:16]


def inverse_distance(d):
    return 1.0 / (1.0 + np.asarray(d, dtype=np.float64))


def smoothed_energy(x, tau: float) -> np.ndarray:
    """Per-node max over (band, step) of the causal exponentially smoothed |x|.

    ``x`` is (..., N, F, T); returns (..., N).
    """
    lam = np.exp(-1.0 / tau)
    a = np.abs(np.asarray(x, dtype=np.float64))
    s = np.zeros(a.shape[:-1])
    peak = np.zeros(a.shape[:-2])
    for t in range(a.shape[-1]):
        s = lam * s + (1.0 - lam) * a[..., t]
        peak = np.maximum(peak, s.max(axis=-1))
    return peak


def masking_oracle(x, g: TactileGraph, cfg: SynthConfig) -> np.ndarray:
    """Binary importance labels for one (N, F, T) sample or a stack (S, N, F, T)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("masking_oracle requires finite input")
    e = smoothed_energy(x, cfg.temporal_masking_decay)
    n = g.node_count
    weights = np.zeros((n, n))
    for j, i in g.edges:
        weights[i, j] = inverse_distance(np.linalg.norm(g.coords[i] - g.coords[j]))
    theta = cfg.threshold + cfg.spatial_masking_coeff * (e @ weights.T)
    return (e > theta).astype(np.uint8)


def _bursts(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    clean = np.zeros((cfg.node_count, cfg.n_bands, cfg.n_steps))
    bands = np.asarray(cfg.carrier_bands)
    t = np.arange(cfg.n_steps)
    for node in range(cfg.node_count):
        if rng.random() >= cfg.active_prob:
            continue
        for _ in range(rng.integers(1, cfg.max_bursts + 1)):
            band = bands[rng.integers(len(bands))]
            amp = rng.uniform(cfg.amp_min, cfg.amp_max)
            onset = rng.integers(cfg.n_steps)
            dur = rng.integers(cfg.min_duration, cfg.max_duration + 1)
            omega = rng.uniform(0.8, 2.5)
            phase = rng.uniform(0, 2 * np.pi)
            span = (t >= onset) & (t < onset + dur)
            clean[node, band, span] += amp * np.sin(omega * (t[span] - onset) + phase)
    return clean


def generate_sample(cfg: SynthConfig, g: TactileGraph, rng: np.random.Generator) -> LabeledSample:
    clean = _bursts(cfg, rng)
    noise = cfg.noise_floor * rng.standard_normal(clean.shape) if cfg.noise_floor > 0 else 0.0
    y = masking_oracle(clean, g, cfg)
    return LabeledSample(clean + noise, y, clean, graph_id(g))


def generate_dataset(cfg: SynthConfig, g: TactileGraph | None = None):
    """Reproducible dataset of ``cfg.sample_count`` samples plus a stats report.

    Each sample draws from its own generator spawned from ``cfg.seed``, so
    sample k is independent of how many samples precede it.
    """
    if cfg.sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    if g is None:
        g = default_graph(cfg.node_count)
    if g.node_count != cfg.node_count:
        raise ValueError(f"graph has {g.node_count} nodes, config asks for {cfg.node_count}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.sample_count)
    xs = np.empty((cfg.sample_count, cfg.node_count, cfg.n_bands, cfg.n_steps), dtype=np.float32)
    ys = np.empty((cfg.sample_count, cfg.node_count), dtype=np.uint8)
    for k, ss in enumerate(seeds):
        s = generate_sample(cfg, g, np.random.default_rng(ss))
        xs[k] = s.x
        ys[k] = s.y
    positive_rate = float(ys.mean())
    report = {
        "sample_count": cfg.sample_count,
        "node_count": cfg.node_count,
        "positive_rate": positive_rate,
        "per_node_positive_rate": [round(float(v), 6) for v in ys.mean(axis=0)],
        "graph_id": graph_id(g),
    }
    if ys.min() == ys.max():
        warnings.warn(f"degenerate synthetic dataset: every label equals {int(ys.flat[0])}")
    meta = {"synth": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
            "graph": g.to_dict(), "stats": report}
    return Dataset(xs, ys, g, meta), report


def save_dataset(path, ds: Dataset):
    from .preprocess import write_vtxf
    write_vtxf(path, ds.x, ds.y, ds.meta)


def load_dataset(path) -> Dataset:
    from .preprocess import PreprocessError, read_vtxf
    x, y, meta = read_vtxf(path)
    if y is None:
        raise PreprocessError(f"{path}: dataset file has no label block")
    if "graph" in meta:
        g = TactileGraph.from_dict(meta["graph"])
    else:
        g = default_graph(x.shape[1])
    return Dataset(x, y, g, meta)
