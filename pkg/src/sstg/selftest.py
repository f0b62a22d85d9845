"""Fast built-in invariant checks behind ``sstg selftest``.

These are small, randomized versions of the properties the test suite pins
down in depth; they exist so an installed build can be sanity-checked
without the source tree.
"""

from __future__ import annotations

import itertools
import sys
import traceback

import numpy as np
import torch


def _check_wpt(rng):
    from .preprocess import wpt_decompose, wpt_reconstruct
    seg = rng.standard_normal((3, 512))
    st = wpt_decompose(seg)
    back = wpt_reconstruct(st)
    assert np.max(np.abs(back - seg)) < 1e-8, "round trip error"
    rel = abs(np.sum(st.coeffs ** 2) - np.sum(seg ** 2)) / np.sum(seg ** 2)
    assert rel < 1e-10, f"energy error {rel}"


def _check_dft321(rng):
    from .preprocess import dft321
    a = rng.standard_normal((2, 3, 1024))
    fused = dft321(a)
    lhs = np.abs(np.fft.rfft(fused, axis=-1)) ** 2
    rhs = np.sum(np.abs(np.fft.rfft(a, axis=-1)) ** 2, axis=-2)
    keep = rhs > 1e-12
    assert np.max(np.abs(lhs[keep] - rhs[keep]) / rhs[keep]) < 1e-10


def _check_attention(rng):
    from .attention import TsmpLayer, mask_passing_aggregate
    from .graph import build_graph
    g = build_graph(rng.random((5, 2)), "full")
    layer = TsmpLayer(4, 6, heads=2).double()
    out = mask_passing_aggregate(torch.randn(5, 4, 6, dtype=torch.float64), g, layer)
    assert torch.allclose(out.alpha_F.sum(-1), torch.ones(()).double(), atol=1e-6)
    upper = torch.triu(torch.ones(6, 6, dtype=torch.bool), 1)
    assert (out.alpha_T.transpose(-1, -2)[..., upper] == 0).all(), "future leaks into alpha_T"
    assert (layer.W_QF[:, upper] == 0).all() and (layer.W_KF[:, upper.T] == 0).all()


def _check_sparse(rng):
    from .objectives import sparse_bounds, sparse_loss
    h = torch.from_numpy(rng.standard_normal((4, 3, 5, 6)))
    lo, hi = sparse_bounds(90)
    v = float(sparse_loss(h))
    assert lo - 1e-10 <= v <= hi + 1e-10
    assert abs(float(sparse_loss(7.5 * h)) - v) < 1e-10
    onehot = torch.zeros(3, 5, 6, dtype=torch.float64)
    onehot[1, 2, 3] = 2.0
    assert float(sparse_loss(onehot)) == lo


def _check_pcgrad(rng):
    from .training import pcgrad_combine
    assert np.array_equal(pcgrad_combine([np.array([1.0, 0.0]), np.array([-1.0, 0.0])]), [0.0, 0.0])
    assert np.array_equal(pcgrad_combine([np.array([1.0, 1.0]), np.array([1.0, -1.0])]), [2.0, 0.0])


def _check_causality(rng):
    from .network import ReconstructionHead, TemporalConv
    x = torch.randn(2, 4, 16, dtype=torch.float64)
    y = x.clone()
    y[..., 9:] = torch.randn(2, 4, 7, dtype=torch.float64)
    for mod in (TemporalConv(4, 4, 3, 2).double(), ReconstructionHead(4, 3).double()):
        assert torch.equal(mod(x)[..., :9], mod(y)[..., :9]), type(mod).__name__


def _check_auc(rng):
    from .evalkit import rank_auc
    s = rng.integers(0, 5, 40).astype(float)
    y = rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    pos, neg = s[y == 1], s[y == 0]
    brute = sum((p > n) + 0.5 * (p == n) for p, n in itertools.product(pos, neg)) / (len(pos) * len(neg))
    assert abs(rank_auc(s, y) - brute) < 1e-12


def _check_schedule(rng):
    from .config import RunConfig
    from .training import lr_schedule, split_dataset
    cfg = RunConfig()
    assert [lr_schedule(e, cfg) for e in (0, 50, 299)] == [1e-4, 5e-5, 3.125e-6]
    parts = split_dataset(1000, (0.6, 0.2, 0.2), seed=3)
    assert [len(p) for p in parts] == [600, 200, 200]
    assert sorted(np.concatenate(parts).tolist()) == list(range(1000))


CHECKS = [
    ("wavelet packet round trip and energy", _check_wpt),
    ("DFT321 per-bin energy", _check_dft321),
    ("attention normalization and causality", _check_attention),
    ("sparse loss bounds and scale invariance", _check_sparse),
    ("PCGrad worked examples", _check_pcgrad),
    ("causal convolutions", _check_causality),
    ("rank AUC against brute force", _check_auc),
    ("learning-rate schedule and split", _check_schedule),
]


def run_selftest(seed: int = 0, stream=None) -> int:
    """Run every check, print one line each plus a summary; return the failure count."""
    stream = stream or sys.stdout
    rng = np.random.default_rng(seed)
    failures = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for name, fn in CHECKS:
            try:
                fn(rng)
                print(f"PASS  {name}", file=stream)
            except Exception as exc:  # noqa: BLE001 - report and continue
                failures += 1
                detail = str(exc) or traceback.format_exc(limit=1).strip().splitlines()[-1]
                print(f"FAIL  {name}: {detail}", file=stream)
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed", file=stream)
    return failures
