import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch.autograd import gradcheck

from sstg.attention import (
    GlobalSpatialAttention,
    MaskPassingOutput,
    PackedTriangular,
    TsmpLayer,
    apply_gate,
    causal_time_mask,
    global_spatial_attention,
    mask_passing_aggregate,
    spectral_temporal_projections,
    tsmp_coefficients,
)
from sstg.graph import TactileGraph, build_graph

D = torch.float64


def layer64(f, t, heads=2, seed=0):
    torch.manual_seed(seed)
    return TsmpLayer(f, t, heads).double()


def random_graph(n, seed=0):
    rng = np.random.default_rng(seed)
    return build_graph(rng.random((n, 2)), "full") if n > 1 else TactileGraph(np.zeros((1, 2)), [])


def reference_aggregate(x, g, p):
    """Edge-by-edge, head-by-head evaluation straight from the coefficient definitions."""
    n = x.shape[0]
    summed = torch.zeros(n, p.heads, p.n_bands, p.n_steps, dtype=x.dtype)
    for j, i in g.edges:
        f_i, f_j, t_i, t_j = spectral_temporal_projections(x[i], x[j], p)
        a_f, a_t = tsmp_coefficients(f_i, f_j, t_i, t_j, p)
        for k in range(p.heads):
            summed[i, k] += a_f[k] @ (x[j] * p.W_V[k]) @ a_t[k]
    fused = sum(p.fusion_weight[k] * summed[:, k] for k in range(p.heads)) + p.fusion_bias
    return fused


class TestPackedTriangular:
    @pytest.mark.parametrize("lower", [True, False])
    def test_support(self, lower):
        m = PackedTriangular(2, 5, lower)()
        off = ~m.new_ones(5, 5, dtype=torch.bool).tril() if lower else ~m.new_ones(5, 5, dtype=torch.bool).triu()
        assert (m[:, off] == 0).all()
        assert (m[:, ~off] != 0).all()

    def test_support_survives_optimizer(self):
        torch.manual_seed(0)
        p = TsmpLayer(4, 6, heads=2)
        opt = torch.optim.Adam(p.parameters(), lr=0.1)
        g = build_graph(np.random.default_rng(0).random((3, 2)), "full")
        for _ in range(100):
            out = mask_passing_aggregate(torch.randn(3, 4, 6), g, p)
            loss = (out.pre_activation ** 2).sum() + p.W_QF.sum() + p.W_KF.sum() + p.W_F.sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
        upper = torch.triu(torch.ones(6, 6, dtype=torch.bool), 1)
        assert (p.W_QF[:, upper] == 0).all()
        assert (p.W_F[:, upper] == 0).all()
        assert (p.W_KF[:, upper.T] == 0).all()

    def test_init_range(self):
        p = TsmpLayer(4, 9, heads=3)
        assert p.qf.packed.abs().max() <= 1 / 3
        assert p.w_qt.abs().max() <= 1 / 2
        assert p.fusion_bias.item() == 0.0


class TestProjections:
    def test_zero_neighbour(self):
        p = layer64(4, 6)
        x_i = torch.randn(4, 6, dtype=D)
        _, f_j, _, t_j = spectral_temporal_projections(x_i, torch.zeros(4, 6, dtype=D), p)
        assert not f_j.any() and not t_j.any()

    def test_identity_key_weight(self):
        p = layer64(4, 6, heads=1)
        with torch.no_grad():
            rows, cols = p.kf.rows, p.kf.cols
            p.kf.packed.copy_((rows == cols).to(D)[None])
        x_j = torch.randn(4, 6, dtype=D)
        _, f_j, _, _ = spectral_temporal_projections(x_j, x_j, p)
        assert torch.equal(f_j[0], x_j)

    def test_last_step_perturbation(self):
        p = layer64(4, 6)
        x = torch.randn(4, 6, dtype=D)
        y = x.clone()
        y[:, -1] += 5.0
        _, f_a, _, _ = spectral_temporal_projections(x, x, p)
        _, f_b, _, _ = spectral_temporal_projections(x, y, p)
        assert torch.equal(f_a[..., :-1], f_b[..., :-1])
        assert not torch.equal(f_a[..., -1], f_b[..., -1])

    def test_shapes(self):
        p = layer64(4, 6, heads=3)
        f_i, f_j, t_i, t_j = spectral_temporal_projections(torch.randn(4, 6, dtype=D), torch.randn(4, 6, dtype=D), p)
        assert f_i.shape == f_j.shape == (3, 4, 6)
        assert t_i.shape == t_j.shape == (3, 6, 4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            spectral_temporal_projections(torch.zeros(5, 6), torch.zeros(4, 6), TsmpLayer(4, 6))


class TestCoefficients:
    def test_zero_logits_uniform(self):
        p = layer64(4, 5, heads=1)
        with torch.no_grad():
            p.wf.packed.zero_()
            p.w_t.zero_()
        a_f, a_t = tsmp_coefficients(*spectral_temporal_projections(
            torch.randn(4, 5, dtype=D), torch.randn(4, 5, dtype=D), p), p)
        np.testing.assert_allclose(a_f.detach().numpy(), 0.25, rtol=1e-15)
        expected = np.triu(np.ones((5, 5))) / (np.arange(5) + 1)[None, :]
        np.testing.assert_allclose(a_t[0].detach().numpy(), expected, rtol=1e-15)

    def test_scalar_case(self):
        p = layer64(1, 1, heads=1)
        a_f, a_t = tsmp_coefficients(*spectral_temporal_projections(
            torch.randn(1, 1, dtype=D), torch.randn(1, 1, dtype=D), p), p)
        assert a_f.item() == 1.0 and a_t.item() == 1.0

    def test_two_step_hand_case(self):
        # feed the temporal logits directly: W_T = sqrt(F) I and T_i = I, so logits = T_j
        a, b, c, d = 0.3, -1.2, 2.0, 0.7
        t_j = torch.tensor([[[a, b], [c, d]]], dtype=D)  # (K, T, F) with F = 2
        t_i = torch.eye(2, dtype=D)[None]
        p_t = TsmpLayer(2, 2, heads=1).double()
        with torch.no_grad():
            p_t.w_t.copy_(torch.eye(2, dtype=D)[None] * math.sqrt(2))  # cancels the 1/sqrt(F) scale
        f = torch.zeros(1, 2, 2, dtype=D)
        _, a_t = tsmp_coefficients(f, f, t_i, t_j, p_t)
        col1 = np.exp([b, d]) / np.exp([b, d]).sum()
        expected = np.array([[1.0, col1[0]], [0.0, col1[1]]])
        np.testing.assert_allclose(a_t[0].detach().numpy(), expected, rtol=1e-14)

    def test_causal_mask(self):
        m = causal_time_mask(4)
        np.testing.assert_array_equal(m.numpy(), np.tril(np.ones((4, 4), dtype=bool), -1))

    def test_temporal_columns_are_causal(self):
        """alpha_T[:, t] depends on inputs at steps <= t only."""
        p = layer64(4, 8)
        x_i, x_j = torch.randn(4, 8, dtype=D), torch.randn(4, 8, dtype=D)
        t = 4
        y_i, y_j = x_i.clone(), x_j.clone()
        y_i[:, t + 1:] = torch.randn(4, 8 - t - 1, dtype=D)
        y_j[:, t + 1:] = 0.0
        _, a = tsmp_coefficients(*spectral_temporal_projections(x_i, x_j, p), p)
        _, b = tsmp_coefficients(*spectral_temporal_projections(y_i, y_j, p), p)
        assert torch.equal(a[..., :t + 1], b[..., :t + 1])


class TestAggregate:
    def test_matches_edgewise_reference(self):
        p = layer64(4, 8, heads=2)
        g = build_graph(np.random.default_rng(1).random((5, 2)), "knn", 2)
        x = torch.randn(5, 4, 8, dtype=D)
        out = mask_passing_aggregate(x, g, p)
        ref = reference_aggregate(x, g, p)
        torch.testing.assert_close(out.pre_activation, ref, rtol=1e-12, atol=1e-12)
        torch.testing.assert_close(out.gate, torch.sigmoid(ref), rtol=1e-12, atol=1e-12)

    def test_batched_matches_single(self):
        p = layer64(4, 8)
        g = random_graph(3)
        x = torch.randn(2, 3, 4, 8, dtype=D)
        batched = mask_passing_aggregate(x, g, p).gate
        for b in range(2):
            torch.testing.assert_close(batched[b], mask_passing_aggregate(x[b], g, p).gate, rtol=1e-13, atol=1e-13)

    def test_zero_neighbour_gives_half_gate(self):
        p = layer64(3, 4)
        g = TactileGraph(np.zeros((2, 2)), [(1, 0)])
        x = torch.zeros(2, 3, 4, dtype=D)
        x[0] = torch.randn(3, 4, dtype=D)
        out = mask_passing_aggregate(x, g, p)
        assert not out.pre_activation.any()
        assert (out.gate == 0.5).all()

    def test_scalar_contribution(self):
        p = layer64(1, 1, heads=1)
        with torch.no_grad():
            p.w_v.fill_(3.0)
            p.fusion_weight.fill_(1.0)
        g = TactileGraph(np.zeros((2, 2)), [(1, 0)])
        x = torch.tensor([[[0.7]], [[2.0]]], dtype=D)
        out = mask_passing_aggregate(x, g, p)
        assert out.pre_activation[0].item() == 6.0
        assert out.pre_activation[1].item() == 0.0  # node 1 has no in-neighbours

    def test_identical_heads_average_to_single_head(self):
        one = layer64(3, 5, heads=1, seed=3)
        two = TsmpLayer(3, 5, heads=2).double()
        with torch.no_grad():
            for name in ("qf.packed", "kf.packed", "wf.packed", "w_qt", "w_kt", "w_t", "w_v"):
                src = one.get_parameter(name)
                two.get_parameter(name).copy_(torch.cat([src, src]))
            two.fusion_weight.fill_(0.5)
            one.fusion_weight.fill_(1.0)
        g = random_graph(3)
        x = torch.randn(3, 3, 5, dtype=D)
        torch.testing.assert_close(mask_passing_aggregate(x, g, two).gate,
                                   mask_passing_aggregate(x, g, one).gate, rtol=1e-13, atol=1e-13)

    def test_isolated_node_gate_is_sigmoid_bias(self):
        p = layer64(2, 4)
        with torch.no_grad():
            p.fusion_bias.fill_(0.8)
        g = TactileGraph(np.zeros((3, 2)), [(0, 1)])
        out = mask_passing_aggregate(torch.randn(3, 2, 4, dtype=D), g, p)
        torch.testing.assert_close(out.gate[2], torch.full((2, 4), torch.sigmoid(torch.tensor(0.8, dtype=D)).item(), dtype=D))

    def test_unit_gate_hook(self):
        p = layer64(2, 4)
        out = mask_passing_aggregate(torch.randn(3, 2, 4, dtype=D), random_graph(3), p, unit_gate=True)
        assert (out.gate == 1).all()

    def test_permutation_equivariance(self):
        p = layer64(4, 6)
        g = build_graph(np.random.default_rng(5).random((5, 2)), "knn", 2)
        x = torch.randn(5, 4, 6, dtype=D)
        perm = np.array([3, 0, 4, 1, 2])
        out = mask_passing_aggregate(x, g, p).gate
        out_p = mask_passing_aggregate(x[perm], g.permuted(perm), p).gate
        torch.testing.assert_close(out_p, out[perm], rtol=1e-12, atol=1e-12)

    @given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 8), st.integers(1, 3), st.integers(0, 10 ** 6))
    def test_invariants_property(self, n, f, t, heads, seed):
        torch.manual_seed(seed)
        p = TsmpLayer(f, t, heads).double()
        g = random_graph(n, seed)
        x = torch.randn(n, f, t, dtype=D)
        out = mask_passing_aggregate(x, g, p)
        assert isinstance(out, MaskPassingOutput)
        if g.edges:
            torch.testing.assert_close(out.alpha_F.sum(-1), torch.ones_like(out.alpha_F.sum(-1)), atol=1e-6, rtol=0)
            lower = torch.tril(torch.ones(t, t, dtype=torch.bool), -1)
            assert (out.alpha_T[..., lower] == 0).all()
            torch.testing.assert_close(out.alpha_T.sum(-2), torch.ones_like(out.alpha_T.sum(-2)), atol=1e-6, rtol=0)
        assert ((out.gate > 0) & (out.gate < 1)).all()


class TestApplyGate:
    def test_half_gate(self):
        x = torch.randn(3, 4, dtype=D)
        assert torch.equal(apply_gate(x, torch.full((3, 4), 0.5, dtype=D)), x / 2)

    def test_zero_input(self):
        assert not apply_gate(torch.zeros(3, 4), torch.rand(3, 4)).any()

    def test_strict_shrink(self):
        p = layer64(4, 6)
        x = torch.randn(3, 4, 6, dtype=D)
        out = mask_passing_aggregate(x, random_graph(3), p)
        assert (apply_gate(x, out).abs() < x.abs()).all()


class TestGlobalSpatialAttention:
    def test_zero_params_uniform(self):
        p = GlobalSpatialAttention(5, 3, 4).double()
        s = global_spatial_attention(torch.randn(5, 3, 4, dtype=D), p)
        np.testing.assert_allclose(s.detach().numpy(), 0.2, rtol=1e-15)

    def test_single_node(self):
        p = GlobalSpatialAttention(1, 3, 4).double()
        with torch.no_grad():
            p.V_s.fill_(2.0)
        assert global_spatial_attention(torch.randn(1, 3, 4, dtype=D), p).item() == 1.0

    def test_scalar_two_node_hand_case(self):
        p = GlobalSpatialAttention(2, 1, 1).double()
        vals = dict(W_1=0.5, W_2=-1.5, W_3=2.0, U_1=0.3, U_2=1.1, U_3=-0.7)
        v_s = np.array([[1.0, -2.0], [0.5, 3.0]])
        b_s = np.array([[0.1, 0.2], [-0.3, 0.4]])
        with torch.no_grad():
            for k, v in vals.items():
                getattr(p, k).fill_(v)
            p.V_s.copy_(torch.tensor(v_s))
            p.b_s.copy_(torch.tensor(b_s))
        x = np.array([0.9, -1.3])
        first = np.outer(x * vals["W_1"] * vals["W_2"], x * vals["W_3"])
        second = np.outer(x * vals["U_1"] * vals["U_2"], x * vals["U_3"])
        s = v_s @ (1 / (1 + np.exp(-(first + second + b_s))))
        expected = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
        out = global_spatial_attention(torch.tensor(x).reshape(2, 1, 1), p)
        np.testing.assert_allclose(out.detach().numpy(), expected, rtol=1e-13)

    @given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 6), st.integers(0, 10 ** 6))
    def test_rows_stochastic(self, n, c, t, seed):
        torch.manual_seed(seed)
        p = GlobalSpatialAttention(n, c, t).double()
        with torch.no_grad():
            p.V_s.normal_()
            p.b_s.normal_()
        s = global_spatial_attention(torch.randn(2, n, c, t, dtype=D), p)
        torch.testing.assert_close(s.sum(-1), torch.ones(2, n, dtype=D), atol=1e-6, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            global_spatial_attention(torch.zeros(3, 2, 4), GlobalSpatialAttention(3, 2, 5))


class TestGradients:
    """Analytic gradients against finite differences, N=3, F=4, T=8, K=2, float64."""

    def setup_method(self):
        torch.manual_seed(11)
        self.p = TsmpLayer(4, 8, heads=2).double()
        self.g = random_graph(3, 2)

    def test_projections(self):
        x_i = torch.randn(4, 8, dtype=D, requires_grad=True)
        x_j = torch.randn(4, 8, dtype=D, requires_grad=True)
        params = (self.p.qf.packed, self.p.kf.packed, self.p.w_qt, self.p.w_kt)

        def fn(a, b, *_):
            return spectral_temporal_projections(a, b, self.p)
        assert gradcheck(fn, (x_i, x_j) + params, eps=1e-6, atol=1e-8, rtol=1e-4)

    def test_coefficients(self):
        proj = [t.detach().requires_grad_() for t in spectral_temporal_projections(
            torch.randn(4, 8, dtype=D), torch.randn(4, 8, dtype=D), self.p)]

        def fn(*args):
            return tsmp_coefficients(*args[:4], self.p)
        assert gradcheck(fn, tuple(proj) + (self.p.wf.packed, self.p.w_t), eps=1e-6, atol=1e-8, rtol=1e-4)

    def test_aggregate(self):
        x = torch.randn(3, 4, 8, dtype=D, requires_grad=True)

        def fn(inp, *_):
            return mask_passing_aggregate(inp, self.g, self.p).gate
        assert gradcheck(fn, (x,) + tuple(self.p.parameters()), eps=1e-6, atol=1e-8, rtol=1e-4)

    def test_apply_gate(self):
        x = torch.randn(3, 4, 8, dtype=D, requires_grad=True)
        gate = torch.rand(3, 4, 8, dtype=D, requires_grad=True)
        assert gradcheck(apply_gate, (x, gate))

    def test_global_spatial_attention(self):
        p = GlobalSpatialAttention(3, 4, 8).double()
        with torch.no_grad():
            p.V_s.normal_()
            p.b_s.normal_()
        x = torch.randn(3, 4, 8, dtype=D, requires_grad=True)

        def fn(inp, *_):
            return global_spatial_attention(inp, p)
        assert gradcheck(fn, (x,) + tuple(p.parameters()), eps=1e-6, atol=1e-8, rtol=1e-4)
