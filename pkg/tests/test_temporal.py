"""Temporal blocks: discretization, scans, block behavior, complexity."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from vidanim.temporal import (
    SSMParams,
    TemporalMambaBlock,
    TemporalTransformerBlock,
    complexity_probe,
    discretize,
    recurrence_scan_parallel,
    recurrence_scan_sequential,
    ssm_scan_parallel,
    ssm_scan_sequential,
    write_probe_csv,
)


class TestDiscretize:
    def test_exact_half(self):
        a_bar, b_bar = discretize(-1.0, 1.0, math.log(2.0))
        assert float(a_bar) == pytest.approx(0.5, abs=1e-12)
        # (0.5 - 1) / (-1) = 0.5
        assert float(b_bar) == pytest.approx(0.5, abs=1e-12)

    def test_zero_hold_limit_a_to_zero(self):
        a_bar, b_bar = discretize(0.0, 1.0, 1.0)
        assert float(a_bar) == 1.0
        assert float(b_bar) == 1.0

    def test_tiny_delta_limit(self):
        a_bar, b_bar = discretize(-2.0, 1.0, 1e-9)
        assert float(a_bar) == pytest.approx(1.0, abs=1e-8)
        assert float(b_bar) == pytest.approx(0.0, abs=1e-8)

    def test_matches_series_near_threshold(self):
        # Values just above the limit threshold agree with the limit form.
        a = torch.tensor(-1e-3, dtype=torch.float64)
        delta = torch.tensor(2e-3, dtype=torch.float64)
        _, b_bar = discretize(a, torch.tensor(1.0, dtype=torch.float64), delta)
        assert float(b_bar) == pytest.approx(float(delta), rel=1e-5)

    def test_rejects_nonpositive_delta(self):
        with pytest.raises(ValueError):
            discretize(-1.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            discretize(-1.0, 1.0, -0.5)

    def test_rejects_positive_a(self):
        with pytest.raises(ValueError):
            discretize(0.5, 1.0, 1.0)


class TestRecurrenceScans:
    def test_cumulative_sum_case(self):
        a = torch.ones(3)
        b = torch.tensor([1.0, 2.0, 3.0])
        assert recurrence_scan_sequential(a, b).tolist() == [1.0, 3.0, 6.0]
        assert recurrence_scan_parallel(a, b).tolist() == [1.0, 3.0, 6.0]

    def test_geometric_impulse_response(self):
        a = torch.full((3,), 0.5)
        b = torch.tensor([1.0, 0.0, 0.0])
        assert recurrence_scan_sequential(a, b).tolist() == [1.0, 0.5, 0.25]

    def test_memoryless_when_a_zero(self):
        a = torch.zeros(5)
        b = torch.randn(5)
        torch.testing.assert_close(recurrence_scan_parallel(a, b), b)

    def test_length_one_parallel_equals_sequential(self):
        a = torch.randn(1, 3, 2)
        b = torch.randn(1, 3, 2)
        assert torch.equal(
            recurrence_scan_parallel(a, b, dim=0),
            recurrence_scan_sequential(a, b, dim=0),
        )

    def test_length_zero_rejected(self):
        with pytest.raises(ValueError):
            recurrence_scan_sequential(torch.zeros(0), torch.zeros(0))
        with pytest.raises(ValueError):
            recurrence_scan_parallel(torch.zeros(0), torch.zeros(0))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            recurrence_scan_parallel(torch.zeros(3), torch.zeros(4))


def unrolled_kernel_oracle(params: SSMParams, x: torch.Tensor) -> np.ndarray:
    """Direct O(S^2) evaluation of the time-varying system.

    Materializes the lower-triangular kernel
    K[k, j] = C_k . (prod_{i=j+1..k} Abar_i) Bbar_j and applies it,
    recomputing every stream from the definitions with plain numpy.
    """
    xv = x.detach().numpy().astype(np.float64)
    w_b = params.w_b.detach().numpy().astype(np.float64)
    w_c = params.w_c.detach().numpy().astype(np.float64)
    w_d = params.w_delta.detach().numpy().astype(np.float64)
    bias = params.delta_bias.detach().numpy().astype(np.float64)
    a = -np.exp(params.a_log.detach().numpy().astype(np.float64))  # (D, N)
    s_len, d = xv.shape
    n = a.shape[1]
    b_tok = xv @ w_b.T  # (S, N)
    c_tok = xv @ w_c.T
    delta = np.logaddexp(0.0, xv @ w_d.T + bias)  # softplus, (S, D)
    a_bar = np.exp(delta[:, :, None] * a)  # (S, D, N)
    b_bar = (a_bar - 1.0) / a * b_tok[:, None, :]
    y = np.zeros((s_len, d))
    for k in range(s_len):
        for j in range(k + 1):
            decay = np.ones((d, n))
            for i in range(j + 1, k + 1):
                decay = decay * a_bar[i]
            contrib = decay * b_bar[j] * xv[j][:, None]  # (D, N)
            y[k] += contrib @ c_tok[k]
    return y


class TestSelectiveScan:
    def test_matches_unrolled_kernel_oracle(self):
        gen = torch.Generator().manual_seed(0)
        params = SSMParams.random(gen, channels=3, state_size=4)
        x = torch.randn(64, 3, generator=gen, dtype=torch.float64)
        y = ssm_scan_sequential(params, x).numpy()
        oracle = unrolled_kernel_oracle(params, x)
        rel = np.abs(y - oracle).max() / max(np.abs(oracle).max(), 1e-12)
        assert rel < 1e-5

    @pytest.mark.parametrize("length", [1, 8, 64, 257])
    def test_parallel_matches_sequential(self, length):
        gen = torch.Generator().manual_seed(length)
        for trial in range(20):
            params = SSMParams.random(gen, channels=4, state_size=4)
            x = torch.randn(length, 4, generator=gen, dtype=torch.float64)
            ys = ssm_scan_sequential(params, x)
            yp = ssm_scan_parallel(params, x)
            rel = float((ys - yp).abs().max() / ys.abs().max().clamp(min=1e-12))
            assert rel < 1e-5

    def test_batched_leading_dims(self):
        gen = torch.Generator().manual_seed(1)
        params = SSMParams.random(gen, channels=4, state_size=3)
        x = torch.randn(5, 7, 4, generator=gen, dtype=torch.float64)
        y_batch = ssm_scan_parallel(params, x)
        for i in range(5):
            torch.testing.assert_close(y_batch[i], ssm_scan_parallel(params, x[i]))

    def test_rejects_empty_and_mismatched(self):
        gen = torch.Generator().manual_seed(2)
        params = SSMParams.random(gen, channels=4, state_size=3)
        with pytest.raises(ValueError):
            ssm_scan_sequential(params, torch.zeros(0, 4, dtype=torch.float64))
        with pytest.raises(ValueError):
            ssm_scan_sequential(params, torch.zeros(5, 3, dtype=torch.float64))

    def test_gradients_match_finite_differences(self):
        # Analytic gradients of every A/B/C/delta parameter vs. central
        # differences on a small instance, in float64.
        gen = torch.Generator().manual_seed(3)
        base = SSMParams.random(gen, channels=3, state_size=3)
        x = torch.randn(6, 3, generator=gen, dtype=torch.float64)
        w = torch.randn(6, 3, generator=gen, dtype=torch.float64)
        tensors = {
            "a_log": base.a_log.clone().requires_grad_(True),
            "w_b": base.w_b.clone().requires_grad_(True),
            "w_c": base.w_c.clone().requires_grad_(True),
            "w_delta": base.w_delta.clone().requires_grad_(True),
            "delta_bias": base.delta_bias.clone().requires_grad_(True),
        }

        def loss_with(values: dict) -> torch.Tensor:
            params = SSMParams(**values)
            return (ssm_scan_parallel(params, x) * w).sum()

        loss = loss_with(tensors)
        loss.backward()
        step = 1e-4
        for name, tensor in tensors.items():
            analytic = tensor.grad
            flat = tensor.detach().clone().reshape(-1)
            for idx in range(flat.numel()):
                plus = flat.clone()
                plus[idx] += step
                minus = flat.clone()
                minus[idx] -= step
                values_p = {
                    k: (plus.reshape(tensor.shape) if k == name else v.detach())
                    for k, v in tensors.items()
                }
                values_m = {
                    k: (minus.reshape(tensor.shape) if k == name else v.detach())
                    for k, v in tensors.items()
                }
                fd = (loss_with(values_p) - loss_with(values_m)) / (2 * step)
                an = analytic.reshape(-1)[idx]
                denom = max(abs(float(fd)), abs(float(an)), 1e-6)
                assert abs(float(an - fd)) / denom < 1e-3, (name, idx)


class TestTemporalMambaBlock:
    def test_zero_output_projection_is_identity(self):
        block = TemporalMambaBlock(8, out_init_scale=0.0)
        x = torch.randn(5, 8, 2, 3)
        assert torch.equal(block(x), x)

    def test_shape_preserving_and_finite(self):
        block = TemporalMambaBlock(8, out_init_scale=0.05)
        for shape in [(1, 8, 2, 2), (7, 8, 3, 2), (2, 5, 8, 2, 2)]:
            x = torch.randn(*shape)
            y = block(x)
            assert y.shape == x.shape
            assert torch.isfinite(y).all()

    def test_single_step_hand_evaluation(self):
        # S=1: both directions coincide, so the residual branch carries
        # out_proj(2 * ssm(x) * silu(gate)).
        torch.manual_seed(0)
        block = TemporalMambaBlock(6, state_size=3, out_init_scale=0.1)
        x = torch.randn(1, 6, 1, 1)
        seq = x.permute(2, 3, 0, 1).reshape(1, 1, 6)
        u = block.norm(seq)
        xb, gate = block.in_proj(u).chunk(2, dim=-1)
        y_single = ssm_scan_sequential(block.ssm_params, xb)
        expected_seq = seq + block.out_proj(
            (2.0 * y_single) * F.silu(gate)
        )
        expected = expected_seq.reshape(1, 1, 1, 6).permute(2, 3, 0, 1)
        torch.testing.assert_close(block(x), expected, rtol=1e-5, atol=1e-6)

    def test_commutes_with_time_reversal(self):
        torch.manual_seed(1)
        block = TemporalMambaBlock(8, out_init_scale=0.05)
        x = torch.randn(9, 8, 2, 2)
        rev_then_block = block(x.flip(0))
        block_then_rev = block(x).flip(0)
        rel = float(
            ((rev_then_block - block_then_rev).abs().max()
             / block_then_rev.abs().max()).detach()
        )
        assert rel < 1e-5

    def test_channel_mismatch_rejected(self):
        block = TemporalMambaBlock(8)
        with pytest.raises(ValueError, match="channel"):
            block(torch.randn(4, 7, 2, 2))

    def test_sequential_and_parallel_block_agree(self):
        torch.manual_seed(2)
        bp = TemporalMambaBlock(8, out_init_scale=0.05, scan="parallel")
        bs = TemporalMambaBlock(8, out_init_scale=0.05, scan="sequential")
        bs.load_state_dict(bp.state_dict())
        x = torch.randn(6, 8, 2, 2)
        torch.testing.assert_close(bp(x), bs(x), rtol=1e-5, atol=1e-6)


class TestTemporalTransformerBlock:
    def test_zero_output_projections_identity(self):
        block = TemporalTransformerBlock(8, num_heads=2, out_init_scale=0.0)
        x = torch.randn(5, 8, 2, 2)
        assert torch.equal(block(x), x)

    def test_singleton_softmax(self):
        # S=1: the attention weight is exactly 1, so the attention branch
        # reduces to the value/output projections of the single token.
        torch.manual_seed(0)
        block = TemporalTransformerBlock(8, num_heads=2, out_init_scale=0.1)
        x = torch.randn(1, 8, 1, 1)
        seq = x.permute(2, 3, 0, 1).reshape(1, 1, 8)
        a_in = block.norm_attn(seq) + block.pos_emb[:1]
        qkv = block.qkv(a_in)
        v = qkv[..., 16:]
        after_attn = seq + block.attn_out(v)
        expected = after_attn + block.ffn_out(
            F.silu(block.ffn_in(block.norm_ffn(after_attn)))
        )
        torch.testing.assert_close(
            block(x), expected.reshape(1, 1, 1, 8).permute(2, 3, 0, 1),
            rtol=1e-5, atol=1e-6,
        )

    def test_uniform_attention_yields_value_mean(self):
        # Identical keys force uniform attention: every position receives
        # the mean of the values.
        torch.manual_seed(1)
        c, heads, s = 8, 2, 6
        block = TemporalTransformerBlock(c, num_heads=heads, out_init_scale=0.1)
        with torch.no_grad():
            block.qkv.weight[c : 2 * c].zero_()
            block.qkv.bias[c : 2 * c].zero_()
            block.ffn_out.weight.zero_()
            block.ffn_out.bias.zero_()
        x = torch.randn(s, c, 1, 1)
        seq = x.permute(2, 3, 0, 1).reshape(1, s, c)
        a_in = block.norm_attn(seq) + block.pos_emb[:s]
        v = block.qkv(a_in)[..., 2 * c :]
        mean_v = v.mean(dim=1, keepdim=True).expand_as(v)
        expected = seq + block.attn_out(mean_v)
        got = block(x).permute(2, 3, 0, 1).reshape(1, s, c)
        assert float((got - expected).abs().max()) < 1e-6

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError):
            TemporalTransformerBlock(10, num_heads=4)

    def test_sequence_beyond_positions_rejected(self):
        block = TemporalTransformerBlock(8, num_heads=2, max_positions=4)
        with pytest.raises(ValueError, match="max_positions"):
            block(torch.randn(5, 8, 2, 2))

    def test_shape_preserving_and_finite(self):
        block = TemporalTransformerBlock(8, num_heads=2)
        for shape in [(1, 8, 2, 2), (7, 8, 3, 2), (2, 5, 8, 2, 2)]:
            x = torch.randn(*shape)
            y = block(x)
            assert y.shape == x.shape
            assert torch.isfinite(y).all()


class TestComplexityProbe:
    def test_attention_score_term_quadratic(self):
        rows = complexity_probe("transformer", [32, 64])
        assert rows[1].activation_elems == 4 * rows[0].activation_elems

    def test_ssm_state_term_linear(self):
        rows = complexity_probe("mamba", [32, 64])
        assert rows[1].activation_elems == 2 * rows[0].activation_elems

    def test_requires_two_lengths(self):
        with pytest.raises(ValueError):
            complexity_probe("mamba", [32])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            complexity_probe("rnn", [8, 16])

    def test_csv_format(self, tmp_path):
        rows = complexity_probe("attention", [8, 16], channels=16)
        path = tmp_path / "probe.csv"
        write_probe_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "length,block,activation_elems,macs"
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "8" and first[1] == "transformer"

    @given(
        s=st.integers(1, 6),
        c=st.sampled_from([4, 8]),
        h=st.integers(1, 3),
        w=st.integers(1, 3),
    )
    @settings(max_examples=10, deadline=None)
    def test_blocks_shape_preserving_property(self, s, c, h, w):
        x = torch.randn(s, c, h, w)
        mamba = TemporalMambaBlock(c, state_size=2)
        attn = TemporalTransformerBlock(c, num_heads=2, max_positions=8)
        assert mamba(x).shape == x.shape
        assert attn(x).shape == x.shape
