import math

import pytest
import torch

from mimic_el.encoders import DTYPE, FeatureBundle
from mimic_el.interaction import (
    InteractionWeights,
    cmfu_alpha,
    cmfu_fuse,
    cmfu_score,
    collate_bundles,
    combined_score,
    pairwise_score_matrix,
    score_matrices,
    tglu_attention,
    tglu_score,
    vdlu_dual,
    vdlu_score,
)

from conftest import TINY, random_bundle, tiny_weights


def manual_layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    mean = float(x.mean())
    var = float(((x - mean) ** 2).mean())
    return gain * (x - mean) / math.sqrt(var + 1e-5) + bias


class TestTglu:
    def test_identical_globals_score_one(self, weights):
        m, e = random_bundle(1), random_bundle(2)
        e.t_G = m.t_G.clone()
        e.T_L[0] = m.t_G
        _, g2g, _ = tglu_score(m, e, weights)
        assert g2g == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_globals_score_zero(self, weights):
        m, e = random_bundle(1), random_bundle(2)
        m.t_G = torch.tensor([1.0, 0, 0, 0, 0, 0, 0, 0], dtype=DTYPE)
        e.t_G = torch.tensor([0, 2.0, 0, 0, 0, 0, 0, 0], dtype=DTYPE)
        m.T_L[0], e.T_L[0] = m.t_G, e.t_G
        _, g2g, _ = tglu_score(m, e, weights)
        assert g2g == pytest.approx(0.0, abs=1e-12)

    def test_zero_norm_guard_scores_zero(self, weights):
        m, e = random_bundle(1), random_bundle(2)
        m.t_G = torch.zeros(8, dtype=DTYPE)
        m.T_L[0] = m.t_G
        _, g2g, _ = tglu_score(m, e, weights)
        assert g2g == 0.0

    def test_g2g_invariant_to_positive_scaling(self, weights):
        m, e = random_bundle(3), random_bundle(4)
        _, g2g, _ = tglu_score(m, e, weights)
        m2 = FeatureBundle(t_G=m.t_G * 7.5, T_L=m.T_L, v_G=m.v_G, V_L=m.V_L)
        e2 = FeatureBundle(t_G=e.t_G * 0.03, T_L=e.T_L, v_G=e.v_G, V_L=e.V_L)
        _, g2g_scaled, _ = tglu_score(m2, e2, weights)
        assert g2g_scaled == pytest.approx(g2g, abs=1e-12)

    def test_attention_rows_are_distributions(self, weights):
        m, e = random_bundle(5, n_text=4), random_bundle(6, n_text=3)
        attn = tglu_attention(m, e, weights)
        assert attn.shape == (3, 4)
        assert (attn >= 0).all()
        assert torch.allclose(attn.sum(dim=-1), torch.ones(3, dtype=DTYPE), atol=1e-6)

    def test_unit_score_is_mean_of_subscores(self, weights):
        m, e = random_bundle(7), random_bundle(8)
        s_t, g2g, g2l = tglu_score(m, e, weights)
        assert s_t == pytest.approx((g2g + g2l) / 2, abs=1e-12)


class TestVdlu:
    def test_zero_gate_collapse(self, weights):
        m, e = random_bundle(9), random_bundle(10)
        weights.vdlu_e2m.gate.weight.data.zero_()
        weights.vdlu_e2m.gate.bias.data.zero_()
        with torch.no_grad():
            score = vdlu_dual(e.v_G, m.v_G, m.V_L, weights.vdlu_e2m)
            expected = manual_layer_norm(
                m.v_G, weights.vdlu_e2m.norm_out.weight, weights.vdlu_e2m.norm_out.bias
            ) @ e.v_G
        assert float(score) == pytest.approx(float(expected), abs=1e-12)

    def test_zero_viewer_global_scores_zero(self, weights):
        m = random_bundle(11)
        zero = torch.zeros(TINY["d_v"], dtype=DTYPE)
        with torch.no_grad():
            score = vdlu_dual(zero, m.v_G, m.V_L, weights.vdlu_e2m)
        assert float(score) == 0.0

    def test_gate_value_strictly_inside_unit_interval(self, weights):
        m, e = random_bundle(12), random_bundle(13)
        with torch.no_grad():
            pooled = m.V_L.mean(dim=0)
            fused = weights.vdlu_e2m.fuse(weights.vdlu_e2m.norm_in(pooled + e.v_G))
            gate = torch.tanh(weights.vdlu_e2m.gate(fused))
        assert -1.0 < float(gate) < 1.0

    def test_symmetric_inputs_with_shared_direction_weights(self, weights):
        weights.vdlu_m2e.load_state_dict(weights.vdlu_e2m.state_dict())
        m = random_bundle(14)
        s_v, e2m, m2e = vdlu_score(m, m, weights)
        assert e2m == pytest.approx(m2e, abs=1e-12)
        assert s_v == pytest.approx(e2m, abs=1e-12)

    def test_zero_images_finite(self, weights):
        zero_local = torch.zeros(3, TINY["d_v"], dtype=DTYPE)
        m = random_bundle(15)
        m.v_G = zero_local[0]
        m.V_L = zero_local
        e = random_bundle(16)
        e.v_G = zero_local[0].clone()
        e.V_L = zero_local.clone()
        s_v, e2m, m2e = vdlu_score(m, e, weights)
        assert math.isfinite(s_v) and math.isfinite(e2m) and math.isfinite(m2e)


class TestCmfu:
    def test_identical_value_rows_aggregate_to_that_row(self):
        row = torch.tensor([0.3, -1.2, 0.5, 2.0], dtype=DTYPE)
        h_vision = row.repeat(5, 1)
        h_text = torch.tensor([1.0, 2.0, -0.5, 0.1], dtype=DTYPE)
        alpha = cmfu_alpha(h_text, h_vision)
        assert torch.allclose(alpha, torch.full((5,), 0.2, dtype=DTYPE), atol=1e-12)
        assert torch.allclose(alpha @ h_vision, row, atol=1e-12)

    def test_zero_text_and_zero_gate_bias_reduces_to_normed_aggregate(self, weights):
        weights.cmfu_gate.bias.data.zero_()
        h_text = torch.zeros(TINY["d_c"], dtype=DTYPE)
        h_vision = torch.randn(4, TINY["d_c"], generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        fused = cmfu_fuse(h_text, h_vision, weights)
        aggregated = cmfu_alpha(h_text, h_vision) @ h_vision
        expected = manual_layer_norm(aggregated, weights.cmfu_norm.weight, weights.cmfu_norm.bias)
        assert torch.allclose(fused, expected, atol=1e-12)

    def test_self_score_nonnegative(self, weights):
        m = random_bundle(17)
        assert cmfu_score(m, m, weights) >= 0.0

    def test_constructed_zero_context_scores_zero(self, weights):
        # Constant fused vectors layer-normalize to the (zero) bias.
        weights.cmfu_text.weight.data.zero_()
        weights.cmfu_text.bias.data.zero_()
        weights.cmfu_vision.weight.data.zero_()
        weights.cmfu_vision.bias.data.fill_(0.7)
        weights.cmfu_gate.bias.data.zero_()
        m, e = random_bundle(18), random_bundle(19)
        assert cmfu_score(m, e, weights) == pytest.approx(0.0, abs=1e-12)


class TestCombinedScore:
    def test_breakdown_identities(self, weights):
        m, e = random_bundle(20), random_bundle(21)
        sb = combined_score(m, e, weights)
        assert sb.s_t == pytest.approx((sb.s_t_g2g + sb.s_t_g2l) / 2, abs=1e-9)
        assert sb.s_v == pytest.approx((sb.s_v_e2m + sb.s_v_m2e) / 2, abs=1e-9)
        assert sb.s == pytest.approx((sb.s_t + sb.s_v + sb.s_c) / 3, abs=1e-9)
        assert -1.0 <= sb.s_t_g2g <= 1.0

    def test_unit_subsets_average_enabled_scores_only(self, weights):
        m, e = random_bundle(22), random_bundle(23)
        full = combined_score(m, e, weights)
        only_text = combined_score(m, e, weights, units=frozenset({"tglu"}))
        assert only_text.s == pytest.approx(full.s_t, abs=1e-12)
        two = combined_score(m, e, weights, units=frozenset({"tglu", "vdlu"}))
        assert two.s == pytest.approx((full.s_t + full.s_v) / 2, abs=1e-12)

    def test_empty_or_unknown_units_rejected(self, weights):
        m, e = random_bundle(24), random_bundle(25)
        with pytest.raises(ValueError):
            combined_score(m, e, weights, units=frozenset())
        with pytest.raises(ValueError):
            combined_score(m, e, weights, units=frozenset({"gnn"}))


class TestPairwiseScoring:
    def test_degenerate_batch_equals_combined(self, weights):
        m, e = random_bundle(26), random_bundle(27)
        s_t, s_v, s_c, s = pairwise_score_matrix([m], [e], weights)
        sb = combined_score(m, e, weights)
        assert float(s[0, 0]) == pytest.approx(sb.s, abs=1e-12)
        assert float(s_t[0, 0]) == pytest.approx(sb.s_t, abs=1e-12)
        assert float(s_v[0, 0]) == pytest.approx(sb.s_v, abs=1e-12)
        assert float(s_c[0, 0]) == pytest.approx(sb.s_c, abs=1e-12)

    def test_matrix_matches_per_pair_with_ragged_lengths(self, weights):
        mentions = [random_bundle(100 + i, n_text=2 + i % 3, n_patches=3) for i in range(3)]
        entities = [random_bundle(200 + j, n_text=4 - j % 2, n_patches=3) for j in range(4)]
        s_t, s_v, s_c, s = pairwise_score_matrix(mentions, entities, weights)
        for i, m in enumerate(mentions):
            for j, e in enumerate(entities):
                sb = combined_score(m, e, weights)
                assert float(s[i, j]) == pytest.approx(sb.s, abs=1e-5)
                assert float(s_t[i, j]) == pytest.approx(sb.s_t, abs=1e-5)
                assert float(s_v[i, j]) == pytest.approx(sb.s_v, abs=1e-5)
                assert float(s_c[i, j]) == pytest.approx(sb.s_c, abs=1e-5)

    def test_permutation_equivariance(self, weights):
        mentions = [random_bundle(300 + i) for i in range(3)]
        entities = [random_bundle(400 + j) for j in range(4)]
        _, _, _, s = pairwise_score_matrix(mentions, entities, weights)
        row_perm, col_perm = [2, 0, 1], [3, 1, 0, 2]
        _, _, _, s_perm = pairwise_score_matrix(
            [mentions[i] for i in row_perm], [entities[j] for j in col_perm], weights
        )
        assert torch.allclose(s_perm, s[row_perm][:, col_perm], atol=1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_batched_equals_per_pair_across_seeds(self, seed):
        w = tiny_weights(seed)
        mentions = [random_bundle(9000 + 4 * seed + i, n_text=2 + (seed + i) % 3) for i in range(2)]
        entities = [random_bundle(9002 + 4 * seed + j, n_text=2 + (seed + j) % 2) for j in range(2)]
        _, _, _, s = pairwise_score_matrix(mentions, entities, w)
        for i, m in enumerate(mentions):
            for j, e in enumerate(entities):
                assert float(s[i, j]) == pytest.approx(combined_score(m, e, w).s, abs=1e-5)

    def test_disabled_units_not_computed_and_average_adjusts(self, weights):
        mentions = [random_bundle(500 + i) for i in range(2)]
        entities = [random_bundle(600 + j) for j in range(2)]
        mb, eb = collate_bundles(mentions), collate_bundles(entities)
        full = score_matrices(mb, eb, weights)
        partial = score_matrices(mb, eb, weights, units=frozenset({"vdlu", "cmfu"}))
        assert partial.s_t is None
        assert torch.allclose(partial.s, (full.s_v + full.s_c) / 2, atol=1e-12)


class TestWeights:
    def test_seeded_init_reproducible(self):
        a, b = tiny_weights(123), tiny_weights(123)
        for (name_a, p_a), (_, p_b) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p_a, p_b), name_a

    def test_init_bounds_and_layer_norm_defaults(self):
        w = tiny_weights(5)
        bound = 1.0 / math.sqrt(w.tglu_q.in_features)
        assert float(w.tglu_q.weight.abs().max()) <= bound
        assert torch.equal(w.tglu_norm.weight, torch.ones(TINY["d_t"], dtype=DTYPE))
        assert torch.equal(w.tglu_norm.bias, torch.zeros(TINY["d_t"], dtype=DTYPE))

    def test_expected_parameter_shapes(self):
        w = tiny_weights(0)
        assert w.tglu_q.weight.shape == (4, 8)
        assert w.tglu_proj.bias.shape == (4,)
        assert w.vdlu_e2m.gate.weight.shape == (1, 6)
        assert w.cmfu_vision.weight.shape == (4, 6)
        assert w.cmfu_gate.weight.shape == (4, 4)
