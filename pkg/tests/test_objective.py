import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mimic_el.encoders import DTYPE
from mimic_el.interaction import ScoreMatrices
from mimic_el.objective import info_nce_loss, total_objective


def matrices_from(s_t, s_v, s_c):
    s = (s_t + s_v + s_c) / 3
    return ScoreMatrices(s_t=s_t, s_v=s_v, s_c=s_c, s=s)


def random_matrix(seed: int, rows: int = 3, cols: int = 3) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(rows, cols, generator=g, dtype=DTYPE)


class TestInfoNce:
    def test_uniform_scores_give_log_batch_size(self):
        scores = torch.full((4, 4), 0.37, dtype=DTYPE)
        loss = info_nce_loss(scores, torch.arange(4))
        assert float(loss) == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_positive_drives_loss_to_zero(self):
        scores = torch.zeros(4, 4, dtype=DTYPE)
        scores.fill_diagonal_(1000.0)
        loss = info_nce_loss(scores, torch.arange(4))
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_formula_on_random_fixture(self):
        scores = random_matrix(1)
        targets = [1, 0, 2]
        expected = 0.0
        for i, t in enumerate(targets):
            row = scores[i].tolist()
            denominator = sum(math.exp(v) for v in row)
            expected += -math.log(math.exp(row[t]) / denominator)
        expected /= 3
        loss = info_nce_loss(scores, torch.tensor(targets))
        assert float(loss) == pytest.approx(expected, abs=1e-9)

    def test_denominator_includes_positive(self):
        # One row, one column: probability 1, loss exactly 0.
        loss = info_nce_loss(torch.tensor([[5.0]], dtype=DTYPE), torch.tensor([0]))
        assert float(loss) == 0.0

    def test_non_finite_scores_rejected(self):
        scores = torch.tensor([[0.0, float("inf")], [0.0, 1.0]], dtype=DTYPE)
        with pytest.raises(ValueError, match="non-finite"):
            info_nce_loss(scores, torch.arange(2))

    def test_temperature_sharpens(self):
        scores = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=DTYPE)
        hot = info_nce_loss(scores, torch.arange(2), temperature=10.0)
        cold = info_nce_loss(scores, torch.arange(2), temperature=0.1)
        assert float(cold) < float(hot)

    @given(shift=st.floats(min_value=-50, max_value=50), seed=st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_constant_shift_invariance(self, shift, seed):
        scores = random_matrix(seed, 4, 4)
        targets = torch.arange(4)
        base = float(info_nce_loss(scores, targets))
        shifted = float(info_nce_loss(scores + shift, targets))
        assert shifted == pytest.approx(base, abs=1e-9)

    def test_row_permutation_invariance_of_mean(self):
        scores = random_matrix(2, 4, 4)
        targets = torch.tensor([2, 0, 3, 1])
        perm = torch.tensor([3, 1, 0, 2])
        base = info_nce_loss(scores, targets)
        permuted = info_nce_loss(scores[perm], targets[perm])
        assert float(permuted) == pytest.approx(float(base), abs=1e-12)


class TestTotalObjective:
    def test_identical_matrices_quadruple_the_loss(self):
        matrix = random_matrix(3, 4, 4)
        matrices = matrices_from(matrix, matrix.clone(), matrix.clone())
        targets = torch.arange(4)
        breakdown = total_objective(matrices, targets)
        single = float(info_nce_loss(matrix, targets))
        assert float(breakdown.total) == pytest.approx(4 * single, abs=1e-9)

    def test_dropping_text_loss_term(self):
        matrices = matrices_from(random_matrix(4), random_matrix(5), random_matrix(6))
        targets = torch.arange(3)
        breakdown = total_objective(matrices, targets, loss_units=frozenset({"vdlu", "cmfu"}))
        assert float(breakdown.l_t) == 0.0
        expected = float(breakdown.l_o) + float(breakdown.l_v) + float(breakdown.l_c)
        assert float(breakdown.total) == pytest.approx(expected, abs=0.0)

    def test_total_is_sum_of_terms(self):
        matrices = matrices_from(random_matrix(7), random_matrix(8), random_matrix(9))
        breakdown = total_objective(matrices, torch.arange(3))
        values = breakdown.as_floats()
        assert values["total"] == pytest.approx(
            values["l_o"] + values["l_t"] + values["l_v"] + values["l_c"], abs=1e-12
        )

    def test_ablated_unit_contributes_zero_even_if_loss_enabled(self):
        s_v, s_c = random_matrix(10), random_matrix(11)
        matrices = ScoreMatrices(s_t=None, s_v=s_v, s_c=s_c, s=(s_v + s_c) / 2)
        breakdown = total_objective(matrices, torch.arange(3))
        assert float(breakdown.l_t) == 0.0

    def test_gradient_flows_to_inputs(self):
        s_t = random_matrix(12).requires_grad_(True)
        s_v = random_matrix(13).requires_grad_(True)
        s_c = random_matrix(14).requires_grad_(True)
        breakdown = total_objective(matrices_from(s_t, s_v, s_c), torch.arange(3))
        breakdown.total.backward()
        assert s_t.grad is not None and torch.isfinite(s_t.grad).all()
