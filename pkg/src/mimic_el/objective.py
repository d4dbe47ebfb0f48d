"""In-batch contrastive objective with one independent loss per unit.

Every mention in a batch is scored against every entity in the batch; the
softmax cross-entropy of the positive column (in-batch negatives, positive
included in the denominator) is averaged over mentions.  The total
objective adds that loss on the combined score and one such loss per
enabled interaction unit, which keeps the units consistent instead of
letting a single one dominate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from mimic_el.interaction import ScoreMatrices


@dataclass
class LossBreakdown:
    """Loss terms; disabled terms are exact zeros so total stays the sum.

    Fields are 0-dim tensors on the training path (differentiable) and
    plain floats from the reference oracle; ``float()`` works on both.
    """

    l_o: torch.Tensor | float
    l_t: torch.Tensor | float
    l_v: torch.Tensor | float
    l_c: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> dict[str, float]:
        def value(term) -> float:
            return float(term.detach()) if isinstance(term, torch.Tensor) else float(term)

        return {
            "l_o": value(self.l_o),
            "l_t": value(self.l_t),
            "l_v": value(self.l_v),
            "l_c": value(self.l_c),
            "total": value(self.total),
        }


def info_nce_loss(
    scores: torch.Tensor, targets: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Mean over rows of -log softmax(scores/temperature)[i, targets[i]].

    Row-max subtraction stabilizes the log-sum-exp; non-finite scores are
    rejected up front because they poison gradients silently otherwise.
    """
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D, got shape {tuple(scores.shape)}")
    if not bool(torch.isfinite(scores).all()):
        raise ValueError("non-finite entries in score matrix")
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.shape != (scores.shape[0],):
        raise ValueError("targets must hold one positive column per row")
    logits = scores / temperature
    row_max = logits.max(dim=1, keepdim=True).values
    shifted = logits - row_max
    log_denominator = torch.log(torch.exp(shifted).sum(dim=1))
    positive = shifted[torch.arange(scores.shape[0]), targets]
    return (log_denominator - positive).mean()


def total_objective(
    matrices: ScoreMatrices,
    targets: torch.Tensor,
    loss_units: frozenset[str] = frozenset({"tglu", "vdlu", "cmfu"}),
    temperature: float = 1.0,
) -> LossBreakdown:
    """Combined-score loss plus one per-unit loss for each enabled term.

    ``loss_units`` names the units whose independent loss is kept; a unit
    whose score matrix is None (ablated from scoring) contributes zero
    regardless.  ``total`` is always l_o + l_t + l_v + l_c.
    """
    zero = torch.zeros((), dtype=matrices.s.dtype)
    l_o = info_nce_loss(matrices.s, targets, temperature)

    def unit_loss(name: str, unit_scores: torch.Tensor | None) -> torch.Tensor:
        if name not in loss_units or unit_scores is None:
            return zero
        return info_nce_loss(unit_scores, targets, temperature)

    l_t = unit_loss("tglu", matrices.s_t)
    l_v = unit_loss("vdlu", matrices.s_v)
    l_c = unit_loss("cmfu", matrices.s_c)
    total = l_o + l_t + l_v + l_c
    return LossBreakdown(l_o=l_o, l_t=l_t, l_v=l_v, l_c=l_c, total=total)
