"""The three mention-entity interaction units and the combined score.

Each unit maps a (mention bundle, entity bundle) pair to a scalar:

* text global-local unit (TGLU): a normalized global-to-global dot product
  averaged with an attention-based global-to-local score, where entity
  token states query mention token states;
* vision dual unit (VDLU): a dual-gated interaction scored in both the
  entity-to-mention and mention-to-entity directions, each direction with
  its own parameters;
* cross-modal fusion unit (CMFU): text-guided aggregation of image patch
  features with a text-intensity gate, compared entity-side vs
  mention-side by dot product.

The final score is the arithmetic mean of the enabled unit scores.  All
functions are pure in (inputs, weights) and differentiable; the batched
``pairwise_score_matrix`` is the training/evaluation workhorse and must
agree elementwise with per-pair scoring.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from mimic_el.encoders import DTYPE, FeatureBundle

logger = logging.getLogger(__name__)

ALL_UNITS = frozenset({"tglu", "vdlu", "cmfu"})

LAYER_NORM_EPS = 1e-5


def _check_units(units: frozenset[str]) -> frozenset[str]:
    units = frozenset(units)
    if not units:
        raise ValueError("at least one interaction unit must be enabled")
    unknown = units - ALL_UNITS
    if unknown:
        raise ValueError(f"unknown interaction units: {sorted(unknown)}")
    return units


def _init_linear(linear: nn.Linear, generator: torch.Generator) -> None:
    # Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and bias.
    bound = 1.0 / math.sqrt(linear.in_features)
    linear.weight.data.uniform_(-bound, bound, generator=generator)
    if linear.bias is not None:
        linear.bias.data.uniform_(-bound, bound, generator=generator)


class DualGate(nn.Module):
    """One direction of the vision dual unit (fuse + scalar gate + norm)."""

    def __init__(self, d_v: int):
        super().__init__()
        self.fuse = nn.Linear(d_v, d_v, dtype=DTYPE)
        self.gate = nn.Linear(d_v, 1, dtype=DTYPE)
        self.norm_in = nn.LayerNorm(d_v, eps=LAYER_NORM_EPS, dtype=DTYPE)
        self.norm_out = nn.LayerNorm(d_v, eps=LAYER_NORM_EPS, dtype=DTYPE)


class InteractionWeights(nn.Module):
    """All learnable parameters of the interaction layer.

    ``d_T``/``d_v`` are the incoming text/image feature widths; ``d_t`` and
    ``d_c`` are the internal widths of the text unit and the fusion unit.
    The two vision directions are independent parameter sets; the fusion
    unit shares its projections between the entity and mention sides.
    """

    def __init__(self, d_T: int, d_v: int, d_t: int, d_c: int, seed: int = 0):
        super().__init__()
        self.d_T, self.d_v, self.d_t, self.d_c = d_T, d_v, d_t, d_c
        self.tglu_q = nn.Linear(d_T, d_t, bias=False, dtype=DTYPE)
        self.tglu_k = nn.Linear(d_T, d_t, bias=False, dtype=DTYPE)
        self.tglu_v = nn.Linear(d_T, d_t, bias=False, dtype=DTYPE)
        self.tglu_proj = nn.Linear(d_T, d_t, dtype=DTYPE)
        self.tglu_norm = nn.LayerNorm(d_t, eps=LAYER_NORM_EPS, dtype=DTYPE)
        self.vdlu_e2m = DualGate(d_v)
        self.vdlu_m2e = DualGate(d_v)
        self.cmfu_text = nn.Linear(d_T, d_c, dtype=DTYPE)
        self.cmfu_vision = nn.Linear(d_v, d_c, dtype=DTYPE)
        self.cmfu_gate = nn.Linear(d_c, d_c, dtype=DTYPE)
        self.cmfu_norm = nn.LayerNorm(d_c, eps=LAYER_NORM_EPS, dtype=DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        generator = torch.Generator()
        generator.manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                _init_linear(module, generator)
            elif isinstance(module, nn.LayerNorm):
                module.weight.data.fill_(1.0)
                module.bias.data.fill_(0.0)


@dataclass(frozen=True)
class ScoreBreakdown:
    """Scores of one mention-entity pair, sub-scores included.

    ``s_t`` and ``s_v`` are the means of their two sub-scores and ``s`` is
    the mean of the three unit scores.
    """

    s_t_g2g: float
    s_t_g2l: float
    s_t: float
    s_v_e2m: float
    s_v_m2e: float
    s_v: float
    s_c: float
    s: float

    def as_dict(self) -> dict[str, float]:
        return {
            "s_t_g2g": self.s_t_g2g,
            "s_t_g2l": self.s_t_g2l,
            "s_t": self.s_t,
            "s_v_e2m": self.s_v_e2m,
            "s_v_m2e": self.s_v_m2e,
            "s_v": self.s_v,
            "s_c": self.s_c,
            "s": self.s,
        }


def _normalized_or_zero(vector: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(vector)
    if norm.item() == 0.0:
        logger.warning("zero-norm global text feature; global-to-global score is 0")
        return torch.zeros_like(vector)
    return vector / norm


def tglu_attention(m: FeatureBundle, e: FeatureBundle, w: InteractionWeights) -> torch.Tensor:
    """Attention rows (entity tokens over mention tokens); each row sums to 1."""
    q = w.tglu_q(e.T_L)
    k = w.tglu_k(m.T_L)
    logits = q @ k.T / math.sqrt(w.d_t)
    return torch.softmax(logits, dim=-1)


def tglu_score(
    m: FeatureBundle, e: FeatureBundle, w: InteractionWeights
) -> tuple[float, float, float]:
    """Text unit score: (s_t, s_t_g2g, s_t_g2l)."""
    with torch.no_grad():
        g2g = _normalized_or_zero(e.t_G) @ _normalized_or_zero(m.t_G)
        attn = tglu_attention(m, e, w)
        h = attn @ w.tglu_v(m.T_L)
        pooled = w.tglu_norm(h.mean(dim=0))
        g2l = w.tglu_proj(e.t_G) @ pooled
        s_t = (g2g + g2l) / 2
    return float(s_t), float(g2g), float(g2l)


def vdlu_dual(
    v_a_g: torch.Tensor,
    v_b_g: torch.Tensor,
    v_b_l: torch.Tensor,
    w_dir: DualGate,
) -> torch.Tensor:
    """Dual-gated interaction from A's view onto B's features.

    The pooled B locals are combined with A's global, a scalar tanh gate
    modulates the fused vector, and the gated result (renormalized with
    B's global added back) is scored against A's global by dot product.
    """
    pooled = v_b_l.mean(dim=-2)
    fused = w_dir.fuse(w_dir.norm_in(pooled + v_a_g))
    gate = torch.tanh(w_dir.gate(fused))
    out = w_dir.norm_out(gate * fused + v_b_g)
    return (out * v_a_g).sum(dim=-1)


def vdlu_score(
    m: FeatureBundle, e: FeatureBundle, w: InteractionWeights
) -> tuple[float, float, float]:
    """Vision unit score: (s_v, s_v_e2m, s_v_m2e)."""
    with torch.no_grad():
        e2m = vdlu_dual(e.v_G, m.v_G, m.V_L, w.vdlu_e2m)
        m2e = vdlu_dual(m.v_G, e.v_G, e.V_L, w.vdlu_m2e)
        s_v = (e2m + m2e) / 2
    return float(s_v), float(e2m), float(m2e)


def cmfu_alpha(h_text: torch.Tensor, h_vision: torch.Tensor) -> torch.Tensor:
    """Patch-attention weights of the fusion unit; sums to 1 over rows."""
    return torch.softmax(h_vision @ h_text, dim=-1)


def cmfu_fuse(
    h_text: torch.Tensor, h_vision: torch.Tensor, w: InteractionWeights
) -> torch.Tensor:
    """Text-guided patch aggregation with a text-intensity gate.

    ``h_text`` is a projected global text vector (d_c), ``h_vision`` the
    projected patch rows ((n+1) x d_c); both sides of a pair go through
    the same parameters.
    """
    alpha = cmfu_alpha(h_text, h_vision)
    aggregated = alpha @ h_vision
    gate = torch.tanh(w.cmfu_gate(h_text))
    return w.cmfu_norm(gate * h_text + aggregated)


def cmfu_score(m: FeatureBundle, e: FeatureBundle, w: InteractionWeights) -> float:
    """Fusion unit score: dot product of the two fused context vectors."""
    with torch.no_grad():
        h_e = cmfu_fuse(w.cmfu_text(e.t_G), w.cmfu_vision(e.V_L), w)
        h_m = cmfu_fuse(w.cmfu_text(m.t_G), w.cmfu_vision(m.V_L), w)
        s_c = h_e @ h_m
    return float(s_c)


def combined_score(
    m: FeatureBundle,
    e: FeatureBundle,
    w: InteractionWeights,
    units: frozenset[str] = ALL_UNITS,
) -> ScoreBreakdown:
    """Full per-pair breakdown; ``s`` averages the enabled unit scores."""
    units = _check_units(units)
    s_t, g2g, g2l = tglu_score(m, e, w)
    s_v, e2m, m2e = vdlu_score(m, e, w)
    s_c = cmfu_score(m, e, w)
    enabled = {"tglu": s_t, "vdlu": s_v, "cmfu": s_c}
    s = sum(enabled[u] for u in sorted(units)) / len(units)
    return ScoreBreakdown(
        s_t_g2g=g2g, s_t_g2l=g2l, s_t=s_t,
        s_v_e2m=e2m, s_v_m2e=m2e, s_v=s_v,
        s_c=s_c, s=s,
    )


# ---------------------------------------------------------------------------
# Batched scoring over padded feature batches.
# ---------------------------------------------------------------------------


@dataclass
class FeatureBatch:
    """Padded, mask-carrying collation of feature bundles.

    Image locals have a fixed row count per config, so only text carries a
    mask.  Padding never changes per-item scores: padded key positions are
    excluded from attention and padded query rows from pooling.
    """

    t_G: torch.Tensor  # (B, d_T)
    T_L: torch.Tensor  # (B, L_max, d_T)
    t_mask: torch.Tensor  # (B, L_max) bool
    v_G: torch.Tensor  # (B, d_v)
    V_L: torch.Tensor  # (B, n+1, d_v)

    def __len__(self) -> int:
        return self.t_G.shape[0]


def collate_bundles(bundles: list[FeatureBundle]) -> FeatureBatch:
    if not bundles:
        raise ValueError("cannot collate an empty bundle list")
    lengths = [b.T_L.shape[0] for b in bundles]
    l_max = max(lengths)
    d_t_in = bundles[0].T_L.shape[1]
    t_l = torch.zeros(len(bundles), l_max, d_t_in, dtype=DTYPE)
    mask = torch.zeros(len(bundles), l_max, dtype=torch.bool)
    for i, bundle in enumerate(bundles):
        t_l[i, : lengths[i]] = bundle.T_L
        mask[i, : lengths[i]] = True
    return FeatureBatch(
        t_G=torch.stack([b.t_G for b in bundles]),
        T_L=t_l,
        t_mask=mask,
        v_G=torch.stack([b.v_G for b in bundles]),
        V_L=torch.stack([b.V_L for b in bundles]),
    )


def _normalized_rows_or_zero(vectors: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(vectors, dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        logger.warning("zero-norm global text feature(s) in batch; scored as zero")
    return vectors / norms.clamp_min(torch.finfo(vectors.dtype).tiny)


def tglu_matrix(mb: FeatureBatch, eb: FeatureBatch, w: InteractionWeights) -> torch.Tensor:
    g2g = _normalized_rows_or_zero(mb.t_G) @ _normalized_rows_or_zero(eb.t_G).T
    q = w.tglu_q(eb.T_L)  # (Be, Le, d_t)
    k = w.tglu_k(mb.T_L)  # (Bm, Lm, d_t)
    v = w.tglu_v(mb.T_L)
    logits = torch.einsum("eqd,mkd->meqk", q, k) / math.sqrt(w.d_t)
    logits = logits.masked_fill(~mb.t_mask[:, None, None, :], float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    h = torch.einsum("meqk,mkd->meqd", attn, v)
    qmask = eb.t_mask.to(h.dtype)  # (Be, Le)
    pooled = (h * qmask[None, :, :, None]).sum(dim=2) / qmask.sum(dim=1)[None, :, None]
    normed = w.tglu_norm(pooled)  # (Bm, Be, d_t)
    g2l = torch.einsum("med,ed->me", normed, w.tglu_proj(eb.t_G))
    return (g2g + g2l) / 2


def _vdlu_direction_matrix(
    a_g: torch.Tensor, b_g: torch.Tensor, b_vl: torch.Tensor, w_dir: DualGate
) -> torch.Tensor:
    """(Ba, Bb) matrix of dual-gated scores from each A onto each B."""
    pooled = b_vl.mean(dim=1)  # (Bb, d_v)
    fused = w_dir.fuse(w_dir.norm_in(pooled[None, :, :] + a_g[:, None, :]))
    gate = torch.tanh(w_dir.gate(fused))
    out = w_dir.norm_out(gate * fused + b_g[None, :, :])
    return (out * a_g[:, None, :]).sum(dim=-1)


def vdlu_matrix(mb: FeatureBatch, eb: FeatureBatch, w: InteractionWeights) -> torch.Tensor:
    e2m = _vdlu_direction_matrix(eb.v_G, mb.v_G, mb.V_L, w.vdlu_e2m)  # (Be, Bm)
    m2e = _vdlu_direction_matrix(mb.v_G, eb.v_G, eb.V_L, w.vdlu_m2e)  # (Bm, Be)
    return (e2m.T + m2e) / 2


def _cmfu_fuse_batch(h_text: torch.Tensor, h_vision: torch.Tensor, w: InteractionWeights) -> torch.Tensor:
    alpha = torch.softmax(torch.einsum("bnd,bd->bn", h_vision, h_text), dim=-1)
    aggregated = torch.einsum("bn,bnd->bd", alpha, h_vision)
    gate = torch.tanh(w.cmfu_gate(h_text))
    return w.cmfu_norm(gate * h_text + aggregated)


def cmfu_matrix(mb: FeatureBatch, eb: FeatureBatch, w: InteractionWeights) -> torch.Tensor:
    h_e = _cmfu_fuse_batch(w.cmfu_text(eb.t_G), w.cmfu_vision(eb.V_L), w)
    h_m = _cmfu_fuse_batch(w.cmfu_text(mb.t_G), w.cmfu_vision(mb.V_L), w)
    return h_m @ h_e.T


@dataclass
class ScoreMatrices:
    """Per-unit and combined score matrices; disabled units are None."""

    s_t: torch.Tensor | None
    s_v: torch.Tensor | None
    s_c: torch.Tensor | None
    s: torch.Tensor


def score_matrices(
    mb: FeatureBatch,
    eb: FeatureBatch,
    w: InteractionWeights,
    units: frozenset[str] = ALL_UNITS,
) -> ScoreMatrices:
    units = _check_units(units)
    s_t = tglu_matrix(mb, eb, w) if "tglu" in units else None
    s_v = vdlu_matrix(mb, eb, w) if "vdlu" in units else None
    s_c = cmfu_matrix(mb, eb, w) if "cmfu" in units else None
    enabled = [m for m in (s_t, s_v, s_c) if m is not None]
    s = sum(enabled) / len(enabled)
    return ScoreMatrices(s_t=s_t, s_v=s_v, s_c=s_c, s=s)


def pairwise_score_matrix(
    mentions: list[FeatureBundle],
    entities: list[FeatureBundle],
    w: InteractionWeights,
    units: frozenset[str] = ALL_UNITS,
) -> tuple[torch.Tensor | None, torch.Tensor | None, torch.Tensor | None, torch.Tensor]:
    """Score every mention against every entity in one batched pass.

    Returns (S_T, S_V, S_C, S) with shape (len(mentions), len(entities));
    entry [i][j] equals the corresponding single-pair score.
    """
    with torch.no_grad():
        matrices = score_matrices(collate_bundles(mentions), collate_bundles(entities), w, units)
    return matrices.s_t, matrices.s_v, matrices.s_c, matrices.s
