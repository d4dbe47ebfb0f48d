"""Loop-based 64-bit reference implementations used only by tests.

Everything here recomputes the interaction scores, losses and metrics with
explicit Python loops over plain lists: per-element matrix products,
per-row softmax, mean pooling and layer normalization written out by hand.
No tensor arithmetic is shared with the production modules; tensors and
weight modules are converted to nested lists at the boundary and the rest
is ``math``.  The oracle is the arbiter whenever the two disagree.
"""

from __future__ import annotations

import math

from mimic_el.evaluator import DEFAULT_KS, EvaluationError, MetricsReport
from mimic_el.objective import LossBreakdown

LN_EPS = 1e-5


def _vec(x) -> list[float]:
    return [float(v) for v in x.tolist()] if hasattr(x, "tolist") else [float(v) for v in x]


def _mat(x) -> list[list[float]]:
    rows = x.tolist() if hasattr(x, "tolist") else x
    return [[float(v) for v in row] for row in rows]


def _dot(a: list[float], b: list[float]) -> float:
    total = 0.0
    for i in range(len(a)):
        total += a[i] * b[i]
    return total


def _matvec(weight: list[list[float]], x: list[float], bias: list[float] | None) -> list[float]:
    # weight rows are output units (torch Linear layout: (out, in)).
    out = []
    for o in range(len(weight)):
        accum = bias[o] if bias is not None else 0.0
        row = weight[o]
        for i in range(len(x)):
            accum += row[i] * x[i]
        out.append(accum)
    return out


def _softmax(values: list[float]) -> list[float]:
    peak = max(values)
    exps = [math.exp(v - peak) for v in values]
    denom = sum(exps)
    return [e / denom for e in exps]


def _mean_rows(rows: list[list[float]]) -> list[float]:
    width = len(rows[0])
    return [sum(row[d] for row in rows) / len(rows) for d in range(width)]


def _layer_norm(x: list[float], gain: list[float], bias: list[float]) -> list[float]:
    n = len(x)
    mean = sum(x) / n
    var = sum((v - mean) ** 2 for v in x) / n
    inv = 1.0 / math.sqrt(var + LN_EPS)
    return [gain[i] * (x[i] - mean) * inv + bias[i] for i in range(n)]


def _normalize(x: list[float]) -> list[float]:
    norm = math.sqrt(sum(v * v for v in x))
    if norm == 0.0:
        return [0.0] * len(x)
    return [v / norm for v in x]


def _linear_arrays(linear) -> tuple[list[list[float]], list[float] | None]:
    weight = _mat(linear.weight.detach())
    bias = _vec(linear.bias.detach()) if linear.bias is not None else None
    return weight, bias


def _norm_arrays(norm) -> tuple[list[float], list[float]]:
    return _vec(norm.weight.detach()), _vec(norm.bias.detach())


def ref_tglu(m, e, w) -> tuple[float, float, float]:
    """Text unit twin of the production implementation: (s_t, g2g, g2l)."""
    t_e_g, t_m_g = _vec(e.t_G), _vec(m.t_G)
    g2g = _dot(_normalize(t_e_g), _normalize(t_m_g))

    wq, _ = _linear_arrays(w.tglu_q)
    wk, _ = _linear_arrays(w.tglu_k)
    wv, _ = _linear_arrays(w.tglu_v)
    w1, b1 = _linear_arrays(w.tglu_proj)
    ln_g, ln_b = _norm_arrays(w.tglu_norm)

    queries = [_matvec(wq, row, None) for row in _mat(e.T_L)]
    mention_rows = _mat(m.T_L)
    keys = [_matvec(wk, row, None) for row in mention_rows]
    values = [_matvec(wv, row, None) for row in mention_rows]
    scale = math.sqrt(w.d_t)
    attended = []
    for q in queries:
        weights = _softmax([_dot(q, k) / scale for k in keys])
        attended.append(
            [sum(weights[j] * values[j][d] for j in range(len(values))) for d in range(w.d_t)]
        )
    pooled = _layer_norm(_mean_rows(attended), ln_g, ln_b)
    g2l = _dot(_matvec(w1, t_e_g, b1), pooled)
    s_t = (g2g + g2l) / 2.0
    return s_t, g2g, g2l


def _ref_dual(v_a_g: list[float], v_b_g: list[float], v_b_l: list[list[float]], direction) -> float:
    w1, b1 = _linear_arrays(direction.fuse)
    w2, b2 = _linear_arrays(direction.gate)
    ln_in = _norm_arrays(direction.norm_in)
    ln_out = _norm_arrays(direction.norm_out)
    pooled = _mean_rows(v_b_l)
    combined = [pooled[i] + v_a_g[i] for i in range(len(v_a_g))]
    fused = _matvec(w1, _layer_norm(combined, *ln_in), b1)
    gate = math.tanh(_matvec(w2, fused, b2)[0])
    gated = [gate * fused[i] + v_b_g[i] for i in range(len(fused))]
    return _dot(_layer_norm(gated, *ln_out), v_a_g)


def ref_vdlu(m, e, w) -> tuple[float, float, float]:
    """Vision unit twin: (s_v, e2m, m2e)."""
    e2m = _ref_dual(_vec(e.v_G), _vec(m.v_G), _mat(m.V_L), w.vdlu_e2m)
    m2e = _ref_dual(_vec(m.v_G), _vec(e.v_G), _mat(e.V_L), w.vdlu_m2e)
    return (e2m + m2e) / 2.0, e2m, m2e


def _ref_fuse(h_text: list[float], h_vision: list[list[float]], w3, b3, ln) -> list[float]:
    alpha = _softmax([_dot(h_text, row) for row in h_vision])
    width = len(h_text)
    aggregated = [
        sum(alpha[i] * h_vision[i][d] for i in range(len(h_vision))) for d in range(width)
    ]
    gate = [math.tanh(v) for v in _matvec(w3, h_text, b3)]
    return _layer_norm([gate[d] * h_text[d] + aggregated[d] for d in range(width)], *ln)


def ref_cmfu(m, e, w) -> float:
    """Fusion unit twin: the cross-modal score s_c."""
    w1, b1 = _linear_arrays(w.cmfu_text)
    w2, b2 = _linear_arrays(w.cmfu_vision)
    w3, b3 = _linear_arrays(w.cmfu_gate)
    ln = _norm_arrays(w.cmfu_norm)
    h_e = _ref_fuse(_matvec(w1, _vec(e.t_G), b1), [_matvec(w2, r, b2) for r in _mat(e.V_L)], w3, b3, ln)
    h_m = _ref_fuse(_matvec(w1, _vec(m.t_G), b1), [_matvec(w2, r, b2) for r in _mat(m.V_L)], w3, b3, ln)
    return _dot(h_e, h_m)


def _ref_info_nce(scores: list[list[float]], targets: list[int], temperature: float) -> float:
    total = 0.0
    for i, row in enumerate(scores):
        logits = [v / temperature for v in row]
        peak = max(logits)
        log_denom = math.log(sum(math.exp(v - peak) for v in logits))
        total += log_denom - (logits[targets[i]] - peak)
    return total / len(scores)


def ref_loss(matrices, targets, loss_units=frozenset({"tglu", "vdlu", "cmfu"}), temperature: float = 1.0) -> LossBreakdown:
    """Loss twin over a ScoreMatrices-like object; returns plain floats."""
    target_list = [int(t) for t in targets]
    l_o = _ref_info_nce(_mat(matrices.s), target_list, temperature)

    def term(name: str, unit_matrix) -> float:
        if name not in loss_units or unit_matrix is None:
            return 0.0
        return _ref_info_nce(_mat(unit_matrix), target_list, temperature)

    l_t = term("tglu", matrices.s_t)
    l_v = term("vdlu", matrices.s_v)
    l_c = term("cmfu", matrices.s_c)
    return LossBreakdown(l_o=l_o, l_t=l_t, l_v=l_v, l_c=l_c, total=l_o + l_t + l_v + l_c)


def ref_metrics(ranks: list[int], ks: tuple[int, ...] = DEFAULT_KS) -> MetricsReport:
    """Metric twin computed rank by rank."""
    if len(ranks) == 0:
        raise EvaluationError("cannot compute metrics over zero ranks")
    hits: dict[int, float] = {}
    for k in ks:
        inside = 0
        for r in ranks:
            if r < 1:
                raise EvaluationError("ranks must be 1-based positive integers")
            if r <= k:
                inside += 1
        hits[k] = inside / len(ranks)
    mrr = 0.0
    mr = 0.0
    for r in ranks:
        mrr += 1.0 / r
        mr += float(r)
    return MetricsReport(
        n=len(ranks),
        hits=hits,
        mrr=mrr / len(ranks),
        mr=mr / len(ranks),
        ranks=tuple(int(r) for r in ranks),
    )
