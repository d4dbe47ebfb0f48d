"""Full-knowledge-base ranking and H@k / MRR / MR reporting.

Scoring is not decomposable into a single dot product, so every mention is
scored against every KB entity through the interaction layer, batched over
cached entity features in chunks.  The ground-truth rank uses a
pessimistic, deterministic tie policy: tied non-gt entities all precede
the ground truth, and remaining ties order by entity id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from mimic_el.data_model import KnowledgeBase, Mention
from mimic_el.encoders import FeatureBundle
from mimic_el.interaction import (
    FeatureBatch,
    ScoreBreakdown,
    collate_bundles,
    combined_score,
    score_matrices,
)
from mimic_el.model import LinkingModel

DEFAULT_KS = (1, 3, 5, 10, 20)


class CacheError(Exception):
    """Entity feature cache missing, stale, or incomplete."""


class EvaluationError(Exception):
    """Invalid evaluation inputs (empty splits, bad ranks, ...)."""


@dataclass
class EntityFeatureCache:
    """Per-checkpoint entity features, covering the whole KB.

    ``fingerprint`` ties the cache to the exact checkpoint that produced
    it; using it with any other weights is an error.
    """

    fingerprint: str
    ids: tuple[str, ...]
    bundles: dict[str, FeatureBundle]
    recomputed: bool = True
    _collated: FeatureBatch | None = field(default=None, repr=False)
    _index: dict[str, int] | None = field(default=None, repr=False)

    def index_of(self, entity_id: str) -> int:
        if self._index is None:
            self._index = {eid: i for i, eid in enumerate(self.ids)}
        try:
            return self._index[entity_id]
        except KeyError as exc:
            raise CacheError(f"entity {entity_id!r} not in feature cache") from exc

    def collated(self) -> FeatureBatch:
        if self._collated is None:
            self._collated = collate_bundles([self.bundles[i] for i in self.ids])
        return self._collated

    def check(self, model: LinkingModel) -> None:
        if self.fingerprint != model.fingerprint():
            raise CacheError("entity feature cache is stale for this checkpoint")


def _chunk_file(cache_dir: Path, fingerprint: str, index: int) -> Path:
    return cache_dir / f"entities_{fingerprint[:16]}" / f"chunk_{index:05d}.pt"


def precompute_entity_features(
    kb: KnowledgeBase,
    model: LinkingModel,
    image_root: str | Path | None = None,
    cache_dir: str | Path | None = None,
    chunk_size: int = 1024,
) -> EntityFeatureCache:
    """Encode every KB entity once per checkpoint, chunked and resumable.

    With ``cache_dir`` set, each chunk is persisted under a directory named
    by the checkpoint fingerprint; re-running with the same checkpoint
    loads all chunks back without recomputing, and an interrupted run
    resumes from the first missing chunk.
    """
    kb.require_nonempty()
    fingerprint = model.fingerprint()
    ids = kb.ids()
    bundles: dict[str, FeatureBundle] = {}
    recomputed = False
    cache_dir = Path(cache_dir) if cache_dir is not None else None
    for chunk_index, start in enumerate(range(0, len(ids), chunk_size)):
        chunk_ids = ids[start : start + chunk_size]
        path = _chunk_file(cache_dir, fingerprint, chunk_index) if cache_dir else None
        if path is not None and path.exists():
            stored = torch.load(path, weights_only=False)
            for entity_id, bundle in zip(stored["ids"], stored["bundles"]):
                bundles[entity_id] = bundle
            continue
        try:
            chunk = model.encode_entities([kb[i] for i in chunk_ids], image_root)
        except Exception as exc:
            raise CacheError(
                f"failed encoding entity chunk starting at {chunk_ids[0]!r}: {exc}"
            ) from exc
        recomputed = True
        for entity_id, bundle in zip(chunk_ids, chunk):
            bundles[entity_id] = bundle
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"ids": chunk_ids, "bundles": chunk}, path)
    return EntityFeatureCache(
        fingerprint=fingerprint, ids=tuple(ids), bundles=bundles, recomputed=recomputed
    )


@dataclass
class RankResult:
    """Full ordering of the KB for one mention."""

    ranked_ids: list[str]
    scores: dict[str, np.ndarray]  # keys s_t/s_v/s_c/s, aligned to ranked_ids
    gt_rank: int | None
    mention_bundle: FeatureBundle
    cache: EntityFeatureCache
    model: LinkingModel

    def breakdown(self, position: int) -> ScoreBreakdown:
        entity_id = self.ranked_ids[position]
        return combined_score(
            self.mention_bundle,
            self.cache.bundles[entity_id],
            self.model.weights,
            self.model.units,
        )


def _ordering(scores: np.ndarray, ids: tuple[str, ...], gt_id: str | None) -> np.ndarray:
    """Indices sorted by score desc, then non-gt before gt, then id."""
    id_array = np.asarray(ids)
    is_gt = id_array == gt_id if gt_id is not None else np.zeros(len(ids), dtype=bool)
    return np.lexsort((id_array, is_gt, -scores))


def _gt_rank_from_scores(scores: np.ndarray, gt_index: int) -> int:
    s_gt = scores[gt_index]
    greater = int((scores > s_gt).sum())
    tied_others = int((scores == s_gt).sum()) - 1
    return 1 + greater + tied_others


def rank_against_kb(
    mention: Mention,
    cache: EntityFeatureCache,
    model: LinkingModel,
    image_root: str | Path | None = None,
) -> RankResult:
    """Rank every cached entity for one mention (descending combined score)."""
    cache.check(model)
    bundle = model.encode_mentions([mention], image_root)[0]
    mb = collate_bundles([bundle])
    with torch.no_grad():
        matrices = score_matrices(mb, cache.collated(), model.weights, model.units)
    row = {
        name: (m[0].numpy() if m is not None else None)
        for name, m in (("s_t", matrices.s_t), ("s_v", matrices.s_v), ("s_c", matrices.s_c))
    }
    combined = matrices.s[0].numpy()
    gt_id = mention.gt_entity_id if mention.gt_entity_id in cache.bundles else None
    order = _ordering(combined, cache.ids, gt_id)
    ranked_ids = [cache.ids[i] for i in order]
    scores = {"s": combined[order]}
    for name, values in row.items():
        if values is not None:
            scores[name] = values[order]
    gt_rank = None
    if gt_id is not None:
        gt_rank = _gt_rank_from_scores(combined, cache.index_of(gt_id))
    return RankResult(
        ranked_ids=ranked_ids,
        scores=scores,
        gt_rank=gt_rank,
        mention_bundle=bundle,
        cache=cache,
        model=model,
    )


@dataclass
class MetricsReport:
    """Ranking metrics over one split, with rank provenance attached."""

    n: int
    hits: dict[int, float]
    mrr: float
    mr: float
    ranks: tuple[int, ...]
    checkpoint: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "hits": {str(k): v for k, v in sorted(self.hits.items())},
            "mrr": self.mrr,
            "mr": self.mr,
            "checkpoint": self.checkpoint,
        }


def compute_metrics(ranks: list[int], ks: tuple[int, ...] = DEFAULT_KS) -> MetricsReport:
    """H@k (rank <= k), mean reciprocal rank, and mean rank over 1-based ranks."""
    if len(ranks) == 0:
        raise EvaluationError("cannot compute metrics over zero ranks")
    if any(r < 1 for r in ranks):
        raise EvaluationError("ranks must be 1-based positive integers")
    n = len(ranks)
    hits = {k: sum(1 for r in ranks if r <= k) / n for k in ks}
    mrr = sum(1.0 / r for r in ranks) / n
    mr = sum(ranks) / n
    return MetricsReport(n=n, hits=hits, mrr=mrr, mr=mr, ranks=tuple(int(r) for r in ranks))


def ranks_for_mentions(
    bundles: list[FeatureBundle],
    gt_indices: list[int],
    entity_batch: FeatureBatch,
    entity_ids: tuple[str, ...],
    model: LinkingModel,
    chunk_size: int = 512,
    top_k: int = 10,
) -> tuple[list[int], list[list[str]]]:
    """Ground-truth ranks plus top-k id lists for a batch of mentions.

    Scores are computed in entity chunks to bound the attention tensors;
    the full per-mention score row is kept (KB-sized) to apply the tie
    policy exactly.
    """
    mb = collate_bundles(bundles)
    n_entities = len(entity_ids)
    pieces = []
    for start in range(0, n_entities, chunk_size):
        stop = min(start + chunk_size, n_entities)
        eb = FeatureBatch(
            t_G=entity_batch.t_G[start:stop],
            T_L=entity_batch.T_L[start:stop],
            t_mask=entity_batch.t_mask[start:stop],
            v_G=entity_batch.v_G[start:stop],
            V_L=entity_batch.V_L[start:stop],
        )
        with torch.no_grad():
            pieces.append(score_matrices(mb, eb, model.weights, model.units).s)
    scores = torch.cat(pieces, dim=1).numpy()
    ranks: list[int] = []
    tops: list[list[str]] = []
    for i, gt_index in enumerate(gt_indices):
        ranks.append(_gt_rank_from_scores(scores[i], gt_index))
        order = _ordering(scores[i], entity_ids, entity_ids[gt_index])
        tops.append([entity_ids[j] for j in order[:top_k]])
    return ranks, tops


def evaluate_split(
    mentions: list[Mention],
    model: LinkingModel,
    cache: EntityFeatureCache,
    image_root: str | Path | None = None,
    ks: tuple[int, ...] = DEFAULT_KS,
    batch_size: int = 64,
    chunk_size: int = 512,
    dump_path: str | Path | None = None,
) -> MetricsReport:
    """Rank the whole KB for every mention of a split and report metrics.

    With ``dump_path`` set, one JSONL line per mention records the gt rank
    and the top-10 ranked entity ids for audit.
    """
    if not mentions:
        raise EvaluationError("cannot evaluate an empty mention list")
    cache.check(model)
    entity_batch = cache.collated()
    all_ranks: list[int] = []
    dump_lines: list[str] = []
    for start in range(0, len(mentions), batch_size):
        batch = mentions[start : start + batch_size]
        bundles = model.encode_mentions(batch, image_root)
        gt_indices = [cache.index_of(m.gt_entity_id) for m in batch]
        ranks, tops = ranks_for_mentions(
            bundles, gt_indices, entity_batch, cache.ids, model, chunk_size
        )
        all_ranks.extend(ranks)
        if dump_path is not None:
            for mention, rank, top in zip(batch, ranks, tops):
                dump_lines.append(
                    json.dumps({"mention_id": mention.id, "gt_rank": rank, "top10": top})
                )
    if dump_path is not None:
        Path(dump_path).write_text("\n".join(dump_lines) + "\n", encoding="utf-8")
    report = compute_metrics(all_ranks, ks)
    report.checkpoint = cache.fingerprint
    return report
