"""Knowledge-base and mention records, JSONL ingestion, split handling.

On-disk format is JSONL, one record per line:

* entity:  ``{"id", "name", "attributes": [...], "images": [...], "description"}``
* mention: ``{"id", "mention", "sentence", "image", "entity_id", "split"}``

Image paths are relative to a separate image-store root directory.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class DatasetError(Exception):
    """Base class for ingestion failures."""


class ParseError(DatasetError):
    """A line could not be parsed or is schema-invalid."""


class IngestionError(DatasetError):
    """Records parsed but violate collection-level invariants."""


@dataclass(frozen=True)
class Entity:
    """One knowledge-base record.

    ``description`` is stored for completeness but is not part of the
    model input; the textual input is built from name + attributes only.
    """

    id: str
    name: str
    attributes: tuple[str, ...] = ()
    image_refs: tuple[str, ...] = ()
    description: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ParseError("entity id must be nonempty")
        if not self.name:
            raise ParseError(f"entity {self.id!r}: name must be nonempty")


@dataclass(frozen=True)
class Mention:
    """A query record: surface words, containing sentence, optional image."""

    id: str
    words: str
    sentence: str
    image_ref: str | None
    gt_entity_id: str
    split: str

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ParseError(f"mention {self.id!r}: bad split {self.split!r}")


@dataclass(frozen=True)
class KnowledgeBase:
    """Immutable id-indexed entity collection."""

    entities: dict[str, Entity]

    @property
    def size(self) -> int:
        return len(self.entities)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.entities

    def __getitem__(self, entity_id: str) -> Entity:
        return self.entities[entity_id]

    def ids(self) -> list[str]:
        return list(self.entities)

    def require_nonempty(self) -> None:
        if self.size == 0:
            raise IngestionError("knowledge base is empty")


@dataclass
class EntityIngestReport:
    n_entities: int = 0
    missing_images: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class MentionIngestReport:
    n_loaded: int = 0
    n_dropped: int = 0
    dropped_ids: list[str] = field(default_factory=list)
    per_split: dict[str, int] = field(default_factory=dict)


def _iter_jsonl(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise ParseError(f"{path}:{lineno}: expected an object")
            yield lineno, record


def _require_str(record: dict, key: str, where: str) -> str:
    value = record.get(key)
    if not isinstance(value, str):
        raise ParseError(f"{where}: field {key!r} must be a string")
    return value


def ingest_entities(
    path: str | Path, image_root: str | Path | None = None
) -> tuple[KnowledgeBase, EntityIngestReport]:
    """Load an entity JSONL file, returning the KB plus a warning report.

    Duplicate ids are a hard error.  Image refs that do not resolve under
    ``image_root`` are kept on the record but flagged in the report.
    """
    entities: dict[str, Entity] = {}
    report = EntityIngestReport()
    root = Path(image_root) if image_root is not None else None
    for lineno, record in _iter_jsonl(path):
        where = f"{path}:{lineno}"
        entity_id = _require_str(record, "id", where)
        name = _require_str(record, "name", where)
        attributes = record.get("attributes", [])
        images = record.get("images", [])
        description = record.get("description")
        if not isinstance(attributes, list) or not all(isinstance(a, str) for a in attributes):
            raise ParseError(f"{where}: 'attributes' must be a list of strings")
        if not isinstance(images, list) or not all(isinstance(i, str) for i in images):
            raise ParseError(f"{where}: 'images' must be a list of strings")
        if description is not None and not isinstance(description, str):
            raise ParseError(f"{where}: 'description' must be a string or null")
        if entity_id in entities:
            raise IngestionError(f"{where}: duplicate entity id {entity_id!r}")
        try:
            entity = Entity(
                id=entity_id,
                name=name,
                attributes=tuple(attributes),
                image_refs=tuple(images),
                description=description,
            )
        except ParseError as exc:
            raise ParseError(f"{where}: {exc}") from exc
        if root is not None:
            for ref in entity.image_refs:
                if not (root / ref).exists():
                    report.missing_images.append((entity_id, ref))
        entities[entity_id] = entity
    report.n_entities = len(entities)
    if report.missing_images:
        logger.warning(
            "%d entity image refs do not resolve under the image root",
            len(report.missing_images),
        )
    return KnowledgeBase(entities=entities), report


def load_entities(path: str | Path, image_root: str | Path | None = None) -> KnowledgeBase:
    """Load a KB from JSONL; see :func:`ingest_entities` for the report."""
    kb, _ = ingest_entities(path, image_root)
    return kb


def ingest_mentions(
    path: str | Path, kb: KnowledgeBase
) -> tuple[list[Mention], MentionIngestReport]:
    """Load mentions, dropping (with a count) any whose gt entity is unknown."""
    mentions: list[Mention] = []
    report = MentionIngestReport(per_split={s: 0 for s in SPLITS})
    for lineno, record in _iter_jsonl(path):
        where = f"{path}:{lineno}"
        mention_id = _require_str(record, "id", where)
        words = _require_str(record, "mention", where)
        sentence = _require_str(record, "sentence", where)
        entity_id = _require_str(record, "entity_id", where)
        split = _require_str(record, "split", where)
        image = record.get("image")
        if image is not None and not isinstance(image, str):
            raise ParseError(f"{where}: 'image' must be a string or null")
        try:
            mention = Mention(
                id=mention_id,
                words=words,
                sentence=sentence,
                image_ref=image,
                gt_entity_id=entity_id,
                split=split,
            )
        except ParseError as exc:
            raise ParseError(f"{where}: {exc}") from exc
        if mention.gt_entity_id not in kb:
            report.n_dropped += 1
            report.dropped_ids.append(mention.id)
            continue
        mentions.append(mention)
        report.per_split[mention.split] += 1
    report.n_loaded = len(mentions)
    if report.n_dropped:
        logger.warning(
            "dropped %d mention(s) whose gt entity is absent from the KB",
            report.n_dropped,
        )
    return mentions, report


def load_mentions(path: str | Path, kb: KnowledgeBase) -> list[Mention]:
    """Load mentions from JSONL; unresolvable gt ids are dropped, not fatal."""
    mentions, _ = ingest_mentions(path, kb)
    return mentions


@dataclass(frozen=True)
class MentionSplits:
    """Train/valid/test partition of a loaded mention list."""

    train: tuple[Mention, ...]
    valid: tuple[Mention, ...]
    test: tuple[Mention, ...]

    def for_split(self, split: str) -> tuple[Mention, ...]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)


def split_mentions(mentions: list[Mention]) -> MentionSplits:
    by_split: dict[str, list[Mention]] = {s: [] for s in SPLITS}
    for mention in mentions:
        by_split[mention.split].append(mention)
    return MentionSplits(
        train=tuple(by_split["train"]),
        valid=tuple(by_split["valid"]),
        test=tuple(by_split["test"]),
    )


def subset_training(
    mentions: list[Mention], fraction: float, seed: int
) -> list[Mention]:
    """Sample ``floor(fraction * len)`` training mentions without replacement.

    The sample is a seeded uniform shuffle followed by a prefix take, so it
    is bit-identical across runs for a fixed seed.  Validation and test
    splits are never touched by this function (it refuses non-train input).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if any(m.split != "train" for m in mentions):
        raise ValueError("subset_training expects train-split mentions only")
    k = math.floor(fraction * len(mentions))
    indices = list(range(len(mentions)))
    random.Random(seed).shuffle(indices)
    return [mentions[i] for i in indices[:k]]
