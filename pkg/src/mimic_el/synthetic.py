"""Deterministic synthetic dataset with a separable linking signal.

Each entity gets unique name/attribute tokens and a distinct color-block
image; mentions reuse their entity's tokens inside filler sentences and a
noised copy of its image.  Matched pairs therefore correlate strongly in
both modalities under the toy encoders, so a short training run must reach
near-perfect ranking.  A slice of mentions is left imageless to exercise
the zero-padding path end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

_GIVEN = ("alba", "boris", "carla", "dmitri", "elena", "farid", "greta", "hiro")
_FAMILY = ("ames", "bryce", "cua", "duarte", "egan", "fuchs", "grahn", "hsu")
_PLACES = ("astoria", "brixton", "chiba", "davao", "essen", "faro", "gori", "hilo")


@dataclass(frozen=True)
class SyntheticPaths:
    root: Path
    entities: Path
    mentions: Path
    image_root: Path


def _entity_name(index: int) -> str:
    return f"{_GIVEN[index % 8]}{index:03d} {_FAMILY[(index // 8) % 8]}{index:03d}"


def _entity_image(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.integers(0, 256, size=3, dtype=np.uint8)
    canvas = np.tile(base, (size, size, 1)).astype(np.uint8)
    for _ in range(3):
        x0, y0 = rng.integers(0, size // 2, size=2)
        w, h = rng.integers(size // 8, size // 2, size=2)
        color = rng.integers(0, 256, size=3)
        canvas[y0 : y0 + h, x0 : x0 + w] = color
    return canvas


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_entities: int = 64,
    mentions_per_entity: int = 4,
    image_size: int = 64,
    missing_image_every: int = 10,
    seed: int = 0,
) -> SyntheticPaths:
    """Write entity/mention JSONL files plus an image store under out_dir.

    Per entity: ``mentions_per_entity - 1`` train mentions and one held-out
    mention that alternates between the valid and test splits, so every
    entity is seen in training and both eval splits cover the KB.
    """
    root = Path(out_dir)
    image_root = root / "images"
    image_root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    entity_lines = []
    for i in range(n_entities):
        name = _entity_name(i)
        image_name = f"entity_{i:03d}.png"
        Image.fromarray(_entity_image(rng, image_size)).save(image_root / image_name)
        entity_lines.append(
            json.dumps(
                {
                    "id": f"Q{i:04d}",
                    "name": name,
                    "attributes": [f"occupation role{i:03d}", "person"],
                    "images": [image_name],
                    "description": f"synthetic record {i}",
                }
            )
        )
    entities_path = root / "entities.jsonl"
    entities_path.write_text("\n".join(entity_lines) + "\n", encoding="utf-8")

    mention_lines = []
    counter = 0
    for i in range(n_entities):
        name = _entity_name(i)
        entity_png = np.asarray(Image.open(image_root / f"entity_{i:03d}.png"))
        for j in range(mentions_per_entity):
            if j < mentions_per_entity - 1:
                split = "train"
            else:
                split = "valid" if i % 2 == 0 else "test"
            place = _PLACES[int(rng.integers(0, len(_PLACES)))]
            sentence = f"{name} visited {place} and spoke about topic{counter:03d}."
            if counter % missing_image_every == 0:
                image_ref = None
            else:
                noise = rng.integers(-20, 21, size=entity_png.shape)
                noisy = np.clip(entity_png.astype(int) + noise, 0, 255).astype(np.uint8)
                image_ref = f"mention_{counter:04d}.png"
                Image.fromarray(noisy).save(image_root / image_ref)
            mention_lines.append(
                json.dumps(
                    {
                        "id": f"m{counter:04d}",
                        "mention": name,
                        "sentence": sentence,
                        "image": image_ref,
                        "entity_id": f"Q{i:04d}",
                        "split": split,
                    }
                )
            )
            counter += 1
    mentions_path = root / "mentions.jsonl"
    mentions_path.write_text("\n".join(mention_lines) + "\n", encoding="utf-8")
    return SyntheticPaths(
        root=root, entities=entities_path, mentions=mentions_path, image_root=image_root
    )


def main() -> None:
    import argparse

    parser = argparse.ArgumentParser(description="Generate the synthetic linking dataset.")
    parser.add_argument("out_dir")
    parser.add_argument("--entities", type=int, default=64)
    parser.add_argument("--mentions-per-entity", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    paths = generate_synthetic_dataset(
        args.out_dir,
        n_entities=args.entities,
        mentions_per_entity=args.mentions_per_entity,
        seed=args.seed,
    )
    print(paths.entities)
    print(paths.mentions)
    print(paths.image_root)


if __name__ == "__main__":
    main()
