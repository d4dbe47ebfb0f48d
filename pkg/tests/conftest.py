import pytest
import torch

from mimic_el.data_model import Entity, Mention
from mimic_el.encoders import DTYPE, FeatureBundle
from mimic_el.interaction import InteractionWeights

TINY = {"d_T": 8, "d_v": 6, "d_t": 4, "d_c": 4}


def random_bundle(seed: int, d_T: int = 8, d_v: int = 6, n_text: int = 3, n_patches: int = 3) -> FeatureBundle:
    """Random features honoring the bundle invariant (global = row 0)."""
    g = torch.Generator().manual_seed(seed)
    t_l = torch.randn(n_text, d_T, generator=g, dtype=DTYPE)
    v_l = torch.randn(n_patches, d_v, generator=g, dtype=DTYPE)
    return FeatureBundle(t_G=t_l[0], T_L=t_l, v_G=v_l[0], V_L=v_l)


def tiny_weights(seed: int = 0) -> InteractionWeights:
    return InteractionWeights(
        d_T=TINY["d_T"], d_v=TINY["d_v"], d_t=TINY["d_t"], d_c=TINY["d_c"], seed=seed
    )


@pytest.fixture
def weights() -> InteractionWeights:
    return tiny_weights(0)


@pytest.fixture
def bundle_pair() -> tuple[FeatureBundle, FeatureBundle]:
    return random_bundle(11), random_bundle(22)


def write_jsonl(path, lines):
    import json

    path.write_text("\n".join(json.dumps(obj) for obj in lines) + "\n", encoding="utf-8")


def entity_record(i: int, **extra) -> dict:
    record = {
        "id": f"Q{i}",
        "name": f"entity {i}",
        "attributes": [f"attr {i}"],
        "images": [],
        "description": None,
    }
    record.update(extra)
    return record


def mention_record(i: int, entity: str, split: str = "train", **extra) -> dict:
    record = {
        "id": f"m{i}",
        "mention": f"entity {i}",
        "sentence": f"entity {i} did something in place {i}.",
        "image": None,
        "entity_id": entity,
        "split": split,
    }
    record.update(extra)
    return record


def make_entity(i: int) -> Entity:
    return Entity(id=f"Q{i}", name=f"entity {i}", attributes=(f"attr {i}",))


def make_mention(i: int, entity: str, split: str = "train") -> Mention:
    return Mention(
        id=f"m{i}",
        words=f"entity {i}",
        sentence=f"entity {i} did something.",
        image_ref=None,
        gt_entity_id=entity,
        split=split,
    )
