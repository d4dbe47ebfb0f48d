"""Linking model assembly: encoders + interaction weights + checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from mimic_el.data_model import Entity, Mention
from mimic_el.encoders import (
    EncoderConfig,
    FeatureBundle,
    ImageInput,
    PreprocessStats,
    build_backends,
    build_entity_text_input,
    build_mention_text_input,
    get_backends,
    preprocess_image,
)
from mimic_el.interaction import ALL_UNITS, InteractionWeights

CHECKPOINT_FORMAT = 1


@dataclass
class LinkingModel:
    """Everything needed to score mentions against entities."""

    encoder_cfg: EncoderConfig
    text_encoder: nn.Module
    image_encoder: nn.Module
    weights: InteractionWeights
    units: frozenset[str] = ALL_UNITS

    def encode_entities(
        self,
        entities: list[Entity],
        image_root: str | Path | None = None,
        stats: PreprocessStats | None = None,
    ) -> list[FeatureBundle]:
        """Batch-encode entities (first listed image each) into bundles."""
        texts = [build_entity_text_input(e, self.encoder_cfg) for e in entities]
        images = [
            preprocess_image(
                e.image_refs[0] if e.image_refs else None,
                self.encoder_cfg,
                image_root,
                stats,
            )
            for e in entities
        ]
        return self._encode(texts, images)

    def encode_mentions(
        self,
        mentions: list[Mention],
        image_root: str | Path | None = None,
        stats: PreprocessStats | None = None,
    ) -> list[FeatureBundle]:
        texts = [build_mention_text_input(m, self.encoder_cfg) for m in mentions]
        images = [
            preprocess_image(m.image_ref, self.encoder_cfg, image_root, stats)
            for m in mentions
        ]
        return self._encode(texts, images)

    def encode_query(
        self,
        words: str,
        sentence: str,
        image_path: str | Path | None = None,
    ) -> FeatureBundle:
        """Encode an ad-hoc mention (single linking query)."""
        mention = Mention(
            id="query", words=words, sentence=sentence,
            image_ref=str(image_path) if image_path is not None else None,
            gt_entity_id="", split="test",
        )
        return self.encode_mentions([mention])[0]

    def _encode(self, texts, images: list[ImageInput]) -> list[FeatureBundle]:
        with torch.no_grad():
            t_g, t_l = self.text_encoder.encode(texts)
            v_g, v_l = self.image_encoder.encode(images)
        return [
            FeatureBundle(t_G=t_g[i], T_L=t_l[i], v_G=v_g[i], V_L=v_l[i])
            for i in range(len(texts))
        ]

    def fingerprint(self) -> str:
        """Stable digest over configs and every weight tensor."""
        digest = hashlib.sha256()
        digest.update(json.dumps(dataclasses.asdict(self.encoder_cfg), sort_keys=True).encode())
        digest.update(",".join(sorted(self.units)).encode())
        for module in (self.text_encoder, self.image_encoder, self.weights):
            for key in sorted(module.state_dict()):
                tensor = module.state_dict()[key]
                digest.update(key.encode())
                digest.update(tensor.detach().to(torch.float64).numpy().tobytes())
        return digest.hexdigest()


def init_model(
    encoder_cfg: EncoderConfig,
    d_t: int,
    d_c: int,
    seed: int = 0,
    units: frozenset[str] = ALL_UNITS,
    share_encoders: bool = True,
) -> LinkingModel:
    """Fresh model with seeded interaction weights.

    ``share_encoders`` reuses the process-wide cached encoder pair (valid
    while encoders stay frozen); pass False when encoder weights will be
    fine-tuned so the shared instances are not mutated.
    """
    backends = get_backends(encoder_cfg) if share_encoders else build_backends(encoder_cfg)
    weights = InteractionWeights(
        d_T=encoder_cfg.d_T, d_v=encoder_cfg.d_v, d_t=d_t, d_c=d_c, seed=seed
    )
    return LinkingModel(
        encoder_cfg=encoder_cfg,
        text_encoder=backends[0],
        image_encoder=backends[1],
        weights=weights,
        units=frozenset(units),
    )


def save_checkpoint(model: LinkingModel, path: str | Path, metadata: dict) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "encoder_config": dataclasses.asdict(model.encoder_cfg),
        "units": sorted(model.units),
        "d_t": model.weights.d_t,
        "d_c": model.weights.d_c,
        "interaction_state": model.weights.state_dict(),
        "text_encoder_state": model.text_encoder.state_dict(),
        "image_encoder_state": model.image_encoder.state_dict(),
        "metadata": metadata,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[LinkingModel, dict]:
    """Rebuild a model from a checkpoint file; returns (model, metadata)."""
    payload = torch.load(Path(path), weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format in {path}")
    encoder_cfg = EncoderConfig(**payload["encoder_config"])
    model = init_model(
        encoder_cfg,
        d_t=payload["d_t"],
        d_c=payload["d_c"],
        units=frozenset(payload["units"]),
        share_encoders=False,
    )
    model.weights.load_state_dict(payload["interaction_state"])
    model.text_encoder.load_state_dict(payload["text_encoder_state"])
    model.image_encoder.load_state_dict(payload["image_encoder_state"])
    return model, payload["metadata"]
