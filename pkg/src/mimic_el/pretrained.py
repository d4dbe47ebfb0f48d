"""Adapters that plug pretrained transformer checkpoints into the encoder
contract (global vector = row 0 of the local matrix, for both modalities).

These are the full-scale counterparts of the toy backends: a CLIP-style
dual encoder whose text tower supplies (l+1) x d_T hidden states and whose
vision tower supplies patch hidden states projected to d_v by one added
linear layer.  They require a locally available checkpoint directory and
the optional ``transformers`` dependency; nothing in the desk-scale test
suite exercises them beyond the configuration error paths.
"""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn

from mimic_el.encoders import (
    DTYPE,
    EncoderBackendError,
    EncoderConfig,
    ImageInput,
    TextInput,
)


def _load_clip(path: Path):
    try:
        from transformers import CLIPModel, CLIPTokenizerFast
    except ImportError as exc:  # pragma: no cover - guarded in encoders
        raise EncoderBackendError("transformers is not installed") from exc
    try:
        model = CLIPModel.from_pretrained(path)
        tokenizer = CLIPTokenizerFast.from_pretrained(path)
    except Exception as exc:
        raise EncoderBackendError(f"cannot load checkpoint from {path}: {exc}") from exc
    return model, tokenizer


class ClipTextAdapter(nn.Module):
    """Text tower adapter; re-tokenizes from the raw token strings."""

    def __init__(self, cfg: EncoderConfig, path: Path):
        super().__init__()
        self.cfg = cfg
        self.model, self.tokenizer = _load_clip(path)
        width = self.model.config.text_config.hidden_size
        if width != cfg.d_T:
            raise EncoderBackendError(
                f"checkpoint text width {width} != configured d_T {cfg.d_T}"
            )

    def encode(self, batch: list[TextInput]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        texts = [" ".join(t.tokens[1:]) for t in batch]  # drop the symbolic [CLS]
        encoded = self.tokenizer(
            texts,
            padding=True,
            truncation=True,
            max_length=self.cfg.max_len,
            return_tensors="pt",
        )
        out = self.model.text_model(**encoded)
        hidden = out.last_hidden_state.to(DTYPE)
        lengths = encoded["attention_mask"].sum(dim=1)
        pooled = out.pooler_output.to(DTYPE)
        locals_ = []
        for i in range(hidden.shape[0]):
            rows = hidden[i, : int(lengths[i])]
            locals_.append(torch.cat([pooled[i].unsqueeze(0), rows[1:]], dim=0))
        return pooled, locals_


class ClipImageAdapter(nn.Module):
    """Vision tower adapter with one added projection to d_v."""

    def __init__(self, cfg: EncoderConfig, path: Path):
        super().__init__()
        self.cfg = cfg
        self.model, _ = _load_clip(path)
        vision_cfg = self.model.config.vision_config
        if vision_cfg.patch_size != cfg.patch_size or vision_cfg.image_size != cfg.image_size:
            raise EncoderBackendError(
                "checkpoint patch/image size does not match the encoder config"
            )
        self.project = nn.Linear(vision_cfg.hidden_size, cfg.d_v, dtype=DTYPE)

    def encode(self, batch: list[ImageInput]) -> tuple[torch.Tensor, torch.Tensor]:
        pixels = torch.stack([b.pixels for b in batch]).to(torch.float32)
        hidden = self.model.vision_model(pixel_values=pixels).last_hidden_state
        locals_ = self.project(hidden.to(DTYPE))
        return locals_[:, 0, :], locals_
