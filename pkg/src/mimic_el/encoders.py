"""Unified mention/entity inputs and global/local feature extraction.

Mentions and entities share the same encoders.  Text inputs follow one
template per object kind:

* entity:  ``[CLS] name [SEP] attr1. attr2. ... [SEP]``
* mention: ``[CLS] mention words [SEP] sentence [SEP]``

Encoders return a global vector (always the [CLS]-position row) plus the
full local matrix per object.  Two backends exist behind one contract: a
seeded, dependency-free toy backend used for desk-scale work and tests,
and an adapter slot for pretrained transformer checkpoints.

Missing or unreadable images degrade to an all-zero pixel grid which is
encoded like any other image (zero padding at the input, not at the
feature level).
"""

from __future__ import annotations

import functools
import hashlib
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from mimic_el.data_model import Entity, Mention

logger = logging.getLogger(__name__)

DTYPE = torch.float64

CLS_ID = 0
SEP_ID = 1
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class EncodingError(Exception):
    """Inputs that the configured backend cannot encode."""


class EncoderBackendError(Exception):
    """The requested encoder backend is unavailable or misconfigured."""


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry and backend selection for both encoders.

    ``d_T`` is the text feature width, ``d_v`` the (projected) image
    feature width.  An ``image_size`` x ``image_size`` input with patch
    size ``patch_size`` yields ``(image_size / patch_size)**2`` patches
    plus one [CLS] row.
    """

    d_T: int = 512
    d_v: int = 96
    max_len: int = 40
    patch_size: int = 32
    image_size: int = 224
    channels: int = 3
    vocab_size: int = 8192
    backend: str = "toy"
    toy_seed: int = 0
    pretrained_path: str | None = None

    def __post_init__(self) -> None:
        for name in ("d_T", "d_v", "max_len", "patch_size", "image_size", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must leave room for [CLS]/[SEP]")
        if self.backend not in ("toy", "pretrained"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TextInput:
    """Tokenized text sequence with segment markers for the two spans."""

    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.token_ids or self.token_ids[0] != CLS_ID:
            raise ValueError("text input must begin with [CLS]")
        if len(self.token_ids) != len(self.segment_ids):
            raise ValueError("token/segment length mismatch")

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class ImageInput:
    """Normalized pixel grid; all-zero when the source image is missing."""

    pixels: torch.Tensor
    is_missing: bool = False


@dataclass
class FeatureBundle:
    """Encoder output for one object: global + local features per modality."""

    t_G: torch.Tensor  # (d_T,)
    T_L: torch.Tensor  # (l+1, d_T), row 0 = [CLS] state
    v_G: torch.Tensor  # (d_v,)
    V_L: torch.Tensor  # (n+1, d_v), row 0 = [CLS] state


@dataclass
class PreprocessStats:
    """Counters for degraded image loads."""

    missing: int = 0
    unreadable: int = 0


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace+punctuation split used by the toy backend."""
    return _TOKEN_RE.findall(text.lower())


def token_to_id(token: str, vocab_size: int) -> int:
    """Stable hashed vocabulary id in [2, vocab_size); 0/1 are [CLS]/[SEP]."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return 2 + int.from_bytes(digest, "little") % (vocab_size - 2)


def _assemble_text_input(span_a: str, span_b: str, cfg: EncoderConfig) -> TextInput:
    tokens_a = tokenize(span_a)
    tokens_b = tokenize(span_b)
    tokens = [CLS_TOKEN, *tokens_a, SEP_TOKEN, *tokens_b, SEP_TOKEN]
    ids = (
        [CLS_ID]
        + [token_to_id(t, cfg.vocab_size) for t in tokens_a]
        + [SEP_ID]
        + [token_to_id(t, cfg.vocab_size) for t in tokens_b]
        + [SEP_ID]
    )
    segments = [0] * (len(tokens_a) + 2) + [1] * (len(tokens_b) + 1)
    # Right-truncate the assembled sequence so the leading span survives.
    ids = ids[: cfg.max_len]
    segments = segments[: cfg.max_len]
    tokens = tokens[: cfg.max_len]
    return TextInput(token_ids=tuple(ids), segment_ids=tuple(segments), tokens=tuple(tokens))


def render_entity_spans(entity: Entity) -> tuple[str, str]:
    """Entity template spans: name, then period-terminated attributes."""
    return entity.name, " ".join(f"{attr}." for attr in entity.attributes)


def render_mention_spans(mention: Mention) -> tuple[str, str]:
    return mention.words, mention.sentence


def build_entity_text_input(entity: Entity, cfg: EncoderConfig) -> TextInput:
    span_a, span_b = render_entity_spans(entity)
    return _assemble_text_input(span_a, span_b, cfg)


def build_mention_text_input(mention: Mention, cfg: EncoderConfig) -> TextInput:
    span_a, span_b = render_mention_spans(mention)
    return _assemble_text_input(span_a, span_b, cfg)


# ---------------------------------------------------------------------------
# Toy backend: hash-embedded tokens / patch means, fixed seeded mixing.
# ---------------------------------------------------------------------------


def _seeded(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


class ToyTextEncoder(nn.Module):
    """Deterministic stand-in for a transformer text encoder.

    Each row mixes its own token embedding with the sequence mean, so the
    [CLS] row (and every other row) depends on the full content while the
    computation stays per-item pure: batch composition cannot leak across
    items.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        g = _seeded(cfg.toy_seed)
        d = cfg.d_T
        self.vocab_size = cfg.vocab_size
        self.embedding = nn.Parameter(torch.randn(cfg.vocab_size, d, generator=g, dtype=DTYPE))
        self.positional = nn.Parameter(0.1 * torch.randn(cfg.max_len, d, generator=g, dtype=DTYPE))
        self.segment = nn.Parameter(0.1 * torch.randn(2, d, generator=g, dtype=DTYPE))
        self.w_self = nn.Parameter(torch.randn(d, d, generator=g, dtype=DTYPE) / d**0.5)
        self.w_context = nn.Parameter(torch.randn(d, d, generator=g, dtype=DTYPE) / d**0.5)
        self.bias = nn.Parameter(0.1 * torch.randn(d, generator=g, dtype=DTYPE))

    def encode_one(self, text: TextInput) -> torch.Tensor:
        ids = torch.tensor(text.token_ids, dtype=torch.long)
        if int(ids.max()) >= self.vocab_size or int(ids.min()) < 0:
            raise EncodingError(
                f"token id out of range [0, {self.vocab_size}): {int(ids.max())}"
            )
        segments = torch.tensor(text.segment_ids, dtype=torch.long)
        embedded = self.embedding[ids] + self.positional[: len(ids)] + self.segment[segments]
        context = embedded.mean(dim=0)
        return torch.tanh(embedded @ self.w_self + context @ self.w_context + self.bias)

    def encode(self, batch: list[TextInput]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        locals_ = [self.encode_one(text) for text in batch]
        globals_ = torch.stack([local[0] for local in locals_])
        return globals_, locals_


class ToyImageEncoder(nn.Module):
    """Per-patch channel means pushed through a fixed random projection."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        g = _seeded(cfg.toy_seed + 1)
        self.patch_size = cfg.patch_size
        self.expected_shape = (cfg.channels, cfg.image_size, cfg.image_size)
        self.w_patch = nn.Parameter(torch.randn(cfg.channels, cfg.d_v, generator=g, dtype=DTYPE))
        self.b_patch = nn.Parameter(0.1 * torch.randn(cfg.d_v, generator=g, dtype=DTYPE))
        self.w_cls = nn.Parameter(torch.randn(cfg.channels, cfg.d_v, generator=g, dtype=DTYPE))
        self.b_cls = nn.Parameter(0.1 * torch.randn(cfg.d_v, generator=g, dtype=DTYPE))

    def _patch_means(self, pixels: torch.Tensor) -> torch.Tensor:
        c, h, w = pixels.shape
        p = self.patch_size
        grid = pixels.reshape(c, h // p, p, w // p, p).mean(dim=(2, 4))
        return grid.reshape(c, -1).T  # (n, C), row-major over the patch grid

    def encode_one(self, image: ImageInput) -> torch.Tensor:
        if tuple(image.pixels.shape) != self.expected_shape:
            raise EncodingError(
                f"image shape {tuple(image.pixels.shape)} != expected {self.expected_shape}"
            )
        means = self._patch_means(image.pixels.to(DTYPE))
        patches = torch.tanh(means @ self.w_patch + self.b_patch)
        cls = torch.tanh(means.mean(dim=0) @ self.w_cls + self.b_cls)
        return torch.cat([cls.unsqueeze(0), patches], dim=0)

    def encode(self, batch: list[ImageInput]) -> tuple[torch.Tensor, torch.Tensor]:
        locals_ = torch.stack([self.encode_one(image) for image in batch])
        return locals_[:, 0, :], locals_


def _load_pretrained_backends(cfg: EncoderConfig) -> tuple[nn.Module, nn.Module]:
    """Adapter slot for transformer checkpoints (CLIP-style text + ViT).

    Kept import-guarded: the toy backend is the supported desk-scale path
    and nothing here is exercised without a local checkpoint directory.
    """
    if cfg.pretrained_path is None:
        raise EncoderBackendError("backend 'pretrained' requires pretrained_path")
    try:
        from transformers import CLIPModel, CLIPProcessor  # noqa: F401
    except ImportError as exc:
        raise EncoderBackendError(
            "backend 'pretrained' needs the optional 'transformers' dependency"
        ) from exc
    path = Path(cfg.pretrained_path)
    if not path.exists():
        raise EncoderBackendError(f"no checkpoint directory at {path}")
    from mimic_el.pretrained import ClipImageAdapter, ClipTextAdapter

    return ClipTextAdapter(cfg, path), ClipImageAdapter(cfg, path)


@functools.lru_cache(maxsize=8)
def get_backends(cfg: EncoderConfig) -> tuple[nn.Module, nn.Module]:
    """Shared (read-only) encoder pair for a config.

    Trainers that fine-tune encoder weights must call
    :func:`build_backends` instead so the cached instances stay pristine.
    """
    return build_backends(cfg)


def build_backends(cfg: EncoderConfig) -> tuple[nn.Module, nn.Module]:
    if cfg.backend == "toy":
        return ToyTextEncoder(cfg), ToyImageEncoder(cfg)
    return _load_pretrained_backends(cfg)


def encode_text(batch: list[TextInput], cfg: EncoderConfig) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Encode tokenized inputs to (global vectors, per-item local matrices)."""
    text_encoder, _ = get_backends(cfg)
    with torch.no_grad():
        return text_encoder.encode(batch)


def encode_image(batch: list[ImageInput], cfg: EncoderConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Encode pixel grids to (global vectors, local matrices incl. [CLS])."""
    _, image_encoder = get_backends(cfg)
    with torch.no_grad():
        return image_encoder.encode(batch)


def zero_image(cfg: EncoderConfig) -> torch.Tensor:
    return torch.zeros(cfg.channels, cfg.image_size, cfg.image_size, dtype=DTYPE)


def preprocess_image(
    ref: str | Path | None,
    cfg: EncoderConfig,
    image_root: str | Path | None = None,
    stats: PreprocessStats | None = None,
) -> ImageInput:
    """Decode, rescale and normalize one image; degrade to zeros when absent.

    Unreadable files are treated like missing ones (with a warning) so a
    corrupt image can never abort a run.
    """
    if ref is None:
        if stats is not None:
            stats.missing += 1
        return ImageInput(pixels=zero_image(cfg), is_missing=True)
    path = Path(image_root) / ref if image_root is not None else Path(ref)
    try:
        from PIL import Image

        with Image.open(path) as img:
            rgb = img.convert("RGB").resize(
                (cfg.image_size, cfg.image_size), Image.Resampling.BILINEAR
            )
            raw = torch.frombuffer(bytearray(rgb.tobytes()), dtype=torch.uint8)
    except Exception:  # noqa: BLE001 - any decode failure degrades to missing
        logger.warning("unreadable image %s; substituting zero padding", path)
        if stats is not None:
            stats.unreadable += 1
        return ImageInput(pixels=zero_image(cfg), is_missing=True)
    pixels = raw.reshape(cfg.image_size, cfg.image_size, 3).permute(2, 0, 1)
    return ImageInput(pixels=pixels.to(DTYPE) / 255.0, is_missing=False)


def encode_bundle(text: TextInput, image: ImageInput, cfg: EncoderConfig) -> FeatureBundle:
    """Encode one object's text+image pair into a feature bundle."""
    t_g, t_l = encode_text([text], cfg)
    v_g, v_l = encode_image([image], cfg)
    return FeatureBundle(t_G=t_g[0], T_L=t_l[0], v_G=v_g[0], V_L=v_l[0])


def encode_entity(
    entity: Entity,
    cfg: EncoderConfig,
    image_root: str | Path | None = None,
    stats: PreprocessStats | None = None,
) -> FeatureBundle:
    """Bundle for a KB entity; only the first listed image is encoded."""
    ref = entity.image_refs[0] if entity.image_refs else None
    text = build_entity_text_input(entity, cfg)
    image = preprocess_image(ref, cfg, image_root, stats)
    return encode_bundle(text, image, cfg)


def encode_mention(
    mention: Mention,
    cfg: EncoderConfig,
    image_root: str | Path | None = None,
    stats: PreprocessStats | None = None,
) -> FeatureBundle:
    text = build_mention_text_input(mention, cfg)
    image = preprocess_image(mention.image_ref, cfg, image_root, stats)
    return encode_bundle(text, image, cfg)


# ---------------------------------------------------------------------------
# Golden-tensor regression files: little-endian u32 ndim, u32 dims, f64 data.
# ---------------------------------------------------------------------------


def write_golden(path: str | Path, tensor: torch.Tensor) -> None:
    data = tensor.detach().to(torch.float64).contiguous()
    shape = tuple(data.shape)
    header = struct.pack(f"<I{len(shape)}I", len(shape), *shape)
    payload = data.numpy().astype("<f8").tobytes()
    Path(path).write_bytes(header + payload)


def read_golden(path: str | Path) -> torch.Tensor:
    blob = Path(path).read_bytes()
    (ndim,) = struct.unpack_from("<I", blob, 0)
    shape = struct.unpack_from(f"<{ndim}I", blob, 4)
    offset = 4 + 4 * ndim
    count = 1
    for dim in shape:
        count *= dim
    values = struct.unpack_from(f"<{count}d", blob, offset)
    return torch.tensor(values, dtype=torch.float64).reshape(shape)
