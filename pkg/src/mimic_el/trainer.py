"""Seeded end-to-end training with per-epoch validation and checkpointing.

Batches pair each mention with its ground-truth entity; the other entities
in the batch act as negatives.  After every epoch the validation split is
ranked against the full KB and the checkpoint with the highest validation
MRR wins.  Runs are reproducible: with a fixed config and seed the batch
sequence, loss curve and history file are identical across runs.

Run directory layout::

    <out_dir>/<run_name>/config.json     full config snapshot
    <out_dir>/<run_name>/epoch_<n>.ckpt  one checkpoint per epoch
    <out_dir>/<run_name>/history.jsonl   {"epoch", "loss", "val_mrr"} per line
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from mimic_el.data_model import KnowledgeBase, Mention, MentionSplits, subset_training
from mimic_el.encoders import (
    EncoderConfig,
    FeatureBundle,
    ImageInput,
    TextInput,
    build_entity_text_input,
    build_mention_text_input,
    preprocess_image,
)
from mimic_el.evaluator import compute_metrics, ranks_for_mentions
from mimic_el.interaction import collate_bundles, score_matrices
from mimic_el.model import LinkingModel, init_model, save_checkpoint
from mimic_el.objective import total_objective

logger = logging.getLogger(__name__)


class TrainingDivergedError(Exception):
    """Raised when a non-finite loss or score matrix appears."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and ablation settings.

    ``use_*`` flags remove a unit from scoring (and with it from the loss);
    ``use_loss_*`` flags keep the unit but drop only its independent loss
    term.  ``d_t``/``d_c`` are the interaction-layer widths.
    """

    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    seed: int = 0
    d_t: int = 96
    d_c: int = 96
    use_tglu: bool = True
    use_vdlu: bool = True
    use_cmfu: bool = True
    use_loss_t: bool = True
    use_loss_v: bool = True
    use_loss_c: bool = True
    low_resource_fraction: float | None = None
    freeze_encoders: bool = True
    grad_clip: float | None = None
    temperature: float = 1.0
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning_rate and temperature must be positive")
        if not (self.use_tglu or self.use_vdlu or self.use_cmfu):
            raise ValueError("at least one interaction unit must be enabled")
        if self.low_resource_fraction is not None and not (
            0.0 < self.low_resource_fraction <= 1.0
        ):
            raise ValueError("low_resource_fraction must be in (0, 1]")

    @property
    def units(self) -> frozenset[str]:
        return frozenset(
            name
            for name, enabled in (
                ("tglu", self.use_tglu), ("vdlu", self.use_vdlu), ("cmfu", self.use_cmfu)
            )
            if enabled
        )

    @property
    def loss_units(self) -> frozenset[str]:
        return frozenset(
            name
            for name, enabled in (
                ("tglu", self.use_tglu and self.use_loss_t),
                ("vdlu", self.use_vdlu and self.use_loss_v),
                ("cmfu", self.use_cmfu and self.use_loss_c),
            )
            if enabled
        )


@dataclass
class CheckpointInfo:
    """Selected checkpoint after training."""

    path: str
    epoch: int
    val_mrr: float
    config: dict

    def __post_init__(self) -> None:
        if not 0.0 <= self.val_mrr <= 1.0:
            raise ValueError("validation MRR must lie in [0, 1]")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def select_best_checkpoint(history: list[tuple[int, float]]) -> int:
    """Epoch with the highest validation MRR; ties go to the earliest."""
    if not history:
        raise ValueError("empty training history")
    best_epoch, best_mrr = history[0]
    for epoch, mrr in history[1:]:
        if mrr > best_mrr:
            best_epoch, best_mrr = epoch, mrr
    return best_epoch


def _prepare_inputs(
    mentions: list[Mention],
    kb: KnowledgeBase,
    encoder_cfg: EncoderConfig,
    image_root,
) -> tuple[dict[str, tuple[TextInput, ImageInput]], dict[str, tuple[TextInput, ImageInput]]]:
    """Weight-independent tokenization/pixel work, done once per run."""
    mention_inputs = {
        m.id: (
            build_mention_text_input(m, encoder_cfg),
            preprocess_image(m.image_ref, encoder_cfg, image_root),
        )
        for m in mentions
    }
    entity_inputs = {
        e.id: (
            build_entity_text_input(e, encoder_cfg),
            preprocess_image(
                e.image_refs[0] if e.image_refs else None, encoder_cfg, image_root
            ),
        )
        for e in (kb[i] for i in kb.ids())
    }
    return mention_inputs, entity_inputs


def _encode_inputs(
    model: LinkingModel,
    inputs: list[tuple[TextInput, ImageInput]],
    grad: bool,
) -> list[FeatureBundle]:
    context = contextlib.nullcontext() if grad else torch.no_grad()
    with context:
        t_g, t_l = model.text_encoder.encode([t for t, _ in inputs])
        v_g, v_l = model.image_encoder.encode([i for _, i in inputs])
    return [
        FeatureBundle(t_G=t_g[i], T_L=t_l[i], v_G=v_g[i], V_L=v_l[i])
        for i in range(len(inputs))
    ]


def _matrix_stats(matrix: torch.Tensor | None) -> dict | None:
    if matrix is None:
        return None
    values = matrix.detach()
    return {
        "min": float(values.min()),
        "max": float(values.max()),
        "mean": float(values.mean()),
        "finite": bool(torch.isfinite(values).all()),
    }


def train(
    cfg: TrainConfig,
    splits: MentionSplits,
    kb: KnowledgeBase,
    encoder_cfg: EncoderConfig = EncoderConfig(),
    image_root: str | Path | None = None,
    out_dir: str | Path = "runs",
    run_name: str | None = None,
    step_callback: Callable[[int, float, LinkingModel], None] | None = None,
) -> CheckpointInfo:
    """Run the full optimization loop and return the best checkpoint.

    ``step_callback(step, loss, model)`` fires after every optimizer step
    and is meant for probes/diagnostics; it must not mutate the model.
    """
    kb.require_nonempty()
    if not splits.train:
        raise ValueError("no training mentions")
    if not splits.valid:
        raise ValueError("no validation mentions (needed for checkpoint selection)")

    seed_everything(cfg.seed)
    train_mentions = list(splits.train)
    if cfg.low_resource_fraction is not None and cfg.low_resource_fraction < 1.0:
        train_mentions = subset_training(
            train_mentions, cfg.low_resource_fraction, cfg.seed
        )
        logger.info("low-resource subset: %d training mentions", len(train_mentions))

    model = init_model(
        encoder_cfg,
        d_t=cfg.d_t,
        d_c=cfg.d_c,
        seed=cfg.seed,
        units=cfg.units,
        share_encoders=cfg.freeze_encoders,
    )
    trainable = list(model.weights.parameters())
    if cfg.freeze_encoders:
        for module in (model.text_encoder, model.image_encoder):
            for parameter in module.parameters():
                parameter.requires_grad_(False)
    else:
        trainable += list(model.text_encoder.parameters())
        trainable += list(model.image_encoder.parameters())
    optimizer = torch.optim.AdamW(
        trainable,
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )

    if run_name is None:
        run_name = time.strftime("run_%Y%m%d_%H%M%S")
        suffix = 0
        while (Path(out_dir) / run_name).exists():
            suffix += 1
            run_name = time.strftime("run_%Y%m%d_%H%M%S") + f"_{suffix}"
    run_dir = Path(out_dir) / run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    config_snapshot = {
        "train": dataclasses.asdict(cfg),
        "encoder": dataclasses.asdict(encoder_cfg),
    }
    (run_dir / "config.json").write_text(
        json.dumps(config_snapshot, indent=2) + "\n", encoding="utf-8"
    )

    mention_inputs, entity_inputs = _prepare_inputs(
        train_mentions + list(splits.valid), kb, encoder_cfg, image_root
    )
    entity_ids = tuple(kb.ids())
    entity_index = {entity_id: i for i, entity_id in enumerate(entity_ids)}
    frozen = cfg.freeze_encoders
    if frozen:
        mention_bundles = dict(
            zip(mention_inputs, _encode_inputs(model, list(mention_inputs.values()), grad=False))
        )
        entity_bundles = dict(
            zip(entity_inputs, _encode_inputs(model, list(entity_inputs.values()), grad=False))
        )
        entity_batch = collate_bundles([entity_bundles[i] for i in entity_ids])

    def batch_bundles(ids: list[str], table: dict, inputs: dict) -> list[FeatureBundle]:
        if frozen:
            return [table[i] for i in ids]
        return _encode_inputs(model, [inputs[i] for i in ids], grad=torch.is_grad_enabled())

    shuffler = random.Random(cfg.seed)
    history: list[dict] = []
    history_path = run_dir / "history.jsonl"
    history_path.write_text("", encoding="utf-8")
    step = 0
    stop = False

    for epoch in range(1, cfg.epochs + 1):
        order = list(range(len(train_mentions)))
        shuffler.shuffle(order)
        epoch_losses: list[float] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_mentions[i] for i in order[start : start + cfg.batch_size]]
            mb = collate_bundles(
                batch_bundles([m.id for m in batch], mention_bundles if frozen else None, mention_inputs)
            )
            eb = collate_bundles(
                batch_bundles(
                    [m.gt_entity_id for m in batch], entity_bundles if frozen else None, entity_inputs
                )
            )
            targets = torch.arange(len(batch))
            matrices = score_matrices(mb, eb, model.weights, cfg.units)

            def diagnostics(reason: str) -> str:
                return json.dumps(
                    {
                        "reason": reason,
                        "epoch": epoch,
                        "step": step,
                        "batch_mention_ids": [m.id for m in batch],
                        "scores": {
                            "s_t": _matrix_stats(matrices.s_t),
                            "s_v": _matrix_stats(matrices.s_v),
                            "s_c": _matrix_stats(matrices.s_c),
                            "s": _matrix_stats(matrices.s),
                        },
                    }
                )

            try:
                loss = total_objective(matrices, targets, cfg.loss_units, cfg.temperature)
            except ValueError as exc:
                raise TrainingDivergedError(diagnostics(str(exc))) from exc
            if not torch.isfinite(loss.total):
                raise TrainingDivergedError(diagnostics("non-finite loss"))
            optimizer.zero_grad()
            loss.total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            optimizer.step()
            step += 1
            loss_value = float(loss.total.detach())
            epoch_losses.append(loss_value)
            if step_callback is not None:
                step_callback(step, loss_value, model)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break

        with torch.no_grad():
            valid_ids = [m.id for m in splits.valid]
            if not frozen:
                entity_batch = collate_bundles(
                    _encode_inputs(model, [entity_inputs[i] for i in entity_ids], grad=False)
                )
                valid_bundles = _encode_inputs(
                    model, [mention_inputs[i] for i in valid_ids], grad=False
                )
            else:
                valid_bundles = [mention_bundles[i] for i in valid_ids]
            gt_indices = [entity_index[m.gt_entity_id] for m in splits.valid]
            ranks, _ = ranks_for_mentions(
                valid_bundles, gt_indices, entity_batch, entity_ids, model
            )
            val_mrr = compute_metrics(ranks, ks=(1,)).mrr

        mean_loss = sum(epoch_losses) / max(len(epoch_losses), 1)
        history.append({"epoch": epoch, "loss": mean_loss, "val_mrr": val_mrr})
        with history_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(history[-1]) + "\n")
        save_checkpoint(
            model,
            run_dir / f"epoch_{epoch}.ckpt",
            metadata={"epoch": epoch, "val_mrr": val_mrr, **config_snapshot},
        )
        logger.info("epoch %d: loss %.6f, val MRR %.4f", epoch, mean_loss, val_mrr)
        if stop:
            break

    best_epoch = select_best_checkpoint([(h["epoch"], h["val_mrr"]) for h in history])
    best = next(h for h in history if h["epoch"] == best_epoch)
    return CheckpointInfo(
        path=str(run_dir / f"epoch_{best_epoch}.ckpt"),
        epoch=best_epoch,
        val_mrr=best["val_mrr"],
        config=config_snapshot,
    )
