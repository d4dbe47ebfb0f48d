import json

import numpy as np
import pytest
import torch

from mimic_el.data_model import load_entities, load_mentions, split_mentions
from mimic_el.encoders import EncoderConfig
from mimic_el.interaction import collate_bundles, score_matrices
from mimic_el.model import load_checkpoint
from mimic_el.objective import total_objective
from mimic_el.synthetic import generate_synthetic_dataset
from mimic_el.trainer import (
    CheckpointInfo,
    TrainConfig,
    TrainingDivergedError,
    select_best_checkpoint,
    train,
)

ENC = EncoderConfig(d_T=32, d_v=12, max_len=16, image_size=64, patch_size=32, vocab_size=4096)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    paths = generate_synthetic_dataset(root, n_entities=16, seed=1)
    kb = load_entities(paths.entities, paths.image_root)
    splits = split_mentions(load_mentions(paths.mentions, kb))
    return paths, kb, splits


def small_config(**overrides) -> TrainConfig:
    base = dict(
        epochs=2, batch_size=16, learning_rate=3e-3, seed=0, d_t=8, d_c=8, max_steps=8
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestSelectBestCheckpoint:
    def test_argmax(self):
        assert select_best_checkpoint([(1, 0.5), (2, 0.7), (3, 0.6)]) == 2

    def test_tie_goes_to_earliest(self):
        assert select_best_checkpoint([(1, 0.7), (2, 0.7)]) == 1

    def test_single_entry(self):
        assert select_best_checkpoint([(5, 0.1)]) == 5

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            select_best_checkpoint([])


class TestTrainConfig:
    def test_all_units_disabled_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(use_tglu=False, use_vdlu=False, use_cmfu=False)

    def test_epoch_and_fraction_bounds(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(low_resource_fraction=1.5)

    def test_loss_units_follow_unit_ablation(self):
        cfg = TrainConfig(use_cmfu=False)
        assert cfg.units == frozenset({"tglu", "vdlu"})
        assert cfg.loss_units == frozenset({"tglu", "vdlu"})
        cfg = TrainConfig(use_loss_v=False)
        assert cfg.units == frozenset({"tglu", "vdlu", "cmfu"})
        assert cfg.loss_units == frozenset({"tglu", "cmfu"})

    def test_checkpoint_info_validates_mrr(self):
        with pytest.raises(ValueError):
            CheckpointInfo(path="x", epoch=1, val_mrr=1.5, config={})


class TestTraining:
    def test_two_seeded_runs_are_bitwise_identical(self, tiny_dataset, tmp_path):
        paths, kb, splits = tiny_dataset
        losses = {"a": [], "b": []}
        for name in ("a", "b"):
            train(
                small_config(),
                splits,
                kb,
                encoder_cfg=ENC,
                image_root=paths.image_root,
                out_dir=tmp_path,
                run_name=name,
                step_callback=lambda step, loss, model, key=name: losses[key].append(loss),
            )
        assert losses["a"][0] == losses["b"][0]  # tolerance 0 at step 1
        assert losses["a"] == losses["b"]
        history_a = (tmp_path / "a" / "history.jsonl").read_bytes()
        history_b = (tmp_path / "b" / "history.jsonl").read_bytes()
        assert history_a == history_b

    def test_run_directory_layout(self, tiny_dataset, tmp_path):
        paths, kb, splits = tiny_dataset
        info = train(
            small_config(epochs=2, max_steps=None),
            splits,
            kb,
            encoder_cfg=ENC,
            image_root=paths.image_root,
            out_dir=tmp_path,
            run_name="layout",
        )
        run_dir = tmp_path / "layout"
        assert (run_dir / "config.json").exists()
        assert (run_dir / "epoch_1.ckpt").exists()
        assert (run_dir / "epoch_2.ckpt").exists()
        history = [
            json.loads(line)
            for line in (run_dir / "history.jsonl").read_text().splitlines()
        ]
        assert [h["epoch"] for h in history] == [1, 2]
        assert set(history[0]) == {"epoch", "loss", "val_mrr"}
        best = max(history, key=lambda h: h["val_mrr"])
        assert info.epoch == best["epoch"]
        assert info.val_mrr == best["val_mrr"]
        assert info.path.endswith(f"epoch_{best['epoch']}.ckpt")

    def test_probe_loss_strictly_decreases_over_first_ten_steps(self, tiny_dataset, tmp_path):
        paths, kb, splits = tiny_dataset
        probe: dict = {}
        probe_losses: list[float] = []

        def callback(step, loss, model):
            if "mb" not in probe:
                mentions = list(splits.train[:16])
                probe["mb"] = collate_bundles(model.encode_mentions(mentions, paths.image_root))
                probe["eb"] = collate_bundles(
                    model.encode_entities([kb[m.gt_entity_id] for m in mentions], paths.image_root)
                )
            with torch.no_grad():
                matrices = score_matrices(probe["mb"], probe["eb"], model.weights)
                probe_losses.append(
                    float(total_objective(matrices, torch.arange(16)).total)
                )

        train(
            small_config(epochs=5, max_steps=10),
            splits,
            kb,
            encoder_cfg=ENC,
            image_root=paths.image_root,
            out_dir=tmp_path,
            run_name="probe",
            step_callback=callback,
        )
        assert len(probe_losses) == 10
        assert (np.diff(probe_losses) < 0).all()

    def test_divergence_aborts_with_diagnostics(self, tiny_dataset, tmp_path):
        paths, kb, splits = tiny_dataset
        with pytest.raises(TrainingDivergedError) as err:
            train(
                small_config(learning_rate=1e300, max_steps=9, epochs=3),
                splits,
                kb,
                encoder_cfg=ENC,
                image_root=paths.image_root,
                out_dir=tmp_path,
                run_name="diverge",
            )
        diagnostics = json.loads(str(err.value))
        assert diagnostics["batch_mention_ids"]
        assert "scores" in diagnostics

    def test_low_resource_fraction_shrinks_train_steps_only(self, tiny_dataset, tmp_path):
        paths, kb, splits = tiny_dataset
        steps = []
        train(
            small_config(
                epochs=1, batch_size=1, max_steps=None, low_resource_fraction=0.25
            ),
            splits,
            kb,
            encoder_cfg=ENC,
            image_root=paths.image_root,
            out_dir=tmp_path,
            run_name="lowres",
            step_callback=lambda step, loss, model: steps.append(step),
        )
        # 16 entities x 3 train mentions = 48; floor(0.25 * 48) = 12 batches of 1.
        assert len(steps) == 12
        assert len(splits.valid) == 8 and len(splits.test) == 8  # untouched

    def test_ablated_run_completes_and_checkpoint_reloads(self, tiny_dataset, tmp_path):
        paths, kb, splits = tiny_dataset
        info = train(
            small_config(use_cmfu=False, use_loss_t=False),
            splits,
            kb,
            encoder_cfg=ENC,
            image_root=paths.image_root,
            out_dir=tmp_path,
            run_name="ablate",
        )
        model, metadata = load_checkpoint(info.path)
        assert model.units == frozenset({"tglu", "vdlu"})
        assert metadata["train"]["use_cmfu"] is False
        assert 0.0 <= info.val_mrr <= 1.0

    def test_trainable_encoders_receive_updates(self, tiny_dataset, tmp_path):
        paths, kb, splits = tiny_dataset
        info = train(
            small_config(freeze_encoders=False, max_steps=3, epochs=1),
            splits,
            kb,
            encoder_cfg=ENC,
            image_root=paths.image_root,
            out_dir=tmp_path,
            run_name="finetune",
        )
        model, _ = load_checkpoint(info.path)
        from mimic_el.encoders import build_backends

        pristine_text, pristine_image = build_backends(ENC)
        assert not torch.equal(model.text_encoder.embedding, pristine_text.embedding)
        assert not torch.equal(model.image_encoder.w_patch, pristine_image.w_patch)

    def test_missing_validation_split_rejected(self, tiny_dataset, tmp_path):
        paths, kb, splits = tiny_dataset
        from mimic_el.data_model import MentionSplits

        no_valid = MentionSplits(train=splits.train, valid=(), test=splits.test)
        with pytest.raises(ValueError, match="validation"):
            train(small_config(), no_valid, kb, encoder_cfg=ENC, out_dir=tmp_path)
