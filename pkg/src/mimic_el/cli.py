"""Operator command surface: validate / train / evaluate / link / report.

One JSON config file describes a run; command-line flags override file
values, which override defaults.  Machine-readable results go to stdout as
JSON; errors go to stderr as single-line JSON.  Exit codes: 0 success,
1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from mimic_el import data_model
from mimic_el.data_model import ingest_entities, ingest_mentions, split_mentions
from mimic_el.encoders import EncoderConfig
from mimic_el.evaluator import (
    DEFAULT_KS,
    evaluate_split,
    precompute_entity_features,
    rank_against_kb,
)
from mimic_el.model import load_checkpoint
from mimic_el.trainer import TrainConfig, train

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Bad run configuration (unknown key, missing path, type error)."""


class UsageError(Exception):
    """Bad command invocation."""


@dataclasses.dataclass(frozen=True)
class DataConfig:
    entities: str | None = None
    mentions: str | None = None
    image_root: str | None = None


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = DEFAULT_KS
    batch_size: int = 64
    chunk_size: int = 512
    cache_dir: str | None = None


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Union of dataset paths, encoder, train and eval settings."""

    data: DataConfig = DataConfig()
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    output_dir: str = "runs"


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - field_names)
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_run_config(path: str | Path | None, overrides: dict) -> RunConfig:
    """Read the config file, then apply flag overrides section by section."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be an object")
    known_sections = {"data", "encoder", "train", "eval", "output_dir"}
    unknown = sorted(set(raw) - known_sections)
    if unknown:
        raise ConfigError(f"{path}: unknown key {unknown[0]!r}")
    for section, values in overrides.items():
        if section == "output_dir":
            raw["output_dir"] = values
            continue
        merged = dict(raw.get(section, {}))
        merged.update(values)
        raw[section] = merged
    eval_section = dict(raw.get("eval", {}))
    if "ks" in eval_section:
        eval_section["ks"] = tuple(eval_section["ks"])
    return RunConfig(
        data=_from_dict(DataConfig, raw.get("data", {}), "data"),
        encoder=_from_dict(EncoderConfig, raw.get("encoder", {}), "encoder"),
        train=_from_dict(TrainConfig, raw.get("train", {}), "train"),
        eval=_from_dict(EvalConfig, eval_section, "eval"),
        output_dir=raw.get("output_dir", "runs"),
    )


def _resolve(path: str | None) -> Path | None:
    """Apply the MIMIC_DATA_ROOT prefix to relative dataset paths."""
    if path is None:
        return None
    resolved = Path(path)
    root = os.environ.get("MIMIC_DATA_ROOT")
    if root and not resolved.is_absolute():
        resolved = Path(root) / resolved
    return resolved


def _load_dataset(cfg: RunConfig):
    if cfg.data.entities is None or cfg.data.mentions is None:
        raise ConfigError("data.entities and data.mentions must be configured")
    entities_path = _resolve(cfg.data.entities)
    mentions_path = _resolve(cfg.data.mentions)
    image_root = _resolve(cfg.data.image_root)
    kb, entity_report = ingest_entities(entities_path, image_root)
    mentions, mention_report = ingest_mentions(mentions_path, kb)
    return kb, mentions, image_root, entity_report, mention_report


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonArgumentParser(prog="mimic", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override train.seed")

    p_validate = sub.add_parser("validate", help="ingest datasets and report")
    add_common(p_validate)

    p_train = sub.add_parser("train", help="run the training loop")
    add_common(p_train)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--learning-rate", type=float)
    p_train.add_argument("--max-steps", type=int)
    p_train.add_argument("--low-resource-fraction", type=float)
    p_train.add_argument("--run-name")
    p_train.add_argument("--out", help="override output_dir")
    for unit in ("tglu", "vdlu", "cmfu"):
        p_train.add_argument(f"--no-{unit}", action="store_true")
    for term in ("t", "v", "c"):
        p_train.add_argument(f"--no-loss-{term}", action="store_true")

    p_eval = sub.add_parser("evaluate", help="rank a split against the full KB")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=data_model.SPLITS, default="test")
    p_eval.add_argument("--dump", help="write per-mention rank JSONL here")

    p_link = sub.add_parser("link", help="link one mention query")
    add_common(p_link)
    p_link.add_argument("--checkpoint", required=True)
    p_link.add_argument("--sentence", required=True)
    p_link.add_argument("--mention", required=True)
    p_link.add_argument("--image")
    p_link.add_argument("-k", type=int, default=5)

    p_report = sub.add_parser("report", help="render history and metrics tables")
    p_report.add_argument("--run", help="run directory containing history.jsonl")
    p_report.add_argument("--metrics", nargs="*", default=[], help="metrics JSON files")
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    train: dict = {}
    mapping = {
        "seed": "seed",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "learning_rate": "learning_rate",
        "max_steps": "max_steps",
        "low_resource_fraction": "low_resource_fraction",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            train[key] = value
    for unit, key in (("tglu", "use_tglu"), ("vdlu", "use_vdlu"), ("cmfu", "use_cmfu")):
        if getattr(args, f"no_{unit}", False):
            train[key] = False
    for term, key in (("t", "use_loss_t"), ("v", "use_loss_v"), ("c", "use_loss_c")):
        if getattr(args, f"no_loss_{term}", False):
            train[key] = False
    overrides: dict = {}
    if train:
        overrides["train"] = train
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return overrides


def cmd_validate(args) -> int:
    cfg = load_run_config(args.config, _overrides_from_args(args))
    kb, mentions, _, entity_report, mention_report = _load_dataset(cfg)
    _emit(
        {
            "entities": kb.size,
            "missing_image_refs": len(entity_report.missing_images),
            "mentions": mention_report.per_split,
            "mentions_loaded": mention_report.n_loaded,
            "mentions_dropped": mention_report.n_dropped,
            "dropped_ids": mention_report.dropped_ids[:10],
        }
    )
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides_from_args(args))
    kb, mentions, image_root, _, _ = _load_dataset(cfg)
    kb.require_nonempty()
    splits = split_mentions(mentions)
    info = train(
        cfg.train,
        splits,
        kb,
        encoder_cfg=cfg.encoder,
        image_root=image_root,
        out_dir=cfg.output_dir,
        run_name=getattr(args, "run_name", None),
    )
    _emit(
        {
            "checkpoint": info.path,
            "epoch": info.epoch,
            "val_mrr": info.val_mrr,
            "config": info.config,
        }
    )
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, _overrides_from_args(args))
    model, _ = load_checkpoint(args.checkpoint)
    kb, mentions, image_root, _, _ = _load_dataset(cfg)
    kb.require_nonempty()
    split = split_mentions(mentions).for_split(args.split)
    cache = precompute_entity_features(
        kb, model, image_root, cache_dir=cfg.eval.cache_dir, chunk_size=cfg.eval.chunk_size
    )
    report = evaluate_split(
        list(split),
        model,
        cache,
        image_root,
        ks=cfg.eval.ks,
        batch_size=cfg.eval.batch_size,
        chunk_size=cfg.eval.chunk_size,
        dump_path=args.dump,
    )
    payload = report.to_json_dict()
    payload["checkpoint"] = args.checkpoint
    payload["split"] = args.split
    _emit(payload)
    return 0


def cmd_link(args) -> int:
    cfg = load_run_config(args.config, _overrides_from_args(args))
    model, _ = load_checkpoint(args.checkpoint)
    kb, _, image_root, _, _ = _load_dataset(cfg)
    kb.require_nonempty()
    cache = precompute_entity_features(kb, model, image_root, cache_dir=cfg.eval.cache_dir)
    query = data_model.Mention(
        id="query",
        words=args.mention,
        sentence=args.sentence,
        image_ref=args.image,
        gt_entity_id="",
        split="test",
    )
    result = rank_against_kb(query, cache, model, image_root)
    top = []
    for position in range(min(args.k, len(result.ranked_ids))):
        entity_id = result.ranked_ids[position]
        top.append(
            {
                "rank": position + 1,
                "entity_id": entity_id,
                "name": kb[entity_id].name,
                "scores": result.breakdown(position).as_dict(),
            }
        )
    _emit({"mention": args.mention, "sentence": args.sentence, "results": top})
    return 0


REPORT_COLUMNS = ("H@1", "H@3", "H@5", "H@10", "H@20", "MRR", "MR")


def _metrics_row(label: str, payload: dict) -> str:
    hits = payload.get("hits", {})
    cells = [
        f"{hits.get(k, float('nan')) * 100:.2f}" for k in ("1", "3", "5", "10", "20")
    ]
    cells.append(f"{payload.get('mrr', float('nan')) * 100:.2f}")
    cells.append(f"{payload.get('mr', float('nan')):.2f}")
    return "| " + " | ".join([label, *cells]) + " |"


def cmd_report(args) -> int:
    lines: list[str] = []
    if args.run:
        history_path = Path(args.run) / "history.jsonl"
        if not history_path.exists():
            raise UsageError(f"no history.jsonl under {args.run}")
        lines.append("## Training history")
        lines.append("")
        lines.append("| epoch | loss | val MRR |")
        lines.append("|---|---|---|")
        for line in history_path.read_text(encoding="utf-8").splitlines():
            record = json.loads(line)
            lines.append(
                f"| {record['epoch']} | {record['loss']:.6f} | {record['val_mrr']:.4f} |"
            )
        lines.append("")
    if args.metrics:
        lines.append("## Metrics")
        lines.append("")
        lines.append("| run | " + " | ".join(REPORT_COLUMNS) + " |")
        lines.append("|" + "---|" * (len(REPORT_COLUMNS) + 1))
        for metrics_file in args.metrics:
            payload = json.loads(Path(metrics_file).read_text(encoding="utf-8"))
            lines.append(_metrics_row(Path(metrics_file).stem, payload))
        lines.append("")
    if not lines:
        raise UsageError("report needs --run and/or --metrics")
    print("\n".join(lines))
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "link": cmd_link,
    "report": cmd_report,
}


def dispatch(argv: list[str]) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
