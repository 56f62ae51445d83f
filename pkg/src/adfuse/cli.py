"""Operator command line: ingest / train / eval / brand / synth-data.

Config precedence is flags > config file > defaults. Every run is seeded and
every output document embeds the resolved configuration, so identical inputs
plus an identical seed give byte-identical outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from .adapters import (
    CheckpointError,
    MlpAdapterParams,
    ResidualMlp,
    load_checkpoint,
    save_checkpoint,
)
from .banks import BankError, load_bank
from .kb import KbError, ingest_with_report, load_kb_cache, read_raw_entries, read_word_list, save_kb_cache
from .manifest import ManifestError, read_manifest
from .retrieval import EvalProtocol, RetrievalError, build_candidates, evaluate
from .synthetic import FusionSpec, write_fusion_dataset
from .textprep import TextPrepError
from .training import (
    ConfigError,
    DataError,
    DivergenceError,
    INPUT_MODES,
    TrainConfig,
    TrainingError,
    Trainer,
    adapt_image_features,
    adapt_text_features,
)
from .vision import PromptBank, RegionProposal, VisionError, ensemble, score_entries, select_vision_candidate

_USAGE_ERRORS = (click.UsageError, ConfigError)
_DATA_ERRORS = (
    BankError,
    ManifestError,
    KbError,
    RetrievalError,
    VisionError,
    TextPrepError,
    CheckpointError,
    DataError,
    FileNotFoundError,
    IsADirectoryError,
)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")


def _require_inputs_banks(inputs, image_bank, label_bank, scene_bank, brand_bank):
    banks = {"image": load_bank(image_bank), "label_text": load_bank(label_bank)}
    needed = INPUT_MODES[inputs]
    if "scene_text" in needed:
        if scene_bank is None:
            raise click.UsageError(f"--scene-bank required for inputs {inputs}")
        banks["scene_text"] = load_bank(scene_bank)
    if "brand" in needed:
        if brand_bank is None:
            raise click.UsageError(f"--brand-bank required for inputs {inputs}")
        banks["brand"] = load_bank(brand_bank)
    return banks


@click.group()
def cli():
    """Multimodal feature fusion, retrieval evaluation and brand grounding."""


# -- ingest ---------------------------------------------------------------------


@cli.command("ingest")
@click.option("--kb-source", "kb_sources", multiple=True, required=True, help="raw KB JSON-lines file")
@click.option("--word-list", default=None, help="common-word list, one word per line")
@click.option("--output", required=True, help="compiled KB cache path")
def cmd_ingest(kb_sources, word_list, output):
    """Filter raw brand entries and write the compiled KB cache."""
    raw = []
    for src in kb_sources:
        raw.extend(read_raw_entries(src))
    words = read_word_list(word_list) if word_list else set()
    kb, report = ingest_with_report(raw, words)
    click.echo(f"{report.raw} raw entries")
    click.echo(f"{report.dropped_common} dropped as common words")
    click.echo(f"{report.dropped_short} dropped as single characters")
    click.echo(f"{report.dropped_duplicate} dropped as duplicate names")
    click.echo(f"{report.retained} entries retained")
    save_kb_cache(kb, output)


# -- train ----------------------------------------------------------------------


_TRAIN_FLAGS = [
    ("loss_mode", str),
    ("hnm", str),
    ("n_cand", int),
    ("n_hard", int),
    ("batch_size", int),
    ("lr", float),
    ("weight_decay", float),
    ("reg_coeff", float),
    ("max_epochs", int),
    ("momentum_m", float),
    ("bank_refresh_period", int),
    ("seed", int),
    ("adapter_kind", str),
    ("heads", int),
    ("inputs", str),
    ("text_adapter", str),
    ("patience", int),
]


def _train_options(fn):
    fn = click.option("--log-hnm", "log_hnm", is_flag=True, default=None)(fn)
    for name, typ in reversed(_TRAIN_FLAGS):
        fn = click.option(f"--{name.replace('_', '-')}", name, type=typ, default=None)(fn)
    return fn


def _resolve_config(config_file, flag_values) -> TrainConfig:
    values = {}
    if config_file:
        with open(config_file, encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        values.update(doc)
    values.update({k: v for k, v in flag_values.items() if v is not None})
    return TrainConfig(**values)


@cli.command("train")
@click.option("--config", "config_file", default=None, help="JSON config file (flags override it)")
@click.option("--image-bank", required=True)
@click.option("--label-bank", required=True)
@click.option("--scene-bank", default=None)
@click.option("--brand-bank", default=None)
@click.option("--manifest", "manifest_path", required=True)
@click.option("--val-k", type=int, default=100, help="K of the validation protocol")
@click.option("--val-seed", type=int, default=0)
@click.option("--outdir", required=True)
@_train_options
def cmd_train(config_file, image_bank, label_bank, scene_bank, brand_bank, manifest_path,
              val_k, val_seed, outdir, **flags):
    """Contrastively fine-tune an adapter; writes a seed-stamped run directory."""
    config = _resolve_config(config_file, flags).resolved()
    banks = _require_inputs_banks(config.inputs, image_bank, label_bank, scene_bank, brand_bank)
    rows = read_manifest(manifest_path)
    protocol = EvalProtocol("k_candidate", k=val_k, seed=val_seed)
    trainer = Trainer(config, banks, rows, protocol)
    zero_shot = trainer.zero_shot()
    if zero_shot:
        click.echo(
            f"zero-shot: accuracy={zero_shot.accuracy} rank={zero_shot.rank} "
            f"mean_rank={zero_shot.mean_rank}"
        )
    result = trainer.run()

    run_dir = Path(outdir) / f"run-seed{config.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    extra = {"logit_scale": np.array(result.logit_scale)}
    if result.text_head is not None:
        extra.update(result.text_head.tensors("text_head"))
    echo = dict(result.config)
    echo["val_k"] = val_k
    echo["val_seed"] = val_seed
    save_checkpoint(run_dir / "checkpoint.ckpt", result.params, echo, extra)
    with open(run_dir / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss", "reg_term", "val_accuracy"])
        for h in result.history:
            writer.writerow(
                [
                    h.epoch,
                    "" if h.step is None else h.step,
                    "" if h.loss is None else repr(h.loss),
                    "" if h.reg_term is None else repr(h.reg_term),
                    "" if h.val_accuracy is None else repr(h.val_accuracy),
                ]
            )
    with open(run_dir / "hnm_log.jsonl", "w", encoding="utf-8") as fh:
        for entry in result.hnm_log:
            fh.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")
    _dump_json(
        {
            "config": echo,
            "seed": config.seed,
            "counters": result.counters,
            "best_epoch": result.best_epoch,
            "best_val_accuracy": None if result.best_val is None else result.best_val.accuracy,
            "zero_shot_accuracy": None if zero_shot is None else zero_shot.accuracy,
        },
        run_dir / "run.json",
    )
    if result.best_val:
        click.echo(f"best epoch {result.best_epoch}: val accuracy {result.best_val.accuracy}")
    click.echo(f"run directory: {run_dir}")


# -- eval -----------------------------------------------------------------------


def _load_text_head(params, echo, extra_tensors) -> ResidualMlp | None:
    if echo.get("text_adapter") != "mlp":
        return None
    if isinstance(params, MlpAdapterParams):
        return params.g_txt
    return ResidualMlp(
        w1=extra_tensors["text_head.w1"],
        b1=extra_tensors["text_head.b1"],
        w2=extra_tensors["text_head.w2"],
        b2=extra_tensors["text_head.b2"],
    )


@cli.command("eval")
@click.option("--checkpoint", default=None, help="trained checkpoint; omit for the zero-shot baseline")
@click.option("--protocol", "protocol_kind", type=click.Choice(["official", "k_candidate"]), required=True)
@click.option("--k", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--inputs", default=None, type=click.Choice(sorted(INPUT_MODES)))
@click.option("--image-bank", required=True)
@click.option("--label-bank", required=True)
@click.option("--scene-bank", default=None)
@click.option("--brand-bank", default=None)
@click.option("--manifest", "manifest_path", required=True)
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]))
@click.option("--output", required=True, help="metrics JSON path")
@click.option("--per-image", "per_image_path", default=None, help="optional per-image rank CSV")
def cmd_eval(checkpoint, protocol_kind, k, seed, inputs, image_bank, label_bank,
             scene_bank, brand_bank, manifest_path, split, output, per_image_path):
    """Retrieval metrics under the official or K-candidate protocol."""
    if protocol_kind == "k_candidate" and (k is None or k < 2):
        raise click.UsageError("--k >= 2 is required for the k_candidate protocol")
    rows = [r for r in read_manifest(manifest_path) if r.split == split]
    if not rows:
        raise DataError(f"no rows in split {split!r}")
    protocol = EvalProtocol(protocol_kind, k=k, seed=seed)
    if checkpoint is None:
        if inputs not in (None, "I"):
            raise click.UsageError("zero-shot evaluation uses raw image features; --inputs must be I")
        inputs = "I"
        banks = _require_inputs_banks(inputs, image_bank, label_bank, scene_bank, brand_bank)
        image_feats = banks["image"]
        text_feats = banks["label_text"]
        echo = {"checkpoint": None, "inputs": inputs}
    else:
        params, ckpt_echo, extra = load_checkpoint(checkpoint)
        ckpt_inputs = ckpt_echo.get("inputs")
        if inputs is None:
            inputs = ckpt_inputs
        if inputs != ckpt_inputs:
            raise DataError(
                f"checkpoint modality mismatch: checkpoint trained with inputs {ckpt_inputs!r}, "
                f"requested {inputs!r}"
            )
        banks = _require_inputs_banks(inputs, image_bank, label_bank, scene_bank, brand_bank)
        image_feats = adapt_image_features(params, inputs, banks, rows)
        head = _load_text_head(params, ckpt_echo, extra)
        needed = [r.label_text_id for r in rows]
        text_feats = adapt_text_features(head, banks["label_text"], needed)
        echo = {"checkpoint": str(checkpoint), "inputs": inputs, "train_config": ckpt_echo}
    sets = build_candidates(protocol, rows)
    per_image = [] if per_image_path else None
    metrics = evaluate(image_feats, text_feats, sets, per_image=per_image)
    doc = {
        "protocol": protocol_kind,
        "K": k,
        "seed": seed,
        "accuracy": metrics.accuracy,
        "rank": metrics.rank,
        "mean_rank": metrics.mean_rank,
        "n_images": metrics.n_images,
        "config": {**echo, "split": split, "seed": seed},
    }
    _dump_json(doc, Path(output))
    if per_image_path:
        with open(per_image_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "best_rank", "mean_rank", "top1_hit"])
            for image_id, best, mean, hit in per_image:
                writer.writerow([image_id, best, repr(mean), int(hit)])
    click.echo(
        f"accuracy={metrics.accuracy} rank={metrics.rank} mean_rank={metrics.mean_rank} "
        f"n_images={metrics.n_images}"
    )


# -- brand ----------------------------------------------------------------------


def _read_scene_texts(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out[str(obj["image_id"])] = [str(t) for t in obj["texts"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad scene-text row: {exc}") from exc
    return out


def _regions_by_image(bank) -> dict[str, list[RegionProposal]]:
    grouped: dict[str, list[tuple[str, bool]]] = {}
    for rid in bank.ids:
        if rid.endswith("/global"):
            grouped.setdefault(rid[: -len("/global")], []).append((rid, True))
        elif "/region/" in rid:
            grouped.setdefault(rid.split("/region/", 1)[0], []).append((rid, False))
        else:
            raise DataError(f"region bank id {rid!r} not <image>/region/<k> or <image>/global")
    out = {}
    for image_id, items in grouped.items():
        if sum(g for _, g in items) != 1:
            raise DataError(f"image {image_id!r} must have exactly one global region")
        items.sort()
        out[image_id] = [
            RegionProposal(rid, bank.get(rid).astype(np.float64), is_global=flag)
            for rid, flag in items
        ]
    return out


def _match_blocks(kb, blocks):
    ranked = {}
    for block_idx, block in enumerate(blocks):
        for pos, entry in enumerate(kb.match_text(block)):
            key = (block_idx, pos)
            if entry.name not in ranked or key < ranked[entry.name][0]:
                ranked[entry.name] = (key, entry)
    ordered = sorted(ranked.values(), key=lambda t: (t[0], t[1].name))
    return [e for _, e in ordered]


@cli.command("brand")
@click.option("--region-bank", required=True)
@click.option("--prompt-bank", "prompt_banks", multiple=True, required=True)
@click.option("--kb", "kb_path", required=True, help="compiled KB cache from `ingest`")
@click.option("--scene-texts", "scene_texts_path", default=None, help="JSON-lines {image_id, texts}")
@click.option("--output", required=True, help="predictions JSON-lines path")
def cmd_brand(region_bank, prompt_banks, kb_path, scene_texts_path, output):
    """Text-matching + vision ensemble brand prediction per image."""
    kb = load_kb_cache(kb_path)
    prompts = PromptBank.from_banks(kb, [load_bank(p) for p in prompt_banks])
    regions = _regions_by_image(load_bank(region_bank))
    scene_texts = _read_scene_texts(scene_texts_path) if scene_texts_path else {}
    counts = {"text": 0, "vision": 0, "ensemble": 0}
    with open(output, "w", encoding="utf-8") as fh:
        for image_id in sorted(regions):
            region_list = regions[image_id]
            matrix = score_entries(region_list, prompts)
            global_feat = next(r.feature for r in region_list if r.is_global)
            vision_result = select_vision_candidate(matrix, global_feat, prompts)
            matches = _match_blocks(kb, scene_texts.get(image_id, []))
            prediction = ensemble(matches, vision_result, global_feat, prompts)
            path = "text" if len(matches) == 1 else ("vision" if not matches else "ensemble")
            counts[path] += 1
            fh.write(
                json.dumps(
                    {"image_id": image_id, "prediction": prediction.name, "path": path},
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )
    _dump_json(
        {"config": {"kb": str(kb_path), "region_bank": str(region_bank)}, "counts": counts},
        Path(output + ".meta.json"),
    )
    click.echo(f"paths: text={counts['text']} vision={counts['vision']} ensemble={counts['ensemble']}")


# -- synth-data -------------------------------------------------------------------


@cli.command("synth-data")
@click.option("--outdir", required=True)
@click.option("--seed", type=int, default=0)
@click.option("--n-train", type=int, default=FusionSpec.n_train)
@click.option("--n-val", type=int, default=FusionSpec.n_val)
@click.option("--n-test", type=int, default=FusionSpec.n_test)
@click.option("--dim", type=int, default=FusionSpec.dim)
def cmd_synth_data(outdir, seed, n_train, n_val, n_test, dim):
    """Write the synthetic fusion fixture banks and manifest."""
    spec = FusionSpec(n_train=n_train, n_val=n_val, n_test=n_test, dim=dim, seed=seed)
    paths = write_fusion_dataset(spec, outdir)
    _dump_json(
        {"config": dataclasses.asdict(spec), "seed": seed, "paths": {k: str(v) for k, v in paths.items()}},
        Path(outdir) / "dataset.json",
    )
    for name, path in sorted(paths.items()):
        click.echo(f"{name}: {path}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        return 1
    except _USAGE_ERRORS as exc:
        click.echo(f"usage error: {exc}", err=True)
        return 1
    except DivergenceError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    except _DATA_ERRORS as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except TrainingError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
