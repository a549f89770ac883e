"""Command line: data tooling, training, evaluation and ablations."""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import click

from .data import (
    SynthConfig,
    build_search_protocol,
    dataset_stats,
    format_stats,
    load_annotations,
    load_protocol,
    save_protocol,
    synth_generate,
    write_synthetic,
)
from .errors import CheckpointError, ConfigurationError, IntegrityError, SchemaError

DISTANCES = {"kl": "kl", "mse": "mse", "mi": "mutual_info", "mutual_info": "mutual_info"}


def _fail(exc):
    raise click.ClickException(str(exc)) from exc


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output.")
def main(verbose):
    """Ground-to-aerial person search with head knowledge distillation."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Emit machine-readable output.")
def stats(path, as_json):
    """Summarize an annotation file."""
    try:
        s = dataset_stats(load_annotations(path))
    except (SchemaError, IntegrityError) as exc:
        _fail(exc)
    click.echo(json.dumps(s, indent=1, sort_keys=True) if as_json else format_stats(s))


@main.command("protocol-build")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--gallery", type=int, default=50, show_default=True)
@click.option("--positives", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write here instead of stdout.")
def protocol_build(path, seed, gallery, positives, out):
    """Build the query/gallery protocol from a test annotation file."""
    try:
        proto = build_search_protocol(load_annotations(path, split="test"), gallery, positives, seed)
    except (SchemaError, IntegrityError, ValueError) as exc:
        _fail(exc)
    proto.annotations = str(path)
    if out:
        save_protocol(proto, out)
        click.echo(f"{len(proto)} entries, {len(proto.skipped)} identities skipped -> {out}")
    else:
        from .data import dumps_protocol

        click.echo(dumps_protocol(proto), nl=False)


@main.command("synth-gen")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ids", type=int, default=8, show_default=True)
@click.option("--boxes-per-id", type=int, default=16, show_default=True)
@click.option("--images-per-view", type=int, default=64, show_default=True)
@click.option("--scale-ratio", type=float, default=None, help="UAV/ground person width ratio.")
@click.option("--buckets", default=None, help="Comma-separated altitude buckets for UAV images.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def synth_gen(seed, ids, boxes_per_id, images_per_view, scale_ratio, buckets, out):
    """Generate a seeded synthetic dual-view dataset."""
    kw = dict(seed=seed, num_ids=ids, boxes_per_id=boxes_per_id, images_per_view=images_per_view)
    if scale_ratio is not None:
        kw["scale_ratio_uav"] = scale_ratio
    if buckets:
        kw["altitude_buckets"] = tuple(b.strip() for b in buckets.split(","))
    try:
        train, test = synth_generate(SynthConfig(**kw))
    except ConfigurationError as exc:
        _fail(exc)
    paths = write_synthetic(train, test, out)
    click.echo(f"train: {len(train.records)} images -> {paths['train']}")
    click.echo(f"test: {len(test.records)} images -> {paths['test']}")


def _load_train_config(config, seed=None):
    from .train import default_config, load_config

    if config is None:
        cfg = default_config("synthetic")
    elif Path(config).exists():
        cfg = load_config(config)
    else:
        cfg = default_config(config)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


@main.command()
@click.option("--config", "config", default=None, help="Config file, or a preset: g2aps, prw, cuhk-sysu, synthetic.")
@click.option("--seed", type=int, default=None)
@click.option("--no-detach", is_flag=True, help="Let the teacher OIM loss reach the shared layers.")
@click.option("--no-prob-kd", is_flag=True)
@click.option("--no-rela-kd", is_flag=True)
@click.option("--relation-distance", type=click.Choice(sorted(DISTANCES)), default=None)
@click.option("--epochs", type=int, default=None, help="Override total_epochs.")
@click.option("--out", type=click.Path(file_okay=False), default="runs/train", show_default=True)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
def train(config, seed, no_detach, no_prob_kd, no_rela_kd, relation_distance, epochs, out, resume):
    """Train, checkpointing every epoch, then evaluate on the test protocol."""
    from .eval import format_report
    from .train import run_training

    try:
        cfg = _load_train_config(config, seed)
        changes = {}
        if no_detach:
            changes["detach_teacher"] = False
        if no_prob_kd:
            changes["enable_prob_kd"] = False
        if no_rela_kd:
            changes["enable_rela_kd"] = False
        if relation_distance:
            changes["relation_distance"] = DISTANCES[relation_distance]
        if epochs is not None:
            changes["total_epochs"] = epochs
            changes["lr_decay_epoch"] = min(cfg.lr_decay_epoch, epochs)
        cfg = dataclasses.replace(cfg, **changes)
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "config.json").write_text(cfg.dumps())
        result = run_training(cfg, out_dir=out, resume=resume)
    except (ValueError, CheckpointError, ConfigurationError, SchemaError, IntegrityError) as exc:
        _fail(exc)
    click.echo(f"checkpoints: {len(result.checkpoints)} in {out}")
    if result.final is not None:
        click.echo(format_report(result.final))


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--protocol", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--annotations", type=click.Path(exists=True, dir_okay=False), default=None, help="Test annotations.")
@click.option("--stratify", is_flag=True, help="Add per-altitude rows.")
@click.option("--json", "as_json", is_flag=True)
def eval_cmd(checkpoint, protocol, annotations, stratify, as_json):
    """Evaluate a checkpoint on a search protocol."""
    from .eval import format_report, format_stratified
    from .train import TrainConfig, load_datasets, load_trained
    from .train.trainer import evaluate_model

    try:
        model, ckpt = load_trained(checkpoint)
        cfg = TrainConfig.from_json(ckpt["config"])
        if annotations:
            test = load_annotations(annotations, split="test")
        else:
            _, test, _ = load_datasets(cfg)
        if protocol:
            proto = load_protocol(protocol)
        else:
            proto = build_search_protocol(test, cfg.eval.gallery_size, cfg.eval.positives, cfg.eval.protocol_seed)
        report = evaluate_model(model, test, proto, stratify)
    except (ValueError, CheckpointError, SchemaError, IntegrityError) as exc:
        _fail(exc)
    if as_json:
        click.echo(json.dumps(report.to_json(), indent=1))
        return
    click.echo(format_report(report))
    if stratify:
        click.echo(format_stratified({"model": dict(report.strata, full=report)}))


def _parse_grid(spec: str) -> dict:
    """``prob=on,off;rela=on,off`` -> axis -> values."""
    grid = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        axis, _, values = part.partition("=")
        vals = []
        for v in values.split(","):
            v = v.strip()
            vals.append({"on": True, "off": False}.get(v, DISTANCES.get(v, v)))
        grid[axis.strip()] = vals
    return grid


@main.command()
@click.option("--config", "config", default=None, help="Base config file or preset.")
@click.option("--grid", default="prob=on,off;rela=on,off", show_default=True, help="Axes: prob, rela, detach, distance, direction.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def ablate(config, grid, seed, out):
    """Train one model per grid cell and print a comparison table."""
    from .train.ablation import ablation_suite, format_ablation

    try:
        rows = ablation_suite(_load_train_config(config, seed), _parse_grid(grid), out_dir=out)
    except (ValueError, ConfigurationError) as exc:
        _fail(exc)
    if rows:
        click.echo(format_ablation(rows))
    else:
        click.echo("empty grid: nothing to run")


@main.command("config")
@click.argument("preset", default="g2aps")
def config_cmd(preset):
    """Print a preset configuration as JSON."""
    from .train import default_config

    try:
        click.echo(default_config(preset).dumps(), nl=False)
    except ValueError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
