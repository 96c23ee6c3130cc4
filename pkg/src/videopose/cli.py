"""Command-line interface: data generation, training, evaluation, ablation.

Configuration is YAML with three sections (task, train, model) mirroring the
SyntheticTaskSpec, TrainConfig, and ModelConfig dataclasses.  Any field can
be overridden on the command line with ``--set section.field=value``.  Every
run writes a fully resolved config snapshot next to its outputs, and that
snapshot alone reproduces the run bit for bit.
"""

from __future__ import annotations

import dataclasses
import os
import sys

import click
import numpy as np
import yaml

from . import data as data_mod
from . import model as mdl
from . import train as train_mod

_CONFIG_SECTIONS = ("task", "model", "train")


class CliError(Exception):
    """User-facing failure; message becomes the final `error:` line."""

    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}", exit_code=2)
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise CliError(f"config file {path} is not valid YAML: {exc}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise CliError(f"config file {path} must contain a mapping at top level")
    return raw


def _apply_overrides(raw: dict, overrides: tuple[str, ...]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override {item!r} is not of the form section.key=value")
        dotted, text = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise CliError(
                f"override key {dotted!r} must be section.field "
                f"with section in {_CONFIG_SECTIONS}"
            )
        section, field_name = parts
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError:
            value = text
        raw.setdefault(section, {})[field_name] = value
    return raw


def _build_section(section: str, raw: dict, cls):
    body = raw.get(section, {})
    if not isinstance(body, dict):
        raise CliError(f"config section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    if section == "train":
        known.discard("model")
    for key in body:
        if key not in known:
            raise CliError(f"unknown config key {section}.{key}")
    return dict(body)


def resolve_configs(config_path: str | None, overrides: tuple[str, ...]):
    """Parse file + overrides into (task spec, train config)."""

    raw = _apply_overrides(_load_config_file(config_path), overrides)
    for section in raw:
        if section not in _CONFIG_SECTIONS:
            raise CliError(f"unknown config section {section!r}")
    task_kw = _build_section("task", raw, data_mod.SyntheticTaskSpec)
    model_kw = _build_section("model", raw, mdl.ModelConfig)
    train_kw = _build_section("train", raw, train_mod.TrainConfig)
    if isinstance(task_kw.get("class_ids"), list):
        task_kw["class_ids"] = tuple(task_kw["class_ids"])
    try:
        task = data_mod.SyntheticTaskSpec(**task_kw)
        model_cfg = mdl.ModelConfig(**model_kw)
        train_cfg = train_mod.TrainConfig(model=model_cfg, **train_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None
    return task, train_cfg


def _resolved_dict(task, train_cfg, invocation: dict) -> dict:
    model_d = dataclasses.asdict(train_cfg.model)
    train_d = dataclasses.asdict(train_cfg)
    del train_d["model"]
    task_d = dataclasses.asdict(task)
    if task_d.get("class_ids") is not None:
        task_d["class_ids"] = list(task_d["class_ids"])
    return {
        "task": task_d,
        "model": model_d,
        "train": train_d,
        "invocation": invocation,
    }


def _write_snapshot(out_dir: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.yaml"), "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True, default_flow_style=False)


def _resolve_manifest(data: str, split: str) -> str:
    """Accept either a manifest path or a dataset root with split dirs."""

    if os.path.isfile(data):
        return data
    candidate = os.path.join(data, split, "manifest.csv")
    if os.path.exists(candidate):
        return candidate
    raise CliError(f"no manifest found at {data!r} (tried {candidate})")


def _echo(text: str) -> None:
    click.echo(text)


_config_opt = click.option(
    "--config", "-c", "config_path", default=None,
    help="YAML config file (sections: task, model, train).",
)
_set_opt = click.option(
    "--set", "-s", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
    help="Override a config field, e.g. -s train.epochs=10.",
)
_out_opt = click.option(
    "--out", "-o", "out_dir", required=True, help="Output directory."
)


@click.group()
def cli() -> None:
    """Video-pose action recognition toolkit."""


@cli.command()
@_config_opt
@_set_opt
@_out_opt
def gen(config_path, overrides, out_dir) -> None:
    """Generate a synthetic dataset (train and test splits)."""

    task, train_cfg = resolve_configs(config_path, overrides)
    _write_snapshot(out_dir, _resolved_dict(task, train_cfg, {"command": "gen", "out": out_dir}))
    train_split = data_mod.generate_synthetic(task)
    test_task = dataclasses.replace(task, seed=task.seed + 1)
    test_split = data_mod.generate_synthetic(test_task)
    train_manifest = data_mod.save_dataset(train_split, os.path.join(out_dir, "train"))
    test_manifest = data_mod.save_dataset(test_split, os.path.join(out_dir, "test"))
    _echo(f"wrote {len(train_split)} train records to {train_manifest}")
    _echo(f"wrote {len(test_split)} test records to {test_manifest}")


@cli.command()
@_config_opt
@_set_opt
@_out_opt
@click.option("--data", "-d", required=True, help="Dataset root (from gen) or a manifest path.")
@click.option("--warm-start", "warm_start_path", default=None,
              help="Checkpoint to initialise parameters from instead of a fresh seeded init.")
def train(config_path, overrides, out_dir, data, warm_start_path) -> None:
    """Train a model and write checkpoint + history."""

    task, train_cfg = resolve_configs(config_path, overrides)
    _write_snapshot(out_dir, _resolved_dict(task, train_cfg, {
        "command": "train", "out": out_dir, "data": data,
        "warm_start": warm_start_path,
    }))
    records = data_mod.load_dataset(_resolve_manifest(data, "train"))
    warm_start = None
    if warm_start_path is not None:
        if not os.path.exists(warm_start_path):
            raise CliError(f"warm start checkpoint not found: {warm_start_path}", exit_code=2)
        ws_config, _, ws_params, ws_bn = mdl.load_checkpoint(warm_start_path)
        if ws_config != train_cfg.model:
            raise CliError(
                f"warm start checkpoint {warm_start_path} was trained with a different "
                "model configuration"
            )
        warm_start = (ws_params, ws_bn)
    result = train_mod.train_loop(records, train_cfg, warm_start=warm_start)
    history_path = os.path.join(out_dir, "history.csv")
    checkpoint_path = os.path.join(out_dir, "checkpoint.vpc")
    train_mod.write_history_csv(history_path, result.history)
    mdl.save_checkpoint(
        checkpoint_path, train_cfg.model, result.topology, result.params, result.bn_state
    )
    last = result.history[-1] if result.history else None
    if last is not None:
        _echo(f"epoch {last.epoch}: loss {last.loss:.6f}, train acc {last.train_accuracy:.3f}")
    _echo(f"wrote {history_path}")
    _echo(f"wrote {checkpoint_path}")


@cli.command("eval")
@_out_opt
@click.option("--data", "-d", required=True, help="Dataset root (from gen) or a manifest path.")
@click.option("--checkpoint", "-k", required=True, help="Checkpoint written by train.")
def eval_cmd(out_dir, data, checkpoint) -> None:
    """Score a checkpoint on a dataset split."""

    if not os.path.exists(checkpoint):
        raise CliError(f"checkpoint not found: {checkpoint}", exit_code=2)
    config, topology, params, bn_state = mdl.load_checkpoint(checkpoint)
    records = data_mod.load_dataset(_resolve_manifest(data, "test"))
    _, a_hat = train_mod.prepare_adjacency(config, topology)
    report = train_mod.evaluate(records, params, config, a_hat, bn_state)
    os.makedirs(out_dir, exist_ok=True)
    eval_path = os.path.join(out_dir, "eval.csv")
    train_mod.write_eval_csv(eval_path, report)
    with open(os.path.join(out_dir, "eval_summary.csv"), "w") as fh:
        fh.write("class,recall\n")
        for cls, recall in report.per_class.items():
            fh.write("%d,%s\n" % (cls, "absent" if recall is None else "%.17g" % recall))
        fh.write("overall,%.17g\n" % report.accuracy)
    _echo(f"accuracy {report.accuracy:.4f} over {len(records)} samples")
    for cls, recall in report.per_class.items():
        _echo(f"  class {cls}: " + ("absent" if recall is None else f"{recall:.4f}"))
    _echo(f"wrote {eval_path}")


@cli.command()
@_config_opt
@_set_opt
@_out_opt
@click.option("--data", "-d", required=True, help="Dataset root (from gen).")
@click.option("--seeds", default="0,1,2,3,4", show_default=True,
              help="Comma-separated training seeds.")
@click.option("--variants", default=None,
              help="Comma-separated variant names (default: the full grid).")
def ablate(config_path, overrides, out_dir, data, seeds, variants) -> None:
    """Run the model-variant comparison grid."""

    task, train_cfg = resolve_configs(config_path, overrides)
    try:
        seed_tuple = tuple(int(s) for s in seeds.split(",") if s.strip() != "")
    except ValueError:
        raise CliError(f"--seeds must be comma-separated integers, got {seeds!r}") from None
    variant_tuple = None
    if variants is not None:
        variant_tuple = tuple(v.strip() for v in variants.split(",") if v.strip())
    _write_snapshot(out_dir, _resolved_dict(task, train_cfg, {
        "command": "ablate", "out": out_dir, "data": data,
        "seeds": list(seed_tuple),
        "variants": None if variant_tuple is None else list(variant_tuple),
    }))
    train_records = data_mod.load_dataset(_resolve_manifest(data, "train"))
    test_records = data_mod.load_dataset(_resolve_manifest(data, "test"))

    def progress(row, elapsed):
        _echo(f"  {row.variant} seed {row.seed}: accuracy {row.accuracy:.4f} ({elapsed:.0f}s)")

    rows = train_mod.ablate(
        train_records, test_records, train_cfg, seed_tuple,
        variants=variant_tuple, progress=progress,
    )
    grid_path = os.path.join(out_dir, "ablation.csv")
    summary_path = os.path.join(out_dir, "ablation_summary.csv")
    train_mod.write_ablation_csv(grid_path, rows)
    train_mod.write_ablation_summary_csv(summary_path, rows)
    for name, (mean, std) in train_mod.summarize_ablation(rows).items():
        _echo(f"{name}: {mean:.4f} +- {std:.4f}")
    _echo(f"wrote {grid_path}")
    _echo(f"wrote {summary_path}")


@cli.command()
@click.option("--out", "-o", "out_dir", default=None, help="Optional output directory.")
@click.option("--max-coords", default=4, show_default=True,
              help="Sampled coordinates per parameter group.")
def gradcheck(out_dir, max_coords) -> None:
    """Finite-difference audit of the end-to-end gradient on a toy config."""

    report = train_mod.gradcheck_report(max_coords_per_param=max_coords)
    worst = 0.0
    for row in report:
        worst = max(worst, row.max_rel_err)
        _echo(f"  {row.backbone_kind:9s} {row.loss_kind:6s} "
              f"worst {row.max_rel_err:.3e} at {row.worst_param}")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "gradcheck.csv")
        with open(path, "w") as fh:
            fh.write("backbone_kind,loss_kind,max_rel_err,worst_param\n")
            for row in report:
                fh.write("%s,%s,%.17g,%s\n" % (
                    row.backbone_kind, row.loss_kind, row.max_rel_err, row.worst_param))
        _echo(f"wrote {path}")
    _echo(f"max relative error {worst:.3e}")
    if not (worst < 1e-4):
        raise CliError(f"gradient check failed: max relative error {worst:.3e} >= 1e-4")


@cli.command()
@_out_opt
@click.option("--data", "-d", required=True, help="Dataset root (from gen) or a manifest path.")
@click.option("--checkpoint", "-k", default=None,
              help="Optional checkpoint; adds per-sample predictions to the report.")
@click.option("--bins", default=3, show_default=True, help="Number of dynamicity bins.")
def dynamicity(out_dir, data, checkpoint, bins) -> None:
    """Per-sample pose dynamicity, binned across the dataset."""

    if bins < 1:
        raise CliError("--bins must be at least 1")
    records = data_mod.load_dataset(_resolve_manifest(data, "test"))
    if not records:
        raise CliError("dataset is empty")
    values = np.array([data_mod.dynamicity(rec.poses) for rec in records])
    edges = np.quantile(values, np.linspace(0, 1, bins + 1)[1:-1]) if bins > 1 else []
    assignment = np.searchsorted(edges, values, side="right")

    predictions = None
    if checkpoint is not None:
        if not os.path.exists(checkpoint):
            raise CliError(f"checkpoint not found: {checkpoint}", exit_code=2)
        config, topology, params, bn_state = mdl.load_checkpoint(checkpoint)
        _, a_hat = train_mod.prepare_adjacency(config, topology)
        report = train_mod.evaluate(records, params, config, a_hat, bn_state)
        predictions = {sid: pred for sid, _, pred in report.predictions}

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "dynamicity.csv")
    with open(path, "w") as fh:
        header = "sample_id,label,dynamicity,bin"
        if predictions is not None:
            header += ",predicted,correct"
        fh.write(header + "\n")
        for rec, value, b in zip(records, values, assignment):
            line = "%s,%d,%.17g,%d" % (rec.sample_id, rec.label, value, int(b))
            if predictions is not None:
                pred = predictions[rec.sample_id]
                line += ",%d,%d" % (pred, int(pred == rec.label))
            fh.write(line + "\n")
    for b in range(bins):
        mask = assignment == b
        if not mask.any():
            _echo(f"  bin {b}: empty")
            continue
        msg = f"  bin {b}: {int(mask.sum())} samples, mean dynamicity {values[mask].mean():.4f}"
        if predictions is not None:
            correct = [predictions[r.sample_id] == r.label
                       for r, m in zip(records, mask) if m]
            msg += f", accuracy {float(np.mean(correct)):.4f}"
        _echo(msg)
    _echo(f"wrote {path}")


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except CliError as exc:
        click.echo(f"error: {exc}")
        sys.exit(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}")
        sys.exit(2)
    except click.exceptions.Abort:
        click.echo("error: aborted")
        sys.exit(1)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        click.echo(f"error: {exc}")
        sys.exit(1)


if __name__ == "__main__":
    main()
