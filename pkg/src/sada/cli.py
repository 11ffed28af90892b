"""``sada`` command line.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. The output
root defaults to ``$SADA_OUTPUT_ROOT`` (else ``./sada-runs``).
"""

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from sada import data, experiment, models, sensitivity
from sada.augment import AugmentationConfig
from sada.errors import ConfigError, SadaError

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load_dataset(ref, split):
    """``mnist5k`` or a directory written by :func:`sada.data.save_dataset`."""
    if ref == "mnist5k":
        train, test = data.mnist5k()
        return train if split == "train" else test
    path = Path(ref)
    if not path.is_dir():
        raise ConfigError(f"dataset '{ref}' is neither 'mnist5k' nor a dataset directory")
    return data.load_dataset(path)


def _load_checkpoint(path):
    if path is None or not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}; train one first with `sada train --preset erm`")
    return models.load_checkpoint(path)


def _parse_list(text, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse list '{text}': {e}") from e


def _parse_target(text):
    kind, _, sev = text.partition(":")
    try:
        return data.DomainShiftSpec(kind, int(sev or 3)).to_dict()
    except ValueError as e:
        raise ConfigError(f"bad target '{text}': {e}") from e


def train_options(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(), help="JSON experiment config."),
        click.option("--preset", type=click.Choice(experiment.PRESETS), help="Training strategy."),
        click.option("--seeds", help="Comma-separated seeds, e.g. 0,1,2."),
        click.option("--aug-fraction", type=float, help="Fraction of the source set receiving augmented views."),
        click.option("--lam", type=float, help="Weight of the consistency term."),
        click.option("--T", "T", type=int, help="Attack iterations."),
        click.option("--delta", type=float, help="Attack step size."),
        click.option("--epsilon", type=float, help="Initial amplitude perturbation."),
        click.option("--finetune-epochs", type=int),
        click.option("--erm-epochs", type=int),
        click.option("--map-fraction", type=float, help="Sample fraction for sensitivity maps."),
        click.option("--target", "targets", multiple=True, help="kind:severity, repeatable."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def build_config(config_path=None, preset=None, seeds=None, aug_fraction=None, lam=None, T=None, delta=None,
                 epsilon=None, finetune_epochs=None, erm_epochs=None, map_fraction=None, targets=()):
    """Config file first, then flag overrides."""
    try:
        cfg = experiment.load_config(config_path) if config_path else experiment.ExperimentConfig()
        train, aug = cfg.train, cfg.train.aug
        aug = replace(aug, **{k: v for k, v in {"T": T, "delta": delta, "epsilon": epsilon}.items() if v is not None})
        train_kw = {"aug": aug}
        if lam is not None:
            train_kw["lam"] = lam
        if aug_fraction is not None:
            train_kw["aug_fraction"] = aug_fraction
        if finetune_epochs is not None:
            train_kw["optim"] = replace(train.optim, epochs=finetune_epochs)
        cfg = replace(cfg, train=replace(train, **train_kw))
        if preset:
            cfg = replace(cfg, preset=preset)
        if seeds:
            cfg = replace(cfg, seeds=_parse_list(seeds, int))
        if erm_epochs is not None:
            cfg = replace(cfg, erm=replace(cfg.erm, epochs=erm_epochs))
        if map_fraction is not None:
            cfg = replace(cfg, map=replace(cfg.map, fraction=map_fraction))
        if targets:
            cfg = replace(cfg, targets=[_parse_target(t) for t in targets])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    cfg.validate()
    return cfg


@click.group()
@click.option("--output-root", envvar=experiment.OUTPUT_ROOT_ENV, type=click.Path(), default="sada-runs",
              show_default=True, help=f"Root for runs and caches (env {experiment.OUTPUT_ROOT_ENV}).")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, output_root, verbose):
    """Spectral adversarial augmentation experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"root": Path(output_root)}


@cli.command("sensitivity")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--dataset", default="mnist5k", show_default=True)
@click.option("--split", default="train", type=click.Choice(["train", "test"]), show_default=True)
@click.option("--kind", default="modulated", type=click.Choice(["original", "modulated"]), show_default=True)
@click.option("--epsilon", default=0.2, show_default=True)
@click.option("--fraction", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def sensitivity_cmd(checkpoint, dataset, split, kind, epsilon, fraction, seed, out):
    """Compute a sensitivity map and write CSV/JSON/PNG."""
    oracle = _load_checkpoint(checkpoint)
    ds = _load_dataset(dataset, split)
    kind = sensitivity.ORIGINAL if kind == "original" else sensitivity.MODULATED
    smap, paths = experiment.cmd_sensitivity(oracle, ds, out, kind=kind, epsilon=epsilon, fraction=fraction, seed=seed)
    click.echo(json.dumps({"l1": sensitivity.map_l1_summary(smap), **{k: str(v) for k, v in paths.items()}}))


@cli.command("augment")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--map", "map_path", required=True, type=click.Path(), help="Map CSV (JSON sidecar alongside).")
@click.option("--dataset", default="mnist5k", show_default=True)
@click.option("--split", default="train", type=click.Choice(["train", "test"]), show_default=True)
@click.option("--n", default=16, show_default=True)
@click.option("--epsilon", default=0.2, show_default=True)
@click.option("--delta", default=0.08, show_default=True)
@click.option("--T", "T", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def augment_cmd(checkpoint, map_path, dataset, split, n, epsilon, delta, T, seed, out):
    """Write SADA-augmented samples as PNGs with a manifest."""
    oracle = _load_checkpoint(checkpoint)
    stem = Path(map_path).with_suffix("")
    if not stem.with_suffix(".csv").exists():
        raise ConfigError(f"map not found: {map_path}; compute one with `sada sensitivity`")
    smap = sensitivity.load_map(stem)
    try:
        cfg = AugmentationConfig(epsilon=epsilon, delta=delta, T=T, n_augments=1, mix_split=(1, 0))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    manifest = experiment.cmd_augment(oracle, _load_dataset(dataset, split), smap.values, out, cfg, n=n, seed=seed)
    click.echo(str(manifest))


@cli.command("train")
@train_options
@click.pass_context
def train_cmd(ctx, **kw):
    """Run (or resume) every seed of a configuration and append a run record."""
    cfg = build_config(**kw)
    record, path = experiment.run_experiment(cfg, ctx.obj["root"])
    click.echo(json.dumps({"record": str(path), "mean": record["mean"], "map_l1": record["map_l1_final"]}))


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--dataset", default="mnist5k", show_default=True)
@click.option("--target", "targets", multiple=True, help="kind:severity, repeatable.")
@click.option("--out", type=click.Path())
def eval_cmd(checkpoint, dataset, targets, out):
    """Accuracy on the clean test split and each target domain."""
    oracle = _load_checkpoint(checkpoint)
    test = _load_dataset(dataset, "test")
    specs = [_parse_target(t) for t in targets] or [dict(t) for t in experiment.DESK_TARGETS]
    click.echo(json.dumps(experiment.cmd_eval(oracle, test, specs, out_path=out), sort_keys=True))


@cli.command("sweep")
@click.option("--axis", required=True, type=click.Choice(sorted(experiment.SWEEP_AXES)))
@click.option("--values", required=True, help="Comma-separated axis values.")
@click.option("--out", required=True, type=click.Path())
@train_options
@click.pass_context
def sweep_cmd(ctx, axis, values, out, **kw):
    """One run per axis value; writes sweep.csv, sweep.json and sweep.png."""
    cfg = build_config(**kw)
    cast = int if axis == "T" else float
    Path(out).mkdir(parents=True, exist_ok=True)
    rows = experiment.cmd_sweep(cfg, axis, _parse_list(values, cast), out, ctx.obj["root"])
    click.echo(json.dumps(rows))
    if not any(r["ok"] for r in rows):
        raise SadaError("every sweep value failed")


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
def report_cmd(run_dirs, out):
    """Scatter of target accuracy against map l1 across runs."""
    summary = experiment.cmd_report(run_dirs, out)
    click.echo(json.dumps({"spearman": summary["spearman"], "n_points": len(summary["points"])}))


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="sada", standalone_mode=False)
    except (ConfigError, click.UsageError, click.BadParameter) as e:
        click.echo(f"config error: {e.format_message() if isinstance(e, click.ClickException) else e}", err=True)
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - map everything else to the runtime exit code
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
