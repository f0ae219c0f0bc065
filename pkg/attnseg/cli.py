import logging
import sys

import click

from .config import DATA_ROOT, LOG_LEVEL, load_run_config
from .errors import AttnSegError, ConfigError, ParameterError, UsageError
from .shared_constants import METHOD_ORDER
from . import tasks

logger = logging.getLogger("attnseg")

METHODS = click.Choice(list(METHOD_ORDER))
TRAIN_MODES = click.Choice(["binary_one_logit", "multi_label", "unet"])


def _config(ctx, **overrides):
    """Run config from --config YAML with global and command flags layered on top."""
    values = dict(ctx.obj["overrides"])
    for key, value in overrides.items():
        if isinstance(value, dict):
            values[key] = {**values.get(key, {}), **{k: v for k, v in value.items() if v is not None}}
        elif value is not None:
            values[key] = value
    return load_run_config(ctx.obj["config_path"], values)


def _run(fn, *args, **kwargs):
    """Calls a stage; attnseg errors become a one-line message and a non-zero exit."""
    try:
        return fn(*args, **kwargs)
    except (ConfigError, UsageError, ParameterError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(2)
    except (AttnSegError, FileNotFoundError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="YAML run config; flags override its values.")
@click.option("--output-dir", default=None, help="Artifact directory (env ATTNSEG_OUTPUT_DIR).")
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None, help="Threads for per-slice extraction.")
@click.option("--full-scale", is_flag=True, default=False, help="Use the full-size classifier instead of desk scale.")
@click.option("--log-level", default=LOG_LEVEL, show_default=True)
@click.pass_context
def cli(ctx, config_path, output_dir, seed, workers, full_scale, log_level):
    """Weakly supervised lesion segmentation from attention maps."""
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    overrides = {"output_dir": output_dir, "seed": seed, "num_workers": workers}
    if full_scale:
        overrides["desk_scale"] = False
    ctx.obj = {"config_path": config_path, "overrides": {k: v for k, v in overrides.items() if v is not None}}


@cli.command()
@click.option("--data-root", default=DATA_ROOT, show_default=True)
@click.option("--n", "n_slices", type=int, default=None, help="Number of slices.")
@click.option("--positive-fraction", type=float, default=None)
@click.option("--side", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def synth(ctx, data_root, n_slices, positive_fraction, side, seed):
    """Writes a synthetic dataset in the catalog layout."""
    config = _run(_config, ctx, seed=seed,
                  synth={"n_slices": n_slices, "positive_fraction": positive_fraction, "side": side})
    manifest = _run(tasks.stage_synth, config, data_root)
    click.echo(f"{manifest['slices']} slices ({manifest['positives']} positive) written to {data_root}")


@cli.command()
@click.option("--data-root", default=DATA_ROOT, show_default=True)
@click.pass_context
def ingest(ctx, data_root):
    """Validates a dataset directory and summarises its labels."""
    config = _run(_config, ctx)
    manifest = _run(tasks.stage_ingest, config, data_root)
    summary = manifest["summary"]
    click.echo(f"{summary['slices']} slices in {summary['studies']} studies; label counts {summary['label_counts']}")
    for error in manifest["errors"]:
        click.echo(f"warning: {error}", err=True)


@cli.command()
@click.option("--data-root", default=DATA_ROOT, show_default=True)
@click.option("--mode", type=TRAIN_MODES, default="binary_one_logit", show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.pass_context
def train(ctx, data_root, mode, epochs, lr):
    """Trains a classifier mode, or the per-fold U-Net baseline."""
    config = _run(_config, ctx)
    if epochs is not None or lr is not None:
        base = config.train_for(mode).model_dump()
        base.update({k: v for k, v in {"max_epochs": epochs, "learning_rate": lr}.items() if v is not None})
        config = _run(_config, ctx, train=base)
    manifest = _run(tasks.stage_train, config, data_root, mode)
    click.echo(f"{mode}: wrote {', '.join(manifest['artifacts'])}")


@cli.command()
@click.option("--data-root", default=DATA_ROOT, show_default=True)
@click.option("--base", "base_checkpoint", type=click.Path(dir_okay=False), default=None,
              help="One-logit checkpoint whose backbone is reused.")
@click.option("--epochs", type=int, default=None)
@click.pass_context
def finetune(ctx, data_root, base_checkpoint, epochs):
    """Fine-tunes a two-logit classifier from a one-logit backbone."""
    config = _run(_config, ctx)
    if epochs is not None:
        base = config.train_for("binary_two_logit").model_dump()
        base["max_epochs"] = epochs
        config = _run(_config, ctx, train=base)
    manifest = _run(tasks.stage_finetune, config, data_root, base_checkpoint)
    click.echo(f"binary_two_logit: wrote {manifest['checkpoint']}")


@cli.command()
@click.option("--data-root", default=DATA_ROOT, show_default=True)
@click.option("--method", type=METHODS, required=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--layers", default=None, help="Comma-separated 1-based layers to fuse, e.g. 1,2,3.")
@click.option("--per-layer", is_flag=True, default=False, help="Also save each layer's map under maps/<method>/layers.")
@click.pass_context
def extract(ctx, data_root, method, checkpoint, layers, per_layer):
    """Saliency (or U-Net probability) maps for every slice."""
    fused = tuple(int(x) for x in layers.split(",")) if layers else None
    config = _run(_config, ctx, method=method, segment={"fused_layers": fused, "save_layer_maps": per_layer or None})
    manifest = _run(tasks.stage_extract, config, data_root, method, checkpoint)
    click.echo(f"{method}: {manifest['slices']} maps in {manifest['maps_dir']}")


@cli.command()
@click.option("--data-root", default=DATA_ROOT, show_default=True)
@click.option("--method", type=METHODS, required=True)
@click.option("--min-pixels", type=int, default=None)
@click.pass_context
def segment(ctx, data_root, method, min_pixels):
    """Binary masks with cross-validated thresholds."""
    config = _run(_config, ctx, method=method, segment={"min_pixels": min_pixels})
    manifest = _run(tasks.stage_segment, config, data_root, method)
    click.echo(f"{method}: thresholds per fold {manifest['thresholds']}")


@cli.command()
@click.option("--data-root", default=DATA_ROOT, show_default=True)
@click.option("--method", "methods", type=METHODS, multiple=True, help="Repeatable; default: all segmented.")
@click.pass_context
def evaluate(ctx, data_root, methods):
    """Fold-wise segmentation and detection reports for the segmented methods."""
    config = _run(_config, ctx)
    manifest = _run(tasks.stage_evaluate, config, data_root, list(methods) or None)
    with open(manifest["tables"]["summary"]) as f:
        click.echo(f.read(), nl=False)


@cli.command()
@click.option("--data-root", default=DATA_ROOT, show_default=True)
@click.option("--method", type=METHODS, required=True)
@click.option("--slice", "slice_ids", multiple=True, help="Slice id; repeatable. Default: first positives.")
@click.option("--limit", type=int, default=8, show_default=True)
@click.pass_context
def overlay(ctx, data_root, method, slice_ids, limit):
    """PNG overlays: prediction in red over ground truth in green."""
    config = _run(_config, ctx, method=method)
    paths = _run(tasks.stage_overlay, config, data_root, method, list(slice_ids) or None, limit)
    click.echo(f"{len(paths)} overlays written")


@cli.command()
@click.option("--method", "methods", type=METHODS, multiple=True, help="Repeatable; default: all methods.")
@click.option("--n", "n_slices", type=int, default=None)
@click.option("--epochs", type=int, default=None, help="Epoch cap for every training mode.")
@click.pass_context
def pipeline(ctx, methods, n_slices, epochs):
    """synth -> train -> finetune -> extract -> segment -> evaluate on synthetic data."""
    config = _run(_config, ctx, synth={"n_slices": n_slices}, epochs=epochs)
    manifest = _run(tasks.run_pipeline, config, list(methods) or METHOD_ORDER)
    with open(manifest["tables"]["summary"]) as f:
        click.echo(f.read(), nl=False)


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
