"""Command-line entry points: run, stats, calibrate, mock-serve, validate."""

from __future__ import annotations

import json
import logging
import time

import click

from .datamodel import read_manifest
from .detect import calibrate_thresholds
from .mockserver import serve_mocks
from .orchestrator import (
    STAGES,
    PipelineRunner,
    fetch_image,
    load_config,
    validate_manifest,
)
from .stats import ALL_STATUSES, dataset_stats, per_detector_stats


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool):
    """Open-vocabulary instance annotation pipeline."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _runner(config, set_, workers=None):
    cfg = load_config(config, list(set_))
    if workers is not None:
        cfg.workers = workers
    return PipelineRunner(cfg)


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--from", "from_stage", default="curate", type=click.Choice(STAGES))
@click.option("--to", "to_stage", default="finalize", type=click.Choice(STAGES))
@click.option("--workers", type=int, default=None)
@click.option("--force", is_flag=True, help="Discard stale partial stage state.")
@click.option("--set", "set_", multiple=True, metavar="KEY.PATH=VALUE",
              help="Override a config value by dotted path.")
def run(config, from_stage, to_stage, workers, force, set_):
    """Run pipeline stages over the configured input manifest."""
    runner = _runner(config, set_, workers)
    out = runner.run(from_stage=from_stage, to_stage=to_stage, force=force)
    click.echo(f"final manifest: {out}")


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--status", default="verified",
              type=click.Choice(sorted(ALL_STATUSES) + ["all"]))
@click.option("--format", "fmt", default="text", type=click.Choice(["text", "json"]))
def stats(manifest, status, fmt):
    """Dataset-level and per-detector statistics for a manifest."""
    statuses = ALL_STATUSES if status == "all" else {status}
    ds = dataset_stats(manifest, statuses)
    pd = per_detector_stats(manifest, statuses)
    if fmt == "json":
        click.echo(json.dumps({"dataset": ds, "per_detector": pd}, indent=2))
        return
    click.echo(f"images:              {ds['images']}")
    click.echo(f"distinct categories: {ds['distinct_categories']}")
    click.echo(f"avg categories/img:  {ds['avg_category']:.2f}")
    click.echo(f"avg boxes/img:       {ds['avg_box']:.2f}")
    w, h = ds["avg_resolution"]
    click.echo(f"avg resolution:      {w:.0f}x{h:.0f}")
    click.echo(f"avg aesthetic:       {ds['avg_aesthetic']:.2f}")
    for det, m in pd.items():
        click.echo(
            f"  {det}: contribution {m['box_contribution']:.1%}, "
            f"coverage {m['cat_coverage']:.1%}, unique {m['unique_cat']:.1%}"
        )


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--sample", required=True, type=click.Path(exists=True),
              help="Manifest of records (with categories) to calibrate on.")
@click.option("--target-mean", required=True, type=float,
              help="Target mean boxes/image per detector.")
@click.option("--set", "set_", multiple=True, metavar="KEY.PATH=VALUE")
def calibrate(config, sample, target_mean, set_):
    """Balance per-detector thresholds against a target detection count."""
    runner = _runner(config, set_)
    records = [r for r in read_manifest(sample) if r.failed is None]
    thresholds = calibrate_thresholds(
        records,
        runner.cfg.detectors,
        target_mean,
        runner.gateway,
        lambda record: fetch_image(record.uri, runner.image_cache).data,
    )
    click.echo(json.dumps(thresholds, indent=2))


@main.command("mock-serve")
@click.option("--fixtures", required=True, type=click.Path())
@click.option("--port", default=0, type=int)
@click.option("--fallback", default="template", type=click.Choice(["template", "error"]))
def mock_serve(fixtures, port, fallback):
    """Serve deterministic mock model backends for offline runs."""
    service = serve_mocks(fixtures, port=port, fallback=fallback)
    click.echo(f"mock services listening on {service.base_url}")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        service.close()


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--nms-threshold", default=0.4, type=float)
@click.option("--layer-iou-max", default=0.3, type=float)
def validate(manifest, nms_threshold, layer_iou_max):
    """Run all invariant checks over a manifest."""
    violations = validate_manifest(manifest, nms_threshold, layer_iou_max)
    for v in violations:
        click.echo(v)
    if violations:
        raise SystemExit(1)
    click.echo("ok")


if __name__ == "__main__":
    main()
