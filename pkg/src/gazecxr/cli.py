"""Command line entry point.

Exit codes: 0 success (possibly with skips), 1 config/validation error,
2 runtime failure with partial progress preserved.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from . import pipeline
from .config import ConfigError, load_config
from .pipeline import EXIT_CONFIG, EXIT_RUNTIME, StageError


def _parse_tasks(value):
    if not value:
        return None
    return [t.strip().upper() for t in value.split(",") if t.strip()]


def _config_options(fn):
    fn = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Override the config seed.")(fn)
    fn = click.option("--tasks", default=None, help="Comma list of tasks, e.g. GEN,ERR,DDX.")(fn)
    fn = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                      help="Run config (TOML).")(fn)
    return fn


def _load(config_path, tasks, seed, check_paths=True):
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if _parse_tasks(tasks):
        overrides["tasks"] = _parse_tasks(tasks)
    try:
        return load_config(config_path, overrides, check_paths=check_paths)
    except ConfigError as exc:
        click.echo(f"config error:\n{exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _finish(result: pipeline.StageResult, as_json: bool = False) -> None:
    if as_json:
        click.echo(json.dumps({"exit_code": result.exit_code, "counts": result.counts,
                               "messages": result.messages}, indent=2, sort_keys=True))
    else:
        click.echo(" ".join(f"{k}={v}" for k, v in result.counts.items()))
        for m in result.messages:
            click.echo(m, err=True)
    sys.exit(result.exit_code)


def _run_stage(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)


@click.group()
@click.version_option(__version__, prog_name="gazecxr")
@click.option("-v", "--verbose", count=True, help="More logging (-vv for debug).")
def main(verbose: int):
    """Gaze-overlay chest X-ray evaluation pipeline."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_config_options
def render(config_path, tasks, seed):
    """Render gaze overlays and provenance sidecars."""
    cfg = _load(config_path, tasks, seed)
    _finish(_run_stage(pipeline.cmd_render, cfg))


@main.command()
@_config_options
def build(config_path, tasks, seed):
    """Build the task instance manifest for the eval split."""
    cfg = _load(config_path, tasks, seed)
    _finish(_run_stage(pipeline.cmd_build, cfg))


@main.command()
@_config_options
@click.option("--condition", type=click.Choice(["gaze", "no_gaze", "both"]), default="both", show_default=True)
def run(config_path, tasks, seed, condition):
    """Query the endpoint for every instance and condition (cached, resumable)."""
    cfg = _load(config_path, tasks, seed)
    _finish(_run_stage(pipeline.cmd_run, cfg, condition))


@main.command()
@_config_options
def score(config_path, tasks, seed):
    """Score cached responses and write report.json / report.md."""
    cfg = _load(config_path, tasks, seed)
    result = _run_stage(pipeline.cmd_score, cfg)
    click.echo(Path(pipeline.Layout(cfg).report_md).read_text("utf-8"))
    _finish(result)


@main.command()
@_config_options
@click.option("--json", "as_json", is_flag=True, help="Emit diagnostics as json.")
def validate(config_path, tasks, seed, as_json):
    """Check paths, lexicon, split and gaze/image agreement without writing anything."""
    cfg = _load(config_path, tasks, seed, check_paths=False)
    _finish(_run_stage(pipeline.cmd_validate, cfg), as_json)


@main.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--n-eval", type=int, default=574, show_default=True)
@click.option("--n-train", type=int, default=1169, show_default=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--base-url", default="http://127.0.0.1:8000/v1", show_default=True)
def synth(out_dir, n_eval, n_train, image_size, seed, base_url):
    """Write a synthetic corpus and matching config.toml to OUT_DIR."""
    from .synth import generate_corpus

    paths = generate_corpus(out_dir, n_eval, n_train, image_size, seed, base_url)
    click.echo(str(paths.config))


@main.command("serve-mock")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--fixtures", type=click.Path(exists=True, dir_okay=False), default=None,
              help="json object mapping prompt hash -> response text.")
def serve_mock(host, port, fixtures):
    """Serve the deterministic mock VLM / NER / embedding endpoints."""
    import uvicorn

    from .mock_server import create_app

    table = json.loads(Path(fixtures).read_text("utf-8")) if fixtures else None
    uvicorn.run(create_app(table), host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
