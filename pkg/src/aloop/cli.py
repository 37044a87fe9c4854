"""Command line surface: validation, serving, synthetic data and experiments."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import ConfigError, parse_run_config, validate_run_config


@click.group()
def main():
    """Active-learning loop for layered image segmentation."""


@main.group("config")
def config_group():
    """Run-configuration helpers."""


@config_group.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def config_validate(path):
    """Parse a run config and report violations."""
    text = Path(path).read_text()
    try:
        cfg = parse_run_config(text)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    for warning in cfg.warnings:
        click.echo(f"warning: {warning}", err=True)
    violations = validate_run_config(cfg)
    for v in violations:
        click.echo(f"violation: {v.path}: {v.rule}", err=True)
    if violations:
        sys.exit(1)
    click.echo(f"ok: {path}")


@main.group("protocol")
def protocol_group():
    """Annotation-protocol helpers."""


@protocol_group.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def protocol_validate(path):
    """Parse an annotation protocol and report errors."""
    from .protocol import ProtocolError, parse_protocol

    try:
        proto = parse_protocol(Path(path).read_text())
    except ProtocolError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    for warning in proto.warnings:
        click.echo(f"warning: {warning}", err=True)
    user = proto.user_states()
    click.echo(f"ok: {path} ({len(proto.states)} states, {len(user)} user states)")


@main.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--workspace", envvar="ALOOP_WORKSPACE", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--protocol", "protocol_path", type=click.Path(exists=True, dir_okay=False),
              help="Annotation protocol YAML; mounts /sessions when given.")
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--frontend", "frontend_dir", type=click.Path(file_okay=False),
              help="Static bundle directory to serve at /ui.")
def serve(config_path, workspace, protocol_path, port, host, frontend_dir):
    """Run the AL cycle controller over HTTP."""
    import uvicorn

    from .controller import CycleController, build_app

    cfg = parse_run_config(Path(config_path).read_text())
    violations = validate_run_config(cfg)
    if violations:
        for v in violations:
            click.echo(f"violation: {v.path}: {v.rule}", err=True)
        sys.exit(1)
    controller = CycleController(cfg, workspace)
    engine = None
    if protocol_path:
        from .protocol import SessionEngine, parse_protocol

        engine = SessionEngine(parse_protocol(Path(protocol_path).read_text()),
                               store=controller.dm)
    app = build_app(controller, engine)
    if frontend_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=frontend_dir, html=True), name="ui")
    click.echo(f"serving workspace {workspace} on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("simgen")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def simgen(spec_path, out_dir):
    """Generate a synthetic layered workspace."""
    from .simlab import GenerationError, generate_synthetic, load_spec_yaml

    try:
        spec = load_spec_yaml(spec_path)
        root = generate_synthetic(spec, out_dir)
    except GenerationError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    n = spec.volumes * spec.slices_per_volume
    click.echo(f"ok: {n} slices in {spec.volumes} volumes at {root}")


@main.command("experiment")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--strategies", "strategy_csv", default="ENT,RANDOM", show_default=True,
              help="Comma-separated strategy names.")
@click.option("--folds", default=5, show_default=True)
@click.option("--seeds", default=3, show_default=True, help="Number of seeds (0..n-1).")
@click.option("--out", "out_csv", required=True, type=click.Path(dir_okay=False))
@click.option("--workers", default=1, show_default=True)
@click.option("--keep-workspaces", "keep_dir", type=click.Path(file_okay=False),
              help="Directory for the generated workspaces (default: temporary).")
@click.option("--full/--no-full", "include_full", default=True, show_default=True,
              help="Also train on the complete pool for a 100% budget row.")
def experiment(config_path, spec_path, strategy_csv, folds, seeds, out_csv,
               workers, keep_dir, include_full):
    """Run the cross-validated AL experiment and write a learning-curve CSV."""
    from .experiment import render_table, run_experiment
    from .simlab import load_spec_yaml

    cfg = parse_run_config(Path(config_path).read_text())
    spec = load_spec_yaml(spec_path)
    names = [s.strip() for s in strategy_csv.split(",") if s.strip()]
    curve = run_experiment(cfg, spec, names, folds=folds, seeds=range(seeds),
                           out_dir=keep_dir, workers=workers, include_full=include_full)
    curve.write_csv(out_csv)
    click.echo(render_table(curve))
    click.echo(f"wrote {len(curve.rows)} rows to {out_csv}")
    if curve.failures:
        click.echo(f"warning: {len(curve.failures)} cells failed", err=True)


@main.command("report")
@click.argument("results_csv", type=click.Path(exists=True, dir_okay=False))
def report(results_csv):
    """Print the budget-by-strategy dice table for a results CSV."""
    from .experiment import LearningCurve, render_table

    click.echo(render_table(LearningCurve.read_csv(results_csv)))


if __name__ == "__main__":
    main()
