"""Command-line entry points: mesh utilities, training, evaluation, diagnostics.

Every run is deterministic for a fixed config (seeded RNG throughout), so two
invocations with the same inputs produce byte-identical artifacts.  The output
directory resolves as: WHITNEYROM_OUT environment variable, else the config's
``out_dir`` key, else ``bench_out``.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import numpy as np

from .bench import (
    BENCHMARK_NAMES,
    BenchError,
    parse_config,
    run_benchmark,
)
from .mesh import (
    MeshError,
    MeshFormatError,
    build_disk_mesh,
    build_interval_mesh,
    build_structured_tri_mesh,
    load_mesh,
    save_mesh,
)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log at DEBUG level.")
def main(verbose):
    """Reduced finite-element model training and benchmarks."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@main.group("mesh")
def mesh_group():
    """Generate and validate mesh files."""


@mesh_group.command("gen")
@click.option("--kind", type=click.Choice(["interval", "rect", "disk"]),
              default="interval", show_default=True)
@click.option("--n", default=32, show_default=True,
              help="Elements per side (interval/rect) or rings (disk).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def mesh_gen(kind, n, out):
    """Build a mesh and save it."""
    if kind == "interval":
        mesh = build_interval_mesh(n, 0.0, 1.0)
    elif kind == "rect":
        mesh = build_structured_tri_mesh(n, n)
    else:
        mesh = build_disk_mesh(n)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out)
    click.echo(f"wrote {out}: {len(mesh.nodes)} nodes, "
               f"{len(mesh.simplices)} simplices")


@mesh_group.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def mesh_validate(path):
    """Load a mesh file and report its structure; exit 1 if invalid."""
    try:
        mesh = load_mesh(path)
    except (MeshFormatError, MeshError) as err:
        click.echo(f"invalid: {err}", err=True)
        raise SystemExit(1)
    groups = ", ".join(
        f"{k}({len(v)})" for k, v in sorted(mesh.boundary_groups.items())
    )
    click.echo(
        f"ok: dim={mesh.dim}, {len(mesh.nodes)} nodes, "
        f"{len(mesh.simplices)} simplices, {len(mesh.edges)} edges, "
        f"boundary groups: {groups}"
    )


def _load_config(path) -> dict:
    try:
        return parse_config(path)
    except (OSError, BenchError) as err:
        click.echo(str(err), err=True)
        raise SystemExit(2)


def _require_benchmark(config: dict) -> str:
    name = config.get("benchmark")
    if not name:
        click.echo("config must set 'benchmark = <name>'; choices: "
                   + ", ".join(BENCHMARK_NAMES), err=True)
        raise SystemExit(2)
    return str(name)


@main.command("train")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
def train_cmd(config):
    """Train the model described by a key=value CONFIG file."""
    cfg = _load_config(config)
    raise SystemExit(run_benchmark(_require_benchmark(cfg), cfg, "train"))


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
def eval_cmd(checkpoint, config):
    """Evaluate CHECKPOINT on the held-out grid of the configured benchmark."""
    cfg = _load_config(config)
    cfg["checkpoint"] = checkpoint
    raise SystemExit(run_benchmark(_require_benchmark(cfg), cfg, "eval"))


@main.command("diag")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
def diag_cmd(config):
    """Run the structural diagnostic suite (works untrained)."""
    cfg = _load_config(config)
    raise SystemExit(run_benchmark(_require_benchmark(cfg), cfg, "diag"))


@main.command("bench")
@click.argument("name")
@click.option("--mode", type=click.Choice(["train", "eval", "diag"]),
              default="diag", show_default=True)
@click.option("--stretch", is_flag=True,
              help="Allow the long-running shock-tube benchmark.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="Optional key=value overrides.")
def bench_cmd(name, mode, stretch, config_path):
    """Run benchmark NAME end to end in the chosen mode."""
    if name == "sod" and not stretch:
        click.echo("the shock-tube benchmark runs long; pass --stretch to "
                   "confirm", err=True)
        raise SystemExit(2)
    cfg = _load_config(config_path) if config_path else {}
    raise SystemExit(run_benchmark(name, cfg, mode))


if __name__ == "__main__":
    main()
