"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint
error. Every run directory gets a resolved-config snapshot, and concurrent
runs against the same directory are rejected via a lockfile.
"""
from __future__ import annotations

import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from . import evaluate as ev
from . import synthworld as sw
from . import train as tr
from .config import RunConfig, load_run_config, write_resolved_config
from .errors import (CheckpointMismatchError, ConfigError, DataError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4

LOCK_NAME = ".run.lock"


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory is locked by another process: {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _fail(exc: Exception, code: int) -> int:
    click.echo(f"error: {exc}", err=True)
    return code


def _dispatch(fn) -> int:
    try:
        fn()
        return EXIT_OK
    except CheckpointMismatchError as exc:
        return _fail(exc, EXIT_CHECKPOINT)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except DataError as exc:
        return _fail(exc, EXIT_DATA)


def _load_cfg(config, overrides) -> RunConfig:
    return load_run_config(config, list(overrides))


def _load_data(data_dir) -> tr.ClipData:
    return tr.ClipData(sw.read_dataset(data_dir))


@click.group()
def main():
    """Disentangled face-factor pipeline on a synthetic world."""


opt_config = click.option("--config", type=click.Path(), default=None,
                          help="JSON config file; defaults merged with overrides.")
opt_set = click.option("--set", "overrides", multiple=True,
                       help="Override a config field, e.g. --set stage.steps=100")


@main.command("gen-data")
@opt_config
@opt_set
@click.option("--out", required=True, type=click.Path())
def gen_data(config, overrides, out):
    """Generate a clip dataset at OUT."""
    def body():
        cfg = _load_cfg(config, overrides)
        clips = sw.make_dataset(cfg.world)
        sw.write_dataset(clips, out)
        click.echo(f"wrote {len(clips)} clips to {out}")
    sys.exit(_dispatch(body))


@main.command("train")
@opt_config
@opt_set
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--ckpt", "ckpt_in", default=None, type=click.Path(),
              help="Checkpoint from the preceding stage.")
def train_cmd(config, overrides, data_dir, out_dir, ckpt_in):
    """Train the stage selected by the config (probe, 1, 2-lip, 2-eye, 2-pose, 3)."""
    def body():
        cfg = _load_cfg(config, overrides)
        with run_lock(Path(out_dir)):
            write_resolved_config(cfg, out_dir)
            data = _load_data(data_dir)
            tr.run_stage(cfg, data, ckpt_in=ckpt_in, out_dir=out_dir)
        click.echo(f"stage {cfg.stage.stage} complete: {out_dir}")
    sys.exit(_dispatch(body))


@main.command("eval")
@opt_config
@opt_set
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--protocol", type=click.Choice(["self_driving", "cross_video"]),
              default="self_driving")
@click.option("--n-pairs", default=8)
@click.option("--matrix/--no-matrix", default=True,
              help="Also compute the factor disentanglement matrix.")
def eval_cmd(config, overrides, data_dir, ckpt, out_dir, protocol, n_pairs, matrix):
    """Evaluate a trained pipeline checkpoint."""
    def body():
        cfg = _load_cfg(config, overrides)
        with run_lock(Path(out_dir)):
            write_resolved_config(cfg, out_dir)
            data = _load_data(data_dir)
            model, _, _ = tr.load_pipeline(ckpt, cfg.net)
            model.eval()
            spec = ev.ProtocolSpec(protocol, n_pairs=n_pairs, seed=cfg.stage.seed)
            report = ev.run_protocol(model, data, spec)
            if matrix:
                driver = ev.DrivenGenerator(model)
                f_app = driver.appearance(data.clips[0].frames[0])
                mat = ev.disentanglement_matrix(
                    lambda row, factors: ev.model_single_factor_generate(
                        driver, row, factors, f_app),
                    model.probe, seed=cfg.stage.seed)
                report.metrics["diag_dominance"] = ev.diag_dominance(mat)
                np.savetxt(Path(out_dir) / "disentanglement_matrix.csv", mat,
                           delimiter=",", header=",".join(ev.ROWS))
            report.to_json(Path(out_dir) / "metrics.json")
            report.to_csv(Path(out_dir) / "metrics.csv")
        click.echo(json.dumps(report.metrics, indent=2, sort_keys=True))
    sys.exit(_dispatch(body))


@main.command("ablate")
@opt_config
@opt_set
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--ckpt", "ckpts", multiple=True, required=True,
              help="name=path pairs of trained variants, e.g. all=run/ckpt.ff")
@click.option("--out", "out_dir", required=True, type=click.Path())
def ablate_cmd(config, overrides, data_dir, ckpts, out_dir):
    """Compare trained variants on fixed-expression sync confidence."""
    def body():
        cfg = _load_cfg(config, overrides)
        with run_lock(Path(out_dir)):
            write_resolved_config(cfg, out_dir)
            data = _load_data(data_dir)
            rows = {}
            for pair in ckpts:
                if "=" not in pair:
                    raise ConfigError(f"--ckpt expects name=path, got {pair!r}")
                name, path = pair.split("=", 1)
                model, _, _ = tr.load_pipeline(path, cfg.net)
                model.eval()
                rows[name] = {
                    "sync_conf_fixed_exp": ev.fixed_expression_sync(
                        model, data, seed=cfg.stage.seed),
                }
            out = Path(out_dir) / "ablation.json"
            out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
            click.echo(json.dumps(rows, indent=2, sort_keys=True))
    sys.exit(_dispatch(body))


@main.command("grid")
@opt_config
@opt_set
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", "n_steps", default=5, help="Frames per factor row.")
def grid_cmd(config, overrides, data_dir, ckpt, out_path, n_steps):
    """Render a control sheet: one row per factor, sweeping only that slot."""
    def body():
        from PIL import Image
        cfg = _load_cfg(config, overrides)
        data = _load_data(data_dir)
        model, _, _ = tr.load_pipeline(ckpt, cfg.net)
        model.eval()
        driver = ev.DrivenGenerator(model)
        f_app = driver.appearance(data.clips[0].frames[0])
        spec = sw.DynamicsSpec(length=n_steps, blink_rate=0.3,
                               exp_segment_min=1, exp_segment_max=2)
        rows = []
        for i, row in enumerate(ev.ROWS):
            tracks = ev.single_factor_tracks(row, 1000 + i, spec)
            factors = ev.tracks_to_factors(tracks, data.clips[0].factors[0].identity_seed)
            frames = ev.model_single_factor_generate(driver, row, factors, f_app)
            rows.append(np.concatenate(list(frames), axis=1))
        sheet = (np.concatenate(rows, axis=0) * 255).astype(np.uint8)
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(sheet).save(out_path)
        click.echo(f"wrote {out_path}")
    sys.exit(_dispatch(body))


@main.command("interp")
@opt_config
@opt_set
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", "n_steps", default=7)
def interp_cmd(config, overrides, data_dir, ckpt, out_path, n_steps):
    """Render an expression-interpolation strip between two frames."""
    def body():
        from PIL import Image
        cfg = _load_cfg(config, overrides)
        data = _load_data(data_dir)
        if len(data) < 2:
            raise DataError("interp needs at least two clips")
        model, _, _ = tr.load_pipeline(ckpt, cfg.net)
        model.eval()
        a, b = data.clips[0], data.clips[1]
        strip = ev.interpolate_expression(model, a.frames[0], a.frames[len(a) // 2],
                                          b.frames[len(b) // 2], n_steps)
        img = (np.concatenate(list(strip), axis=1) * 255).astype(np.uint8)
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(out_path)
        click.echo(f"wrote {out_path}")
    sys.exit(_dispatch(body))


if __name__ == "__main__":
    main()
