"""``direct-pretrain`` command line.

Exit codes: 0 ok, 2 usage, 3 config, 4 runtime. Commands that write into an
output root hold a lock file there; a failed run leaves only a ``FAILED``
marker behind.
"""
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from importlib import resources
from pathlib import Path

import click
from filelock import FileLock, Timeout

from .errors import ConfigError, DirectPretrainError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
FAILED_MARKER = "FAILED"

log = logging.getLogger("direct_pretrain")


class RuntimeFailure(DirectPretrainError):
    pass


def _ints(text):
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


def _load_config(path, overrides):
    from .config import validate_config

    return validate_config(Path(path), overrides=overrides)


@contextmanager
def guarded(out_dir):
    """Lock ``out_dir``; on failure drop a marker instead of partial outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / FAILED_MARKER
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RuntimeFailure(f"{out_dir} is locked by another run") from None
    try:
        marker.unlink(missing_ok=True)
        yield out_dir
    except BaseException as e:
        marker.write_text(f"{type(e).__name__}: {e}\n")
        raise
    finally:
        lock.release()
        Path(lock.lock_file).unlink(missing_ok=True)


def _dataset(cfg, split="train"):
    from .data.coco import CocoDataset

    root = cfg.dataset.train if split == "train" else (cfg.dataset.val or cfg.dataset.train)
    return CocoDataset(root, cfg.dataset.annotation_file, cfg.dataset.image_dir)


def _echo_json(obj):
    click.echo(json.dumps(obj, indent=2, sort_keys=True, default=float))


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def cli(verbose):
    """Direct pre-training pipeline: plan, pretrain, transfer, finetune, evaluate."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


config_option = click.option("-c", "--config", "config_path", required=True,
                             type=click.Path(exists=True, dir_okay=False), help="Pipeline YAML config.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY.PATH=VALUE",
                          help="Dotted override, e.g. phases.finetune.bn_mode=fixed.")


@cli.command("synth-data")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Dataset directory to create.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--num-images", default=100, show_default=True, type=click.IntRange(min=0))
@click.option("--width", default=160, show_default=True, type=click.IntRange(min=8))
@click.option("--height", default=128, show_default=True, type=click.IntRange(min=8))
@click.option("--shapes", default="1,4", show_default=True, help="min,max shapes per image.")
@click.option("--force", is_flag=True, help="Replace an existing dataset.")
def synth_data(out, seed, num_images, width, height, shapes, force):
    """Generate a COCO-style synthetic shapes dataset."""
    from .harness.synthetic import SyntheticSpec, generate_shapes_dataset

    lo_hi = _ints(shapes)
    if len(lo_hi) != 2:
        raise click.BadParameter("--shapes needs two integers, min,max")
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise RuntimeFailure(f"{out} exists and is not empty (use --force)")
    spec = SyntheticSpec(num_images=num_images, image_size=(width, height), shapes_per_image=lo_hi, seed=seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    # build next to the target, then swap in, so a crash never leaves half a dataset
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        generate_shapes_dataset(spec, tmp)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    click.echo(f"wrote {num_images} images to {out}")


def _run_phase(cfg, phase, load_override=None):
    from .config import to_train_config
    from .harness.profiler import profile
    from .harness.train import train_phase

    tc = to_train_config(cfg, phase, load_override)
    if tc.load is not None and not Path(tc.load.checkpoint).exists():
        raise RuntimeFailure(f"checkpoint {tc.load.checkpoint} not found; run the earlier phase first")
    with guarded(tc.output_dir):
        ckpt, run_log = train_phase(tc, _dataset(cfg))
    summary = {"phase": phase.name, "checkpoint": str(Path(tc.output_dir) / f"{phase.name}.ckpt"),
               "iterations": len(run_log), **profile(run_log)}
    if run_log:
        summary["final_loss"] = run_log[-1]["loss"]
    _echo_json(summary)


@cli.command()
@config_option
@set_option
@click.option("--phase", "phase_name", default="pretrain", show_default=True, help="Phase name or kind.")
def pretrain(config_path, overrides, phase_name):
    """Run a pre-training phase (low resolution, large batch)."""
    cfg = _load_config(config_path, overrides)
    phase = cfg.phase(phase_name)
    if phase.phase != "pretrain":
        raise ConfigError(f"phase {phase.name!r} is a {phase.phase} phase; use `finetune`")
    _run_phase(cfg, phase)


@cli.command()
@config_option
@set_option
@click.option("--phase", "phase_name", default="finetune", show_default=True, help="Phase name or kind.")
@click.option("--load", "load_path", type=click.Path(exists=True, dir_okay=False), help="Checkpoint to start from.")
@click.option("--parts", default="all", show_default=True, help="Comma-separated part tags to load.")
@click.option("--permissive", is_flag=True, help="Skip shape mismatches instead of failing.")
def finetune(config_path, overrides, phase_name, load_path, parts, permissive):
    """Run a fine-tuning phase, optionally loading a checkpoint."""
    from .checkpoint import normalize_parts
    from .config import LoadConfig

    cfg = _load_config(config_path, overrides)
    phase = cfg.phase(phase_name)
    if phase.phase != "finetune":
        raise ConfigError(f"phase {phase.name!r} is a {phase.phase} phase; use `pretrain`")
    load = None
    if load_path:
        try:
            normalize_parts(parts)
        except DirectPretrainError as e:
            raise click.BadParameter(str(e), param_hint="--parts") from None
        tags = tuple(p.strip() for p in parts.split(",") if p.strip())
        load = LoadConfig.model_construct(checkpoint=str(Path(load_path).resolve()), parts=tags,
                                          strict=not permissive)
    _run_phase(cfg, phase, load)


@cli.command()
@click.option("--src", required=True, type=click.Path(exists=True, dir_okay=False), help="Source checkpoint.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint to write.")
@click.option("--parts", default="all", show_default=True, help="Comma-separated part tags to copy.")
@click.option("--num-classes", type=click.IntRange(min=1), help="Target class count (default: source's).")
@click.option("--seed", default=0, show_default=True, type=int, help="Init seed for parts not copied.")
@click.option("--permissive", is_flag=True, help="Skip shape mismatches instead of failing.")
def transfer(src, out, parts, num_classes, seed, permissive):
    """Copy selected parts of a checkpoint into a freshly initialised model."""
    from .checkpoint import Checkpoint, load_checkpoint, load_partial, normalize_parts, save_checkpoint
    from .harness.train import build_model

    try:
        normalize_parts(parts)
    except DirectPretrainError as e:
        raise click.BadParameter(str(e), param_hint="--parts") from None
    ckpt = load_checkpoint(src)
    n = num_classes or int(ckpt.meta.get("num_classes", 3))
    model = build_model(n, seed, **ckpt.meta.get("model", {}))
    _, report = load_partial(model, ckpt, parts, strict=not permissive)
    meta = {**ckpt.meta, "num_classes": n, "iteration": 0, "transfer": report.as_dict(),
            "transfer_source": str(Path(src).resolve()), "transfer_parts": parts}
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint.from_model(model, meta), out)
    _echo_json({"out": str(out), **{k: len(v) for k, v in report.as_dict().items()}})


@cli.command("eval")
@config_option
@set_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", type=click.Choice(["val", "train"]), default="val", show_default=True)
@click.option("--iou-type", type=click.Choice(["bbox", "segm"]), help="Defaults to the config's evaluator.")
@click.option("--json", "json_out", type=click.Path(dir_okay=False), help="Also write metrics here.")
def eval_cmd(config_path, overrides, checkpoint, split, iou_type, json_out):
    """COCO-style AP of a checkpoint on the configured dataset."""
    from .checkpoint import load_checkpoint
    from .harness.train import evaluate_model, model_from_checkpoint

    cfg = _load_config(config_path, overrides)
    model = model_from_checkpoint(load_checkpoint(checkpoint))
    ev = cfg.evaluator
    res = evaluate_model(model, _dataset(cfg, split), cfg.eval_resize(), iou_type=iou_type or ev.iou_type,
                         interpolation=ev.interpolation, max_dets=ev.max_dets)
    metrics = res.as_dict()
    if json_out:
        Path(json_out).write_text(json.dumps(metrics, indent=2, sort_keys=True, default=float))
    _echo_json(metrics)


@cli.command("profile")
@click.argument("run_log", type=click.Path(exists=True, dir_okay=False))
@click.option("--warmup", default=50, show_default=True, type=click.IntRange(min=0))
def profile_cmd(run_log, warmup):
    """Summarise a run log: time per iteration, data time, peak batch bytes."""
    from .harness.profiler import profile, read_log

    _echo_json(profile(read_log(run_log), warmup=warmup))


def sample_records_path():
    return resources.files("direct_pretrain") / "resources" / "sample_records.csv"


@cli.command()
@click.option("-c", "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Take the planner query from this config.")
@set_option
@click.option("--target-memory", help="Per-worker budget, e.g. 11G (binary units).")
@click.option("--records", type=click.Path(exists=True, dir_okay=False),
              help="Measurement CSV (batch,resolution,memory,time,ap); defaults to the bundled sample.")
@click.option("--batches", default=None, help="Candidate batches, default 2,4,8,16.")
@click.option("--resolutions", default=None, help="Candidate resolutions, default 224,320,448,640.")
@click.option("--json", "json_out", type=click.Path(dir_okay=False), help="Also write the plan here.")
def plan(config_path, overrides, target_memory, records, batches, resolutions, json_out):
    """Rank (batch, resolution) pairs that fit a memory budget."""
    from .planner import PlannerQuery, grid_search_plan, parse_memory, read_records

    pc = None
    if config_path:
        pc = _load_config(config_path, overrides).planner
    target = target_memory or (pc.target_memory if pc else None)
    if target is None:
        raise click.UsageError("--target-memory is required (or a config with a planner section)")
    try:
        target_bytes = parse_memory(target)
    except (ValueError, IndexError) as e:
        raise click.BadParameter(str(e), param_hint="--target-memory") from None
    rec_path = records or (pc.records if pc and pc.records else None) or sample_records_path()
    query = PlannerQuery(
        target_memory=target_bytes,
        candidate_batches=_ints(batches) if batches else (pc.batches if pc else (2, 4, 8, 16)),
        candidate_resolutions=_ints(resolutions) if resolutions else (pc.resolutions if pc else (224, 320, 448, 640)),
        records=read_records(rec_path),
    )
    result = grid_search_plan(query)
    click.echo(result.table())
    doc = result.as_dict()
    if json_out:
        Path(json_out).write_text(json.dumps(doc, indent=2, sort_keys=True))
    _echo_json(doc)
    if not result.feasible:
        raise RuntimeFailure("no configuration fits the memory budget")


@cli.command()
@config_option
@set_option
@click.option("--kind", type=click.Choice(["bn", "parts", "schedule"]), default="bn", show_default=True,
              help="bn: fine-tuning BN modes; parts: cumulative part loading; schedule: epoch grid.")
@click.option("--iou-type", type=click.Choice(["bbox", "segm"]), default="bbox", show_default=True)
def matrix(config_path, overrides, kind, iou_type):
    """Run an ablation matrix built from the config's pretrain and finetune phases."""
    from .config import to_train_config
    from .harness.matrix import bn_mode_cells, part_cells, run_experiment_matrix, schedule_cells

    cfg = _load_config(config_path, overrides)
    pre, ft = cfg.phase("pretrain"), cfg.phase("finetune")
    if pre.phase != "pretrain" or ft.phase != "finetune":
        raise ConfigError("matrix needs one pretrain and one finetune phase")
    out_dir = Path(cfg.output_root) / f"matrix-{kind}"
    pre_tc = to_train_config(cfg, pre)
    ft_tc = to_train_config(cfg, ft)
    pre_tc.output_dir = ft_tc.output_dir = None
    ft_tc.load = None
    builder = {"bn": bn_mode_cells, "parts": part_cells, "schedule": schedule_cells}[kind]
    cells = builder(pre_tc, ft_tc)
    with guarded(out_dir):
        report = run_experiment_matrix(cells, _dataset(cfg), _dataset(cfg, "val"), cfg.eval_resize(), iou_type)
        (out_dir / "report.txt").write_text(report.to_text() + "\n")
        (out_dir / "report.json").write_text(report.to_json())
    click.echo(report.to_text())
    if any(r.get("error") for r in report.rows):
        raise RuntimeFailure("some matrix cells failed; see report.json")


def run_command(argv=None):
    """Run the CLI and return its exit status instead of exiting."""
    try:
        cli.main(args=argv, prog_name="direct-pretrain", standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except ConfigError as e:
        click.echo("config error:", err=True)
        for line in e.errors:
            click.echo(f"  {line}", err=True)
        return EXIT_CONFIG
    except (DirectPretrainError, OSError, ValueError, RuntimeError) as e:
        log.debug("command failed", exc_info=True)
        click.echo(f"error: {e}", err=True)
        return EXIT_RUNTIME


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
