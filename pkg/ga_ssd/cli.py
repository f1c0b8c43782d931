import math
import os
from typing import List, Optional, Sequence

import click
from rich.table import Table

from .ablation import MODES, ablation_table, run_ablation
from .config import TrainConfig, load_json
from .detector import detect_volume
from .errors import DataError, GaSsdError
from .evaluation import (
    FP_RATES,
    build_report,
    rate_key,
    read_detections,
    write_detections,
    write_froc_csv,
    write_report,
)
from .gradcheck import TOLERANCE, run_suite
from .model import GASSD
from .phantom import SynthSpec, load_dataset, load_volume, read_annotations, read_scan_index, write_dataset
from .settings import Settings, configure_logging, console, err_console, load_settings
from .trainer import evaluate, train


def _settings(ctx: click.Context) -> Settings:
    return ctx.find_root().obj


def _parse_spacing(text: str):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise click.BadParameter(f"expected three comma-separated numbers, got {text!r}") from None
    if len(values) != 3:
        raise click.BadParameter(f"expected three comma-separated numbers, got {text!r}")
    return values


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def _print_report(report, curve) -> None:
    table = Table(title="FROC")
    table.add_column("FP / scan", justify="right")
    table.add_column("Sensitivity", justify="right")
    for rate in FP_RATES:
        table.add_row(rate_key(rate), _fmt(report.sensitivities_at[rate_key(rate)]))
    console.print(table)

    if report.per_category:
        cats = Table(title=f"Sensitivity by category (threshold {report.reporting_threshold:g})")
        cats.add_column("Category")
        cats.add_column("Sensitivity", justify="right")
        for bucket, value in report.per_category.items():
            cats.add_row(bucket, _fmt(value))
        console.print(cats)
    console.print(
        f"CPM: [bold]{report.cpm:.4f}[/bold]  FP/TP: {_fmt(report.fp_tp_ratio)}  "
        f"({report.n_nodules} nodules, {report.n_scans} scans, {len(curve)} operating points)"
    )


@click.group(invoke_without_command=True, no_args_is_help=False)
@click.option("--single-thread", is_flag=True, help="Run everything serially for bit-exact comparisons")
@click.option("--log-level", default=None, help="Overrides GA_SSD_LOG_LEVEL")
@click.pass_context
def main(ctx: click.Context, single_thread: bool, log_level: Optional[str]):
    """GA-SSD pulmonary nodule detector"""
    settings = load_settings()
    if single_thread:
        settings.single_thread = True
    configure_logging(log_level.upper() if log_level else settings.log_level)
    ctx.obj = settings
    if ctx.invoked_subcommand is None:
        raise click.UsageError("missing command", ctx)


@main.command()
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), default=None, help="SynthSpec JSON")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def synth(spec_path: Optional[str], out_dir: str):
    """Generate a synthetic dataset"""
    spec = load_json(spec_path, SynthSpec) if spec_path else SynthSpec()
    scan_ids = write_dataset(spec, out_dir)
    console.print(f"[green]Wrote {len(scan_ids)} volumes to {out_dir}[/green]")


@main.command(name="train")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--data-dir", default=None, help="Overrides data_dir from the config")
@click.pass_context
def train_cmd(ctx: click.Context, config_path: str, data_dir: Optional[str]):
    """Train and evaluate on the held-out split"""
    settings = _settings(ctx)
    cfg = load_json(config_path, TrainConfig, defaults={"dtype": settings.dtype})
    if data_dir:
        cfg.data_dir = data_dir
    dataset = load_dataset(cfg.data_dir)
    result = train(cfg, dataset=dataset, max_workers=settings.max_workers)
    losses = result.epoch_losses()
    console.print(
        f"[green]Trained {len(losses)} epochs[/green] (loss {losses[0]:.4f} -> {losses[-1]:.4f}), "
        f"checkpoint in {cfg.checkpoint_dir}"
    )
    report, curve = evaluate(
        result.model, dataset.subset(result.test_scans),
        out_dir=os.path.join(cfg.checkpoint_dir, "eval"), max_workers=settings.max_workers,
    )
    _print_report(report, curve)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(file_okay=False))
@click.option("--volume", "volume_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def detect(ctx: click.Context, checkpoint: str, volume_path: str, out_path: str):
    """Detect nodules in one volume"""
    model = GASSD.load(checkpoint)
    volume = load_volume(volume_path)
    detections = detect_volume(model, volume, max_workers=_settings(ctx).max_workers)
    write_detections(out_path, detections)
    above = sum(d.prob >= model.cfg.head.report_threshold for d in detections)
    console.print(f"{len(detections)} detections ({above} above {model.cfg.head.report_threshold:g}) -> {out_path}")


def _known_scans(annotations, detections, n_scans: int, data_dir: Optional[str]) -> List[str]:
    """Scans a report may reference: the data-dir index, or every named scan within --scans."""
    if data_dir:
        known = read_scan_index(data_dir)
        stray = sorted({a.scan_id for a in annotations} - set(known))
        if stray:
            raise DataError(f"annotations reference scans missing from {data_dir}: {', '.join(stray)}")
        return known
    named = sorted({a.scan_id for a in annotations} | {d.scan_id for d in detections})
    if len(named) > n_scans:
        raise DataError(f"detections and annotations name {len(named)} scans but --scans is {n_scans}")
    return named


@main.command(name="eval")
@click.option("--detections", "detections_path", required=True, type=click.Path(dir_okay=False))
@click.option("--annotations", "annotations_path", required=True, type=click.Path(dir_okay=False))
@click.option("--scans", "n_scans", required=True, type=click.IntRange(min=1))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--threshold", type=click.FloatRange(0.0, 1.0), default=0.5, help="Reporting threshold")
@click.option("--spacing", default="1.25,0.7,0.7", help="Voxel spacing z,y,x in mm")
@click.option("--data-dir", default=None, help="Dataset directory: its index lists the scans, its headers give spacing")
def eval_cmd(detections_path, annotations_path, n_scans, out_dir, threshold, spacing, data_dir):
    """FROC / CPM report from detection and annotation CSVs"""
    detections = read_detections(detections_path)
    annotations = read_annotations(annotations_path)
    spacings = _parse_spacing(spacing)
    scan_ids = _known_scans(annotations, detections, n_scans, data_dir)
    if data_dir:
        spacings = {sid: load_volume(os.path.join(data_dir, sid)).spacing_mm for sid in scan_ids}
    report, curve = build_report(detections, annotations, n_scans, threshold, spacings, scan_ids=scan_ids)
    write_froc_csv(os.path.join(out_dir, "froc.csv"), curve)
    write_report(os.path.join(out_dir, "report.json"), report)
    _print_report(report, curve)


@main.command()
@click.option("--mode", required=True, type=click.Choice(MODES))
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
@click.pass_context
def ablate(ctx: click.Context, mode: str, config_path: str, out_path: Optional[str]):
    """Run an ablation grid"""
    cfg = load_json(config_path, TrainConfig, defaults={"dtype": _settings(ctx).dtype})
    out_path = out_path or os.path.join(cfg.checkpoint_dir, f"ablation_{mode}.csv")
    rows = run_ablation(mode, cfg, out_path=out_path, max_workers=_settings(ctx).max_workers)
    console.print(ablation_table(mode, rows))
    console.print(f"[green]Wrote {out_path}[/green]")


@main.command()
@click.option("--instances", type=click.IntRange(min=1), default=5)
@click.option("--seed", type=int, default=0)
def gradcheck(instances: int, seed: int):
    """Finite-difference check of every differentiable op"""
    results = run_suite(instances=instances, seed=seed)
    table = Table(title="Gradient checks")
    table.add_column("Operation")
    table.add_column("Worst rel. error", justify="right")
    table.add_column("Status")
    worst = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    for name, err in worst.items():
        table.add_row(name, f"{err:.2e}", "[green]ok[/green]" if err <= TOLERANCE else "[red]FAIL[/red]")
    console.print(table)
    failed = sorted({r.name for r in results if not r.passed})
    if failed:
        raise GaSsdError(f"gradient check failed for: {', '.join(failed)}")


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line; 0 on success, 1 on usage errors, 2 on runtime failures."""
    try:
        rv = main.main(args=list(argv) if argv is not None else None, prog_name="ga-ssd", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        err_console.print("Aborted")
        return 1
    except GaSsdError as e:
        err_console.print(f"[red]error:[/red] {e}")
        return 2
    except click.ClickException as e:
        e.show()
        return 2
    return rv if isinstance(rv, int) else 0
