"""
Command-line entry point: synthetic data, training, evaluation, inference
and ablation grids
"""
import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import structlog
import torch

from fmnet import __version__
from fmnet.networks.baselines import bi_baseline
from fmnet.networks.network import build_network, count_parameters, predict
from fmnet.pipeline import analysis, data, metrics, training
from fmnet.utils.config import (
    config_snapshot,
    load_config_file,
    parse_set_flags,
    resolve_configs,
    settings,
)
from fmnet.utils.errors import FmnetError, InputError, UsageError
from fmnet.utils.logging import configure_logging

logger = structlog.get_logger()

ABLATION_COLUMNS = ["group", "variant", "seed", "rmse", "psnr", "sam", "ssim", "params"]
SUMMARY_COLUMNS = ["group", "variant", "seeds", "rmse", "psnr", "sam", "ssim", "params"]


class FmnetArgumentParser(argparse.ArgumentParser):
    """argparse reporting usage problems as UsageError instead of exiting"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


# ---------------------------------------------------------------------------
# synth-data
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if not 0.0 <= args.train_fraction <= 1.0:
        raise UsageError(f"--train-fraction must be in [0, 1], got {args.train_fraction}")
    srf = data.load_srf_csv(args.srf) if args.srf else None
    pairs = data.generate_synthetic_dataset(args.count, args.bands, args.size, args.seed, srf=srf)
    n_train = min(int(round(args.count * args.train_fraction)), args.count - 1)
    split = data.split_dataset([pair.id for pair in pairs], n_train, args.seed)
    data.write_dataset(pairs, split, args.out)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _resolve(args, dataset: data.Dataset, base: Optional[Dict[str, str]] = None, default_preset: str = "paper"):
    file_values: Dict[str, str] = {"bands": str(dataset.bands)}
    file_values.update(base or {})
    if getattr(args, "config", None):
        file_values.update(load_config_file(args.config))
    return resolve_configs(file_values, parse_set_flags(args.set or []), default_preset=default_preset)


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise InputError(f"data directory not found: {data_dir}")
    dataset = data.load_dataset(data_dir, threads=settings.threads)

    resume = training.load_checkpoint(args.resume) if args.resume else None
    base = config_snapshot(resume.network, resume.train) if resume else None
    network_config, train_config = _resolve(args, dataset, base)
    if network_config.bands != dataset.bands:
        raise InputError(f"network has {network_config.bands} bands, data has {dataset.bands}")

    if resume is not None:
        net = training.restore_network(resume, network_config)
    else:
        net = build_network(network_config, seed=train_config.seed)

    train_pairs = dataset.train_pairs()
    test_pairs = dataset.test_pairs() if args.monitor else None
    logger.info("Training", pairs=len(train_pairs), epochs=train_config.epochs, parameters=count_parameters(net))
    result = training.train(net, train_pairs, train_config, resume=resume, test_pairs=test_pairs)

    out = Path(args.out)
    training.save_checkpoint(result.checkpoint, out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    training.write_train_log(result.log, log_path, append=resume is not None)
    if args.monitor:
        training.write_curves(result.log, log_path.with_suffix(".curves.csv"), append=resume is not None)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _select_pairs(dataset: data.Dataset, split: str) -> List[data.SamplePair]:
    if split == "train":
        return dataset.train_pairs()
    if split == "all":
        return dataset.train_pairs() + dataset.test_pairs()
    return dataset.test_pairs()


def cmd_eval(args) -> int:
    checkpoint = training.load_checkpoint(args.ckpt)
    net = training.restore_network(checkpoint)
    dataset = data.load_dataset(args.data, threads=settings.threads)
    if dataset.bands != net.config.bands:
        raise InputError(f"checkpoint predicts {net.config.bands} bands, data has {dataset.bands}")
    pairs = _select_pairs(dataset, args.split)
    if not pairs:
        raise InputError(f"the {args.split} split of {args.data} is empty")

    ids = [pair.id for pair in pairs]
    gts = [pair.hsi for pair in pairs]
    report = metrics.evaluate_pairs([predict(net, pair.rgb) for pair in pairs], gts, ids)
    metrics.write_report_csv(report, args.report)
    logger.info("Evaluated", images=len(ids), rmse=report.rmse, psnr=report.psnr, sam=report.sam, ssim=report.ssim)

    if args.with_bi:
        order = net.config.channel_order
        bi_preds = [bi_baseline(pair.rgb, dataset.bands, order).numpy() for pair in pairs]
        bi_report = metrics.evaluate_pairs(bi_preds, gts, ids)
        report_path = Path(args.report)
        metrics.write_report_csv(bi_report, report_path.with_name(f"{report_path.stem}_bi{report_path.suffix}"))
        logger.info("Evaluated BI baseline", rmse=bi_report.rmse, psnr=bi_report.psnr)
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    if args.error_map is not None and not Path(args.error_map).is_file():
        raise UsageError(f"--error-map needs an existing ground-truth container, got {args.error_map!r}")
    checkpoint = training.load_checkpoint(args.ckpt)
    net = training.restore_network(checkpoint)
    rgb = data.load_hsi(args.rgb)
    if rgb.shape[0] != 3:
        raise InputError(f"{args.rgb} has {rgb.shape[0]} channels, expected 3")

    hsi = predict(net, rgb)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_hsi(hsi, out)

    if args.export_weights:
        analysis.export_weight_maps(net, rgb, args.export_weights)
    if args.error_map:
        analysis.export_error_map(hsi, data.load_hsi(args.error_map), out.with_name(f"{out.stem}_error.pgm"))
    if args.spectra:
        analysis.extract_spectra(hsi, analysis.parse_pixels(args.spectra), out.with_name(f"{out.stem}_spectra.csv"))
    logger.info("Inferred", rgb=args.rgb, out=str(out), shape=hsi.shape)
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

class AblationCell(NamedTuple):
    group: str
    variant: str
    seed: int
    overrides: Dict[str, str]
    data: str
    config: Optional[str]
    flags: List[str]
    out: str
    threads: int


def ablation_grid(
    seeds: int, n_values: Sequence[int], p_values: Sequence[int]
) -> List[tuple]:
    """(group, variant, seed, overrides) rows, variants major, seeds minor"""
    variants = [
        ("ingredients", "ours", {}),
        ("ingredients", "ours_wo_mix", {"mix_enabled": "false"}),
        ("ingredients", "ours_wo_fusion", {"fusion_enabled": "false"}),
    ]
    variants += [("n", f"n={n}", {"n": str(n), "kernels": ""}) for n in n_values]
    variants += [("p", f"p={p}", {"p": str(p)}) for p in p_values]
    return [(group, name, seed, overrides) for group, name, overrides in variants for seed in range(seeds)]


def run_ablation_cell(cell: AblationCell) -> Dict[str, object]:
    torch.set_num_threads(max(1, cell.threads))
    dataset = data.load_dataset(cell.data)
    base = {k: v for k, v in cell.overrides.items() if v != ""}
    flags = list(cell.flags) + [f"seed={cell.seed}"]
    file_values: Dict[str, str] = {"bands": str(dataset.bands)}
    if cell.config:
        file_values.update(load_config_file(cell.config))
    # kernels follow n unless the variant or the user pins them
    if "kernels" in cell.overrides:
        file_values.pop("kernels", None)
    file_values.update(base)
    network_config, train_config = resolve_configs(file_values, parse_set_flags(flags), default_preset="desk")

    net = build_network(network_config, seed=cell.seed)
    result = training.train(net, dataset.train_pairs(), train_config)
    pairs = dataset.test_pairs() or dataset.train_pairs()
    report = metrics.evaluate_pairs(
        [predict(net, pair.rgb) for pair in pairs], [pair.hsi for pair in pairs], [pair.id for pair in pairs]
    )
    training.save_checkpoint(result.checkpoint, Path(cell.out) / "cells" / f"{cell.variant}_seed{cell.seed}.ckpt")
    logger.info("Ablation cell finished", variant=cell.variant, seed=cell.seed, rmse=report.rmse)
    return {
        "group": cell.group, "variant": cell.variant, "seed": cell.seed,
        "rmse": report.rmse, "psnr": report.psnr, "sam": report.sam, "ssim": report.ssim,
        "params": count_parameters(net),
    }


def summarize_ablation(rows: Sequence[Dict[str, object]]) -> List[Dict[str, object]]:
    grouped: Dict[tuple, List[Dict[str, object]]] = {}
    for row in rows:
        grouped.setdefault((row["group"], row["variant"]), []).append(row)
    summary = []
    for (group, variant), members in grouped.items():
        entry: Dict[str, object] = {"group": group, "variant": variant, "seeds": len(members)}
        for key in ("rmse", "psnr", "sam", "ssim"):
            entry[key] = float(np.mean([m[key] for m in members]))
        entry["params"] = members[0]["params"]
        summary.append(entry)
    return summary


def _write_rows(rows: Sequence[Dict[str, object]], columns: Sequence[str], path: Path) -> Path:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise UsageError(f"--seeds must be >= 1, got {args.seeds}")
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise InputError(f"data directory not found: {data_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = max(1, min(args.jobs or settings.threads, settings.threads))
    per_job = max(1, settings.threads // jobs)
    cells = [
        AblationCell(group, variant, seed, overrides, str(data_dir), args.config, list(args.set or []), str(out), per_job)
        for group, variant, seed, overrides in ablation_grid(args.seeds, args.n_values, args.p_values)
    ]
    logger.info("Running ablation grid", cells=len(cells), jobs=jobs)
    if jobs == 1:
        rows = [run_ablation_cell(cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_ablation_cell, cells))

    _write_rows(rows, ABLATION_COLUMNS, out / "ablation.csv")
    _write_rows(summarize_ablation(rows), SUMMARY_COLUMNS, out / "ablation_summary.csv")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = FmnetArgumentParser(prog="fmnet", description="Spectral super-resolution with function-mixture networks")
    parser.add_argument("--version", action="version", version=f"fmnet {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=FmnetArgumentParser)

    synth = commands.add_parser("synth-data", help="Generate a synthetic HSI/RGB dataset")
    synth.add_argument("--count", type=int, default=30)
    synth.add_argument("--bands", type=int, default=31)
    synth.add_argument("--size", type=int, default=64)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--train-fraction", type=float, default=0.8)
    synth.add_argument("--srf", help="B×3 camera response CSV (default: synthetic Gaussians)")
    synth.add_argument("--out", required=True)
    synth.set_defaults(handler=cmd_synth_data)

    train = commands.add_parser("train", help="Train a network on a dataset directory")
    train.add_argument("--config")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--set", action="append", metavar="KEY=VALUE")
    train.add_argument("--resume", metavar="CKPT")
    train.add_argument("--log", metavar="CSV")
    train.add_argument("--monitor", action="store_true", help="Record test PSNR every epoch")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--report", required=True)
    evaluate.add_argument("--with-bi", action="store_true")
    evaluate.add_argument("--split", choices=["test", "train", "all"], default="test")
    evaluate.set_defaults(handler=cmd_eval)

    infer = commands.add_parser("infer", help="Reconstruct one RGB container")
    infer.add_argument("--ckpt", required=True)
    infer.add_argument("--rgb", required=True)
    infer.add_argument("--out", required=True)
    infer.add_argument("--export-weights", metavar="DIR")
    infer.add_argument("--error-map", metavar="GT")
    infer.add_argument("--spectra", metavar="ROW,COL;...")
    infer.set_defaults(handler=cmd_infer)

    ablate = commands.add_parser("ablate", help="Train and evaluate the ablation grid")
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--out", required=True)
    ablate.add_argument("--config")
    ablate.add_argument("--set", action="append", metavar="KEY=VALUE")
    ablate.add_argument("--seeds", type=int, default=3)
    ablate.add_argument("--n-values", type=_int_list, default=[1, 2, 3])
    ablate.add_argument("--p-values", type=_int_list, default=[2, 3])
    ablate.add_argument("--jobs", type=int)
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging(settings.log_level, settings.log_json)
    torch.set_num_threads(settings.threads)
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logger.info("Command started", command=command)
        code = args.handler(args)
        logger.info("Command finished", command=command)
        return code
    except FmnetError as e:
        logger.error("Command failed", command=command, error=str(e), exit_code=e.exit_code)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
