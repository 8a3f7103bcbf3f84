"""
Command Line Interface
simulate | estimate-noise | pipeline | evaluate | plot-noise | config
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger
from rich.console import Console
from rich.table import Table

from .cfa_io import CfaImage, cfa_to_quad, read_cfa_sequence, read_sequence, write_sequence
from .config import PipelineConfig, dump_config, load_config
from .errors import ChainError, ConfigError
from .harness import EvalReport, evaluate, plot_noise_curve, simulate
from .imgseq import Sequence
from .noise_model import NoiseEstimator, observations_to_csv
from .orchestrator import ChainOrchestrator, run_pipeline

console = Console(stderr=True)


def configure_logging(verbose: bool) -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO",
               format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}")


def _cfa_frames(cfa_seq: List[CfaImage]) -> Sequence:
    return Sequence(tuple(cfa.img for cfa in cfa_seq))


def _pattern(args: argparse.Namespace, cfg: PipelineConfig):
    pattern = args.pattern or cfg.pattern
    if pattern is None:
        raise ConfigError("Bayer pattern is required: pass --pattern or set [pipeline] pattern")
    return pattern


def _white_level(args: argparse.Namespace, cfg: PipelineConfig) -> Optional[float]:
    return args.white_level if args.white_level is not None else cfg.white_level


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    pattern = _pattern(args, cfg)
    clean = read_sequence(args.input, _white_level(args, cfg))
    cfa_seq = simulate(clean, pattern, args.sigma, args.seed)
    bitdepth = 16 if clean.range_hint > 255 else 8
    # noisy samples are clipped into the storage range on write
    paths = write_sequence(args.out, _cfa_frames(cfa_seq), bitdepth=bitdepth)
    logger.success(f"Wrote {len(paths)} CFA frames to {args.out}")
    return 0


def cmd_estimate_noise(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    cfa_seq = read_cfa_sequence(args.input, _pattern(args, cfg), _white_level(args, cfg))
    quads = Sequence(tuple(cfa_to_quad(cfa).img for cfa in cfa_seq))
    model, observations = NoiseEstimator(args.bins).estimate(quads)
    model.save(args.out)
    if args.csv:
        observations_to_csv(observations, args.csv)

    table = Table(title="Noise model")
    for column in ("channel", "slope1", "intercept1", "slope2", "intercept2", "breakpoint"):
        table.add_column(column, justify="right")
    for ch, m in enumerate(model.channels):
        table.add_row(str(ch), f"{m.slope1:.4f}", f"{m.intercept1:.3f}", f"{m.slope2:.4f}",
                      f"{m.intercept2:.3f}", f"{m.breakpoint:.1f}")
    console.print(table)
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    cfa_seq = read_cfa_sequence(args.input, _pattern(args, cfg), _white_level(args, cfg))
    dump_dir = Path(args.out) / "intermediates" if args.dump_intermediates else None
    output = run_pipeline(cfa_seq, cfg, dump_dir=dump_dir)
    bitdepth = 16 if cfa_seq[0].img.range_hint > 255 else 8
    write_sequence(args.out, output, bitdepth=bitdepth)
    logger.success(f"Wrote {len(output)} frames to {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    truth = read_sequence(args.truth)
    results = {Path(d).name: read_sequence(d) for d in args.variants}
    report = evaluate(results, truth, name=args.name or Path(args.truth).name)
    if args.append and Path(args.out).exists():
        report = EvalReport.combine([EvalReport.from_csv(args.out), report])
    report.to_csv(args.out)

    frame = report.to_frame()
    table = Table(title="Central-frame RMSE")
    table.add_column("sequence")
    for column in frame.columns:
        table.add_column(str(column), justify="right")
    for name, row in frame.iterrows():
        table.add_row(str(name), *(f"{v:.2f}" for v in row))
    console.print(table)
    return 0


def cmd_plot_noise(args: argparse.Namespace) -> int:
    plot_noise_curve(args.csv, args.out)
    logger.success(f"Noise curve written to {args.out}")
    return 0


def cmd_config(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    if args.dump:
        print(dump_config(cfg))
        return 0

    table = Table(title="Effective configuration")
    table.add_column("setting")
    table.add_column("value")
    table.add_row("pattern", cfg.pattern.value if cfg.pattern else "(unset)")
    table.add_row("white_level", f"{cfg.white_level:g}" if cfg.white_level else "(container maximum)")
    table.add_row("noise", cfg.noise.mode if cfg.noise.mode == "auto" else f"fixed, sigma={cfg.noise.sigma:g}")
    for stage, status in ChainOrchestrator(cfg).get_stage_status().items():
        table.add_row(stage, status)
    console.print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfachain", description="CFA denoising and demosaicking chain")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="mosaic clean frames and add Gaussian noise")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=5.0)
    p.add_argument("--pattern")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--white-level", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate-noise", help="fit the per-channel noise curve of CFA frames")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--csv")
    p.add_argument("--pattern")
    p.add_argument("--white-level", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_estimate_noise)

    p = sub.add_parser("pipeline", help="run the enabled stages on CFA frames")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--pattern")
    p.add_argument("--white-level", type=float, help="sensor saturation level, e.g. 4095")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--dump-intermediates", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("evaluate", help="central-frame RMSE of result sequences")
    p.add_argument("--variants", nargs="+", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.add_argument("--append", action="store_true", help="add a row to an existing report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-noise", help="render a noise curve CSV to PNG")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_noise)

    p = sub.add_parser("config", help="print the effective configuration")
    p.add_argument("--dump", action="store_true", help="print as an INI file load_config reads back")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except (ChainError, OSError, KeyError) as e:
        message = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        print(f"error: {message}", file=sys.stderr)
        return 1
