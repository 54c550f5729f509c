"""
Command-line interface for the CIR toolkit.

    python cli.py analyze  --arch ciresnet22 --input 127
    python cli.py lint     --arch ciresnet22 --exemplar 127
    python cli.py params   --arch ciresnet43
    python cli.py flops    --arch ciresnet22 --convention search
    python cli.py init     --arch ciresnet22 --seed 0 --output w.cirw
    python cli.py forward  --arch ciresnet22 --weights w.cirw --tensor x.cirt --output y.cirt
    python cli.py track    --arch ciresnet22 --seed 0 --log track.tsv
    python cli.py bias-exp --trials 200 --threads 8
    python cli.py dump-arch --arch ciresnet22

Exit codes: 0 success, 1 runtime error or failed lint, 2 usage error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from analyzer_engine import (
    MAC_CONVENTIONS, ArchitectureAnalyzer, GuidelineConfig, compute_geometry,
    count_macs, count_params, macs_for_convention, render_text, render_tsv, write_excel,
)
from architectures import BUILTIN_ARCHITECTURES, build_architecture
from bias_experiment import BiasExperimentConfig, run_bias_experiment, trials_frame
from cir_errors import CIRError
from layer_graph import (
    Graph, dump_architecture, forward, init_random, load_architecture_file,
    load_weights, save_weights,
)
from matching_engine import SiameseModel, SiameseTracker, TrackerConfig, track_log_frame, write_track_log
from synth_data import MOTION_MODES, SequenceConfig, evaluate, generate, load_sequence, save_sequence
from tensor_kernels import load_tensor, save_tensor

logger = logging.getLogger("cir")


def _load_graph(args: argparse.Namespace) -> Graph:
    """Builtin name (with ablation options) or an architecture text file."""
    path = Path(args.arch)
    if args.arch not in BUILTIN_ARCHITECTURES and path.exists():
        return load_architecture_file(path)
    return build_architecture(
        args.arch,
        stem_padding=args.stem_padding,
        last_kernel=args.last_kernel,
        extra_downsample=args.extra_downsample,
        down_unit=args.down_unit,
    )


def _with_weights(graph: Graph, args: argparse.Namespace) -> Graph:
    if getattr(args, "weights", None):
        return load_weights(graph, args.weights)
    return init_random(graph, args.seed)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_analyze(args: argparse.Namespace) -> int:
    graph = _load_graph(args)
    geometry = compute_geometry(graph, args.input)
    if args.format == "tsv":
        sys.stdout.write(render_tsv(geometry))
    else:
        sys.stdout.write(render_text(graph, geometry, args.input))
    if args.excel:
        write_excel(args.excel, [graph], args.input)
    return 0


def cmd_lint(args: argparse.Namespace) -> int:
    graph = _load_graph(args)
    report = ArchitectureAnalyzer(GuidelineConfig(exemplar_size=args.exemplar)).check_guidelines(graph)
    if args.format == "tsv":
        print("guideline\tpassed\tmessage")
        for check in report.checks:
            print(f"{check.name}\t{int(check.passed)}\t{check.message}")
    else:
        print(report.summary())
    return 0 if report.passed else 1


def cmd_params(args: argparse.Namespace) -> int:
    graph = _load_graph(args)
    total = count_params(graph, include_buffers=args.buffers)
    if args.format == "tsv":
        print(f"{graph.name}\t{total}")
    else:
        print(f"{graph.name}: {total} parameters ({total / 1e6:.3f} M)")
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    analyzer = ArchitectureAnalyzer()
    if args.calibrate:
        calibration = analyzer.calibrate_mac_convention()
        if args.format == "tsv":
            print("convention\tarchitecture\tmacs\treference\trelative_error")
            for conv, per_arch in calibration.errors.items():
                for arch, err in per_arch.items():
                    print(f"{conv}\t{arch}\t{calibration.macs[conv][arch]}\t"
                          f"{calibration.reference[arch]:.0f}\t{err:.5f}")
        else:
            print(calibration.summary())
        return 0
    graph = _load_graph(args)
    if args.input is not None:
        macs, label = count_macs(graph, args.input), f"input {args.input}"
    else:
        macs, label = macs_for_convention(graph, args.convention), f"convention {args.convention}"
    if args.format == "tsv":
        print(f"{graph.name}\t{macs}")
    else:
        print(f"{graph.name}: {macs} multiply-adds ({macs / 1e9:.3f} G, {label})")
    return 0


def cmd_init(args: argparse.Namespace) -> int:
    graph = init_random(_load_graph(args), args.seed, mode=args.mode)
    save_weights(graph, args.output)
    print(f"wrote {len(graph.weights)} arrays to {args.output}")
    return 0


def cmd_forward(args: argparse.Namespace) -> int:
    graph = _with_weights(_load_graph(args), args)
    output = forward(graph, load_tensor(args.tensor))
    save_tensor(args.output, output)
    print(f"{graph.name}: output {'x'.join(str(d) for d in output.shape)} -> {args.output}")
    return 0


def cmd_track(args: argparse.Namespace) -> int:
    graph = _with_weights(_load_graph(args), args)
    config = TrackerConfig(cosine_window=args.cosine_window,
                           response_upsample=args.upsample, bias=args.bias)
    model = SiameseModel(graph, config)
    if args.sequence:
        sequence = load_sequence(args.sequence)
    else:
        sequence = generate(args.seed, SequenceConfig(
            frame_size=(args.frame_size, args.frame_size),
            target_size=(args.target_size, args.target_size),
            num_frames=args.frames, channels=model.in_channels,
            motion=args.motion, velocity=tuple(args.velocity),
        ))
    if args.save_sequence:
        save_sequence(sequence, args.save_sequence)

    log = SiameseTracker(model, config).track_sequence(sequence.frames, sequence.ground_truth[0])
    if args.log:
        write_track_log(log, args.log)
    if args.format == "tsv":
        sys.stdout.write(track_log_frame(log).to_csv(sep="\t", header=False, index=False,
                                                     float_format="%.4f"))
    else:
        print(evaluate(log, sequence.ground_truth).summary())
    return 0


def cmd_bias_exp(args: argparse.Namespace) -> int:
    config = BiasExperimentConfig(
        cir_arch=args.cir_arch, padded_arch=args.padded_arch, trials=args.trials,
        base_seed=args.seed, num_frames=args.frames, workers=args.threads,
    )
    summary = run_bias_experiment(config)
    if args.format == "tsv":
        sys.stdout.write(trials_frame(summary).to_csv(sep="\t", index=False))
    else:
        print(summary.summary())
    return 0


def cmd_dump_arch(args: argparse.Namespace) -> int:
    text = dump_architecture(_load_graph(args))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_arch_options(parser: argparse.ArgumentParser, required: bool) -> None:
    parser.add_argument("--arch", required=required, default=None,
                        help=f"builtin ({', '.join(BUILTIN_ARCHITECTURES)}) or architecture file")
    parser.add_argument("--stem-padding", type=int, default=3)
    parser.add_argument("--last-kernel", type=int, default=None)
    parser.add_argument("--extra-downsample", action="store_true")
    parser.add_argument("--down-unit", default="cir-d",
                        choices=("cir-d", "residual-down", "residual-down-crop"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "tsv"), default="text")

    arch = argparse.ArgumentParser(add_help=False)
    _add_arch_options(arch, required=True)

    parser = argparse.ArgumentParser(prog="cir", description="CIR backbone toolkit")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common, arch], help="geometry report")
    p.add_argument("--input", type=int, default=127)
    p.add_argument("--excel", default=None, help="also write an .xlsx workbook")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("lint", parents=[common, arch], help="design-guideline check")
    p.add_argument("--exemplar", type=int, default=127)
    p.set_defaults(func=cmd_lint)

    p = sub.add_parser("params", parents=[common, arch], help="parameter count")
    p.add_argument("--buffers", action="store_true", help="include running statistics")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", parents=[common], help="multiply-add count")
    _add_arch_options(p, required=False)
    p.add_argument("--input", type=int, default=None)
    p.add_argument("--convention", choices=MAC_CONVENTIONS, default="search")
    p.add_argument("--calibrate", action="store_true",
                   help="print the input-size calibration table")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("init", parents=[common, arch], help="write seeded weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("uniform", "positive"), default="uniform")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("forward", parents=[common, arch], help="run a graph on a tensor file")
    p.add_argument("--tensor", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("track", parents=[common, arch], help="track a synthetic or stored sequence")
    p.add_argument("--weights", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequence", default=None, help="stored sequence directory")
    p.add_argument("--save-sequence", default=None)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--frame-size", type=int, default=384)
    p.add_argument("--target-size", type=int, default=48)
    p.add_argument("--motion", choices=MOTION_MODES, default="static")
    p.add_argument("--velocity", type=int, nargs=2, default=(0, 0), metavar=("DX", "DY"))
    p.add_argument("--cosine-window", action="store_true")
    p.add_argument("--upsample", type=int, default=1)
    p.add_argument("--bias", type=float, default=0.0)
    p.add_argument("--log", default=None, help="tracking log path (TSV)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("bias-exp", parents=[common], help="paired boundary-bias experiment")
    p.add_argument("--cir-arch", default="ciresnet22")
    p.add_argument("--padded-arch", default="resnet22-padded")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="defaults to $CIR_THREADS")
    p.set_defaults(func=cmd_bias_exp)

    p = sub.add_parser("dump-arch", parents=[common, arch], help="export the architecture text")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_dump_arch)

    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "flops" and not args.calibrate and not args.arch:
        parser.print_usage(sys.stderr)
        print("cir flops: error: --arch is required unless --calibrate is given", file=sys.stderr)
        return 2
    _configure_logging(args)
    logger.debug("running %s", args.command)
    try:
        return args.func(args)
    except CIRError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"[io] {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
