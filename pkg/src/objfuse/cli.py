"""Command-line entry point: synthesize, batch, report and sweep."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from .core.harmony import HarmonyConfig
from .engine.attention import InjectionOrientation
from .errors import ObjfuseError
from .noise.optimizer import BalanceConfig
from .settings import settings

logger = logging.getLogger("objfuse")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _float_list(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got {value!r}") from None


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got {value!r}") from None


def _add_tuning_args(parser: argparse.ArgumentParser) -> None:
    score = parser.add_argument_group("harmony score and search")
    score.add_argument("--k", type=float, default=2.3, help="Scale ratio between image and text similarity")
    score.add_argument("--beta", type=float, default=1.0, help="Weight of the imbalance penalty")
    score.add_argument("--alpha-min", type=float, default=0.0)
    score.add_argument("--alpha-max", type=float, default=2.0)
    score.add_argument("--alpha-tol", type=float, default=0.1)
    score.add_argument("--isim-min", type=float, default=0.45)
    score.add_argument("--isim-max", type=float, default=0.85)

    noise = parser.add_argument_group("noise optimizer")
    noise.add_argument("--lambda", dest="lambda_ratio", type=float, default=125.0, help="Target ratio L_r / L_n")
    noise.add_argument("--step-size", type=float, default=0.1)
    noise.add_argument("--max-inner-iters", type=int, default=50)
    noise.add_argument("--no-balance", action="store_true", help="Keep the recorded inversion noise (ablation)")

    run = parser.add_argument_group("run")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--steps", type=int, default=4, help="Denoising steps T")
    run.add_argument("--max-adjust-iters", type=int, default=None, help="Injection probes, default T // 2")
    run.add_argument("--renoise-iters", type=int, default=0, help="Extra denoiser evaluations per noise-addition step")
    run.add_argument(
        "--orientation",
        choices=[o.value for o in InjectionOrientation],
        default=InjectionOrientation.FIRST_STEPS.value,
    )
    run.add_argument("--backend", choices=["sdxl", "toy"], default="sdxl")
    run.add_argument("--perception", choices=["models", "remote", "mock"], default="models")
    run.add_argument("--fixed-alpha", type=float, default=None, help="Skip the alpha search")
    run.add_argument("--fixed-i", type=int, default=None, help="Skip the injection-step controller")
    run.add_argument("--fusion-template", action="store_true", help="Condition on the fusion prompt template")
    run.add_argument("--method", default="objfuse", help="Method name recorded in reports")
    run.add_argument("--out", type=Path, default=settings.OUTPUT_DIR)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objfuse", description="Fuse an object image with an object text.")
    parser.add_argument("--log-level", default=None, help=f"Logging level (default {settings.LOG_LEVEL})")
    commands = parser.add_subparsers(dest="command", required=True)

    synthesize = commands.add_parser("synthesize", help="Fuse one image with one text")
    synthesize.add_argument("--image", type=Path, required=True)
    synthesize.add_argument("--text", default="", help="Object text (empty reconstructs the image)")
    synthesize.add_argument("--image-label", default=None, help="Object class of the image for --fusion-template")
    _add_tuning_args(synthesize)

    batch = commands.add_parser("batch", help="Run every pair of a dataset manifest")
    batch.add_argument("--manifest", type=Path, required=True)
    batch.add_argument("--subsample", type=int, default=None)
    batch.add_argument("--workers", type=int, default=None)
    batch.add_argument("--no-verify-files", action="store_true", help="Skip the image file existence check")
    _add_tuning_args(batch)

    report = commands.add_parser("report", help="Aggregate run reports into metric tables")
    report.add_argument("--runs", type=Path, required=True)
    report.add_argument("--k", type=float, default=2.3)
    report.add_argument("--beta", type=float, default=1.0)
    report.add_argument("--traces", action="store_true", help="Write alpha search traces as CSV")
    report.add_argument("--compare", default=None, metavar="REFERENCE", help="Kruskal-Wallis against this method")
    report.add_argument("--exact", action="store_true", help="Permutation p-values for small groups")

    sweep = commands.add_parser("sweep", help="Score a grid of alpha, injection-step or lambda values")
    sweep.add_argument("--image", type=Path, required=True)
    sweep.add_argument("--text", required=True)
    sweep.add_argument("--image-label", default=None)
    grid = sweep.add_mutually_exclusive_group(required=True)
    grid.add_argument("--alphas", type=_float_list)
    grid.add_argument("--inject-steps", type=_int_list)
    grid.add_argument("--lambdas", type=_float_list, help="Noise-balance ratios, scoring reconstruction and an edit")
    _add_tuning_args(sweep)

    return parser


def _run_config(args: argparse.Namespace, image: Path, text: str):
    from .pipeline.config import RunConfig

    return RunConfig(
        image_path=image,
        text_prompt=text,
        image_label=getattr(args, "image_label", None),
        seed=args.seed,
        harmony=HarmonyConfig(
            k=args.k,
            beta_weight=args.beta,
            alpha_min=args.alpha_min,
            alpha_max=args.alpha_max,
            alpha_tol=args.alpha_tol,
            isim_min=args.isim_min,
            isim_max=args.isim_max,
        ),
        balance=BalanceConfig(
            lambda_ratio=args.lambda_ratio,
            step_size=args.step_size,
            max_inner_iters=args.max_inner_iters,
        ),
        balance_noise=not args.no_balance,
        backend=args.backend,
        perception=args.perception,
        num_steps=args.steps,
        max_adjust_iters=args.max_adjust_iters,
        renoise_iters=args.renoise_iters,
        orientation=InjectionOrientation(args.orientation),
        fixed_alpha=args.fixed_alpha,
        fixed_inject_step=args.fixed_i,
        fusion_template=args.fusion_template,
        output_dir=args.out,
        method=args.method,
    )


def cmd_synthesize(args: argparse.Namespace) -> int:
    from .pipeline.runner import build_pipeline

    config = _run_config(args, args.image, args.text)
    report = build_pipeline(config).run_synthesis(config)
    print(report.model_dump_json(indent=2))
    return EXIT_OK if report.status == "ok" else EXIT_FAILED


def cmd_batch(args: argparse.Namespace) -> int:
    from .pipeline.batch import run_batch
    from .pipeline.manifest import load_manifest
    from .pipeline.runner import build_pipeline

    manifest = load_manifest(args.manifest, verify_files=not args.no_verify_files)
    # Placeholder pair; run_batch fills image and text per pair
    first_image, _ = manifest.pairs()[0]
    template = _run_config(args, manifest.image_path(first_image), "")
    result = run_batch(build_pipeline(template), manifest, template, subsample=args.subsample, workers=args.workers)
    if result.table is not None:
        print(result.table.to_text())
    print(f"{len(result.reports) - len(result.failed)}/{len(result.reports)} pairs succeeded")
    return EXIT_OK if not result.failed else EXIT_FAILED


def cmd_report(args: argparse.Namespace) -> int:
    import pandas as pd

    from .evaluation.metrics import aggregate_metrics, alpha_trace_frame, compare_methods, comparison_text
    from .pipeline.storage import load_reports, write_json_atomic

    reports = load_reports(args.runs)
    table = aggregate_metrics(reports, HarmonyConfig(k=args.k, beta_weight=args.beta))
    payload = table.to_dict()
    text = table.to_text()

    if args.compare:
        comparison = compare_methods(table, args.compare, exact=args.exact)
        payload["comparison"] = {"reference": args.compare, "rows": comparison.to_dict(orient="records")}
        text += "\n\nKruskal-Wallis H (p) vs " + args.compare + "\n" + comparison_text(comparison)

    write_json_atomic(args.runs / "aggregate.json", payload)
    (args.runs / "aggregate.txt").write_text(text + "\n", encoding="utf-8")

    if args.traces:
        traced = [alpha_trace_frame(r) for r in reports if r.search_trace]
        if traced:
            pd.concat(traced, ignore_index=True).to_csv(args.runs / "alpha_traces.csv", index=False)
            logger.info(f"Wrote {len(traced)} alpha traces to {args.runs / 'alpha_traces.csv'}")

    print(text)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    from .pipeline.runner import build_pipeline

    config = _run_config(args, args.image, args.text)
    pipeline = build_pipeline(config)
    if args.alphas is not None:
        frame = pipeline.sweep_alpha(config, args.alphas, args.fixed_i)
        name = "sweep_alpha.csv"
    elif args.inject_steps is not None:
        frame = pipeline.sweep_inject(config, args.inject_steps, args.fixed_alpha)
        name = "sweep_inject.csv"
    else:
        frame = pipeline.sweep_lambda(config, args.lambdas, args.fixed_alpha, args.fixed_i)
        name = "sweep_lambda.csv"
    out_path = Path(args.out) / config.resolved_run_id() / name
    out_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_path, index=False)
    print(frame.to_string(index=False, float_format=lambda x: f"{x:.4f}"))
    logger.info(f"Sweep written to {out_path}")
    return EXIT_OK


COMMANDS = {
    "synthesize": cmd_synthesize,
    "batch": cmd_batch,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"Invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ObjfuseError, FileNotFoundError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
