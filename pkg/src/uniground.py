"""
uniground - training-free 3D visual grounding over RGB-D scenes.

Stage 1 parses a scene into object instances and ranks them against the
query by embedding similarity; Stage 2 renders the best candidates and lets
a vision-language model pick the target through a fixed turn protocol.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import UTC, datetime
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from .config import PipelineConfig, load_config
from .evaluation import ablate_candidates, ablate_prompts, evaluate, write_report
from .exceptions import (
    InputError,
    OutputError,
    ProviderError,
    SynthesisError,
    UnigroundError,
)
from .mock_providers import DegradedVlm, NoisyEmbeddingProvider
from .models import SyntheticSpec
from .pipeline import GroundingPipeline, Providers, build_providers, parse_query
from .reasoner import trace_summary
from .scene_model import fit_aabb, load_scene
from .synth import synth_scene, synth_suite

__version__ = "0.1.0"
_SCHEMA_VERSION = "1.0.0"

logger = logging.getLogger(__name__)


def setup_logging(verbosity: int = 0, quiet: bool = False, json_format: bool = False) -> None:
    """Configure logging based on verbosity level.

    Args:
        verbosity: 0=WARNING, 1=INFO, 2=DEBUG
        quiet: If True, suppress all output except errors
        json_format: If True, output JSON lines for pipeline consumption
    """
    if quiet:
        level = logging.ERROR
    else:
        level = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}.get(
            verbosity, logging.DEBUG
        )

    if json_format:
        format_str = (
            '{"time":"%(asctime)s","level":"%(levelname)s",'
            '"module":"%(module)s","message":"%(message)s"}'
        )
    else:
        format_str = "%(levelname)s: %(message)s"

    logging.basicConfig(level=level, format=format_str, force=True)


def write_output(data: dict[str, Any], output_file: str | None) -> None:
    """Write a result document with metadata to a file, or stdout when none is given.

    Raises:
        OutputError: If the file cannot be written.
    """
    output = {
        "_schema_version": _SCHEMA_VERSION,
        "_generated_at": datetime.now(UTC).isoformat().replace("+00:00", "Z"),
        "_generator": f"uniground/{__version__}",
        **data,
    }
    text = json.dumps(output, indent=2, ensure_ascii=False)
    if output_file is None:
        print(text)
        return
    try:
        Path(output_file).write_text(text + "\n", encoding="utf-8")
        logger.info("Output written to %s", output_file)
    except OSError as e:
        raise OutputError(f"Failed to write output file: {e}") from e


def _scene_dir(path: str) -> Path:
    root = Path(path)
    if not root.exists():
        raise InputError(f"Directory not found: {path}")
    if not root.is_dir():
        raise InputError(f"Not a directory: {path}")
    return root


def _config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config)
    update: dict[str, Any] = {}
    if args.workers is not None:
        update["workers"] = args.workers
    providers = getattr(args, "providers", None)
    if providers is not None:
        update["providers"] = config.providers.model_copy(update={"kind": providers})
    return config.model_copy(update=update) if update else config


# ------------------------------------------------------------- commands


def cmd_ingest(args: argparse.Namespace, config: PipelineConfig) -> int:
    scene = load_scene(_scene_dir(args.directory), config.workers)
    bounds = fit_aabb(scene.cloud.positions) if scene.cloud.point_count else None
    sizes = sorted({(f.intrinsics.width, f.intrinsics.height) for f in scene.frames})
    write_output(
        {
            "scene_id": scene.scene_id,
            "point_count": scene.cloud.point_count,
            "frame_count": len(scene.frames),
            "resolutions": [list(s) for s in sizes],
            "bounds": bounds.model_dump() if bounds else None,
        },
        args.output,
    )
    return 0


def cmd_segment(args: argparse.Namespace, config: PipelineConfig) -> int:
    root = _scene_dir(args.directory)
    seg = GroundingPipeline(config).load(root)
    if args.dump is not None:
        seg.dump(args.dump or root)
    write_output(
        {
            "scene_id": seg.scene.scene_id,
            "superpoint_count": len(seg.superpoints),
            "adjacency_count": len(seg.graph.edges),
            "stage_counts": seg.merge.stage_counts,
            "instance_count": len(seg.instances),
            "embedded_count": len(seg.embeddings),
        },
        args.output,
    )
    return 0


def cmd_ground(args: argparse.Namespace, config: PipelineConfig) -> int:
    query = parse_query(args.query)
    root = _scene_dir(args.directory)
    pipeline = GroundingPipeline(config)
    result = pipeline.ground(pipeline.load(root), query, args.u, args.work_dir)
    write_output(
        {
            "query": args.query,
            "selected": result.trace.selected,
            "instance_id": result.selected.instance.instance_id,
            "box": result.box.model_dump(),
            "candidates": [
                {
                    "candidate_id": c.candidate_id,
                    "instance_id": c.instance.instance_id,
                    "score": c.score,
                }
                for c in result.candidates
            ],
            "trace": trace_summary(result.trace),
            "provider_calls": pipeline.providers.calls(),
        },
        args.output,
    )
    return 0


def cmd_eval(args: argparse.Namespace, config: PipelineConfig) -> int:
    report = evaluate(args.dataset, config=config, u=args.u, work_root=args.work_root)
    if args.out:
        write_report(report, args.out)
    else:
        print(report.model_dump_json(indent=2))
    return 0


def cmd_synth(args: argparse.Namespace, config: PipelineConfig) -> int:
    width, height = args.resolution
    try:
        spec = SyntheticSpec(
            seed=args.seed,
            object_count=args.objects,
            frame_count=args.frames,
            resolution=(width, height),
        )
    except ValidationError as e:
        raise SynthesisError(f"Invalid synthetic scene settings: {e}") from e
    if args.scenes > 1:
        path = synth_suite(spec, args.out, args.scenes)
    else:
        path = synth_scene(spec, args.out)
    logger.info("Synthetic data written to %s", path)
    print(path)
    return 0


def _ablation_providers(args: argparse.Namespace, config: PipelineConfig) -> Providers:
    degraded = args.vlm == "degraded" and config.providers.kind == "mock"
    vlm = DegradedVlm() if degraded else None
    providers = build_providers(config.providers, vlm)
    if args.noise > 0:
        providers = Providers(
            mask=providers.mask,
            embed=NoisyEmbeddingProvider(providers.embed, args.noise, config.providers.seed),
            vlm=providers.vlm,
        )
    return providers


def cmd_ablate(args: argparse.Namespace, config: PipelineConfig) -> int:
    pipeline = GroundingPipeline(config, _ablation_providers(args, config))
    if args.kind == "candidates":
        rows = ablate_candidates(args.dataset, args.n, pipeline, args.out)
    else:
        rows = ablate_prompts(args.dataset, pipeline, out_csv=args.out)
    if not args.out:
        print(json.dumps(rows, indent=2))
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "segment": cmd_segment,
    "ground": cmd_ground,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
}


def _resolution(value: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in value.lower().split("x"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {value!r}") from e
    return w, h


def _common_options(suppress: bool) -> argparse.ArgumentParser:
    """Options accepted before and after the subcommand; only the top level sets defaults."""
    common = argparse.ArgumentParser(add_help=False)

    def default(value: Any) -> Any:
        return argparse.SUPPRESS if suppress else value

    common.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=default(0),
        help="Increase verbosity (-v=INFO, -vv=DEBUG)",
    )
    common.add_argument(
        "-q",
        "--quiet",
        action="store_true",
        default=default(False),
        help="Suppress all output except errors",
    )
    common.add_argument(
        "--log-format",
        choices=["text", "json"],
        default=default("text"),
        help="Log output format (default: text)",
    )
    common.add_argument("--config", default=default(None), help="TOML configuration file")
    common.add_argument(
        "--workers", type=int, default=default(None), help="Worker threads (default: from config)"
    )
    return common


def parse_args(args: list[str] | None = None) -> argparse.Namespace:
    """Parse command-line arguments."""
    common = _common_options(suppress=True)
    parser = argparse.ArgumentParser(
        description="Ground natural-language object references in RGB-D scenes.",
        prog="uniground",
        parents=[_common_options(suppress=False)],
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Validate a scene directory")
    p.add_argument("directory")
    p.add_argument("-o", "--output", help="Write the summary here instead of stdout")

    p = sub.add_parser("segment", parents=[common], help="Run Stage-1 segmentation")
    p.add_argument("directory")
    p.add_argument(
        "--dump",
        nargs="?",
        const="",
        help="Write superpoints.json and instances.json (default: into the scene directory)",
    )
    p.add_argument("-o", "--output", help="Write the summary here instead of stdout")

    p = sub.add_parser("ground", parents=[common], help="Ground one query in a scene")
    p.add_argument("directory")
    p.add_argument("--query", required=True, help="Referring expression")
    p.add_argument("--u", type=int, help="Candidates kept after filtering (default: from config)")
    p.add_argument("--providers", choices=["mock", "http"], help="Provider backend")
    p.add_argument("--work-dir", help="Keep prompt images, candidates and trace here")
    p.add_argument("-o", "--output", help="Write the result here instead of stdout")

    p = sub.add_parser("eval", parents=[common], help="Evaluate on an annotation file")
    p.add_argument("dataset")
    p.add_argument("--out", help="Report path; timing goes to <report>.timing.json")
    p.add_argument("--u", type=int, help="Candidates kept after filtering (default: from config)")
    p.add_argument("--providers", choices=["mock", "http"], help="Provider backend")
    p.add_argument("--work-root", help="Keep per-query artifacts under this directory")

    p = sub.add_parser("synth", parents=[common], help="Generate synthetic scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objects", type=int, default=6)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--resolution", type=_resolution, default=(640, 480), help="WIDTHxHEIGHT")
    p.add_argument("--scenes", type=int, default=1, help="Scene count; >1 writes dataset.json")
    p.add_argument("--out", required=True, help="Scene directory (or suite root)")

    p = sub.add_parser("ablate", parents=[common], help="Ablation sweeps")
    p.add_argument("kind", choices=["candidates", "prompts"])
    p.add_argument("dataset")
    p.add_argument(
        "--n",
        type=int,
        nargs="+",
        default=[1, 2, 3, 5, 10],
        help="Candidate counts, ascending (default: 1 2 3 5 10)",
    )
    p.add_argument("--noise", type=float, default=0.0, help="Embedding noise sigma")
    p.add_argument(
        "--vlm",
        choices=["oracle", "degraded"],
        default="degraded",
        help="Mock VLM for the prompt sweep (default: degraded)",
    )
    p.add_argument("--providers", choices=["mock", "http"], help="Provider backend")
    p.add_argument("--out", help="CSV path (default: JSON rows on stdout)")

    return parser.parse_args(args)


def main(args: list[str] | None = None) -> int:
    """Main entry point. Returns exit code."""
    try:
        parsed_args = parse_args(args)
        setup_logging(
            verbosity=parsed_args.verbose,
            quiet=parsed_args.quiet,
            json_format=parsed_args.log_format == "json",
        )
        return COMMANDS[parsed_args.command](parsed_args, _config(parsed_args))

    except InputError as e:
        logger.error("Input error: %s", e)
        return e.exit_code
    except ProviderError as e:
        logger.error("Provider error: %s", e)
        return e.exit_code
    except OutputError as e:
        logger.error("Output error: %s", e)
        return e.exit_code
    except UnigroundError as e:
        logger.error("Error: %s", e)
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130
    except Exception as e:
        logger.exception("Unexpected error: %s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
