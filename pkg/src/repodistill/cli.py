"""Operator command line.

Subcommands:
  distill            run the full pipeline over repositories
  record-transcript  run distill while recording a replayable transcript
  report-stats       aggregate persisted records into summary statistics
  report-ab          run the counterbalanced A/B comparison over paired outputs
  library-export     write the library manifest for downstream agents

Exit codes: 0 ok, 1 fatal pipeline error, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, MissingInput, RepodistillError
from .evaluation import (
    load_pairing_manifest,
    load_records_dir,
    aggregate_stats,
    preference_report_to_dict,
    render_preference_report,
    render_summary_table,
    run_ab_evaluation,
    summary_table_to_dict,
)
from .gateway import CostLedger, LlmGateway, PriceTable
from .ingest import (
    DEFAULT_LICENSE_ALLOWLIST,
    FixtureRepoIndex,
    GithubRepoIndex,
    discover_repos,
    sample_repos,
)
from .library import ExampleLibrary, write_manifest
from .pipeline import build_backend, local_repo_descriptor, run_distill

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_USAGE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repodistill",
        description="Distill repositories into vetted executable example bundles.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_distill_arguments(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", required=True, help="JSON pipeline config")
        sub.add_argument("--output-root", help="override config output_root")
        sub.add_argument("--max-iterations", type=int)
        sub.add_argument("--cost-cap", dest="cost_cap_usd")
        sub.add_argument("--parallel-repos", type=int)
        sub.add_argument("--context-budget-bytes", type=int)
        sub.add_argument("--replay-transcript")
        sub.add_argument("--max-repo-bytes", type=int)
        sub.add_argument(
            "--repo",
            action="append",
            default=[],
            help="local repository directory (repeatable)",
        )
        sub.add_argument("--fixture-index", help="offline JSON repository index")
        sub.add_argument("--github", action="store_true", help="discover via GitHub API")
        sub.add_argument("--libraries-file", help="one library name per line")
        sub.add_argument(
            "--license-allowlist",
            help="comma-separated SPDX ids (default: common permissive set)",
        )
        sub.add_argument("--sample-n", type=int, help="random subsample size")
        sub.add_argument("--seed", type=int, default=0)

    distill_cmd = subparsers.add_parser("distill", help="run the pipeline")
    add_distill_arguments(distill_cmd)

    record_cmd = subparsers.add_parser(
        "record-transcript", help="run distill and record a replay transcript"
    )
    add_distill_arguments(record_cmd)
    record_cmd.add_argument("--transcript-out", required=True)

    stats_cmd = subparsers.add_parser("report-stats", help="summary statistics")
    stats_cmd.add_argument("--records-dir", required=True)
    stats_cmd.add_argument("--out", help="write JSON report here")

    ab_cmd = subparsers.add_parser("report-ab", help="counterbalanced A/B report")
    ab_cmd.add_argument("--config", required=True)
    ab_cmd.add_argument("--pairs-manifest", required=True)
    ab_cmd.add_argument("--out", help="write JSON report here")
    ab_cmd.add_argument(
        "--rule",
        choices=("agreement", "half_vote"),
        default="agreement",
        help="how the two counterbalanced ratings combine",
    )

    export_cmd = subparsers.add_parser("library-export", help="export the manifest")
    export_cmd.add_argument("--library-root", required=True)
    export_cmd.add_argument("--manifest-out", required=True)
    return parser


def _config_overrides(args: argparse.Namespace) -> dict:
    return {
        "output_root": args.output_root,
        "max_iterations": args.max_iterations,
        "cost_cap_usd": args.cost_cap_usd,
        "parallel_repos": args.parallel_repos,
        "context_budget_bytes": args.context_budget_bytes,
        "replay_transcript": args.replay_transcript,
    }


def _resolve_sources(args: argparse.Namespace):
    sources = [local_repo_descriptor(path) for path in args.repo]
    if args.fixture_index or args.github:
        if not args.libraries_file:
            raise ConfigError("discovery requires --libraries-file")
        libraries = [
            line.strip()
            for line in Path(args.libraries_file).read_text().splitlines()
            if line.strip()
        ]
        allowlist = (
            {item.strip() for item in args.license_allowlist.split(",") if item.strip()}
            if args.license_allowlist
            else DEFAULT_LICENSE_ALLOWLIST
        )
        index = (
            GithubRepoIndex()
            if args.github
            else FixtureRepoIndex.from_file(args.fixture_index)
        )
        discovered = discover_repos(index, libraries, allowlist)
        if args.sample_n:
            discovered = sample_repos(discovered, args.sample_n, args.seed)
        sources.extend(discovered)
    if not sources:
        raise ConfigError("no repositories given; use --repo or --fixture-index")
    return sources


def _cmd_distill(args: argparse.Namespace) -> int:
    overrides = _config_overrides(args)
    if getattr(args, "transcript_out", None):
        overrides["record_transcript"] = args.transcript_out
    config = load_config(args.config, overrides)
    sources = _resolve_sources(args)
    exit_code, _records = run_distill(
        config, sources, max_repo_bytes=args.max_repo_bytes
    )
    return exit_code


def _cmd_report_stats(args: argparse.Namespace) -> int:
    records = load_records_dir(args.records_dir)
    table = aggregate_stats(records)
    print(render_summary_table(table))
    if args.out:
        Path(args.out).write_text(
            json.dumps(summary_table_to_dict(table), indent=2, sort_keys=True)
        )
        print(f"report written to {args.out}")
    return EXIT_OK


def _cmd_report_ab(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    problems = load_pairing_manifest(args.pairs_manifest)
    gateway = LlmGateway(
        build_backend(config),
        PriceTable.from_mapping(config.price_table),
        ledger=CostLedger(cost_cap=config.cost_cap_usd),
        max_retries=config.max_retries,
    )
    report = run_ab_evaluation(
        problems, gateway, model_id=config.model_for("ab_judge"), rule=args.rule
    )
    print(render_preference_report(report))
    if args.out:
        Path(args.out).write_text(
            json.dumps(preference_report_to_dict(report), indent=2, sort_keys=True)
        )
        print(f"report written to {args.out}")
    return EXIT_OK


def _cmd_library_export(args: argparse.Namespace) -> int:
    library_root = Path(args.library_root)
    if not library_root.is_dir():
        raise MissingInput(f"library root not found: {library_root}")
    library = ExampleLibrary(library_root)
    write_manifest(library, args.manifest_out)
    print(f"manifest written to {args.manifest_out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    handlers = {
        "distill": _cmd_distill,
        "record-transcript": _cmd_distill,
        "report-stats": _cmd_report_stats,
        "report-ab": _cmd_report_ab,
        "library-export": _cmd_library_export,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, MissingInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RepodistillError as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
