"""Evaluation machinery: summary statistics and blind A/B comparison.

Statistics aggregate persisted distillation records with exact rational
arithmetic, partitioned by terminal status; averages over empty subsets are
reported as absent, never zero. The A/B harness presents paired experiment
outputs blind (system labels are never serialized into judge prompts), rates
every problem twice with counterbalanced order, and collapses disagreement
between the two counterbalanced ratings to a tie, so positional bias shows
up as ties instead of noise. The alternative half-vote combination rule is
available behind a flag.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .analysis import _complete_structured, extract_json
from .errors import IncompleteDesign, MalformedResponse, MissingInput
from .gateway import LlmGateway, PromptRequest
from .loop import STATUS_SUCCESS, DistillationRecord, load_record

logger = logging.getLogger(__name__)

DIMENSIONS = ("accuracy", "completeness", "soundness")
ORDERS = ("ab", "ba")
SYSTEM_LABELS = ("baseline", "augmented")
RATINGS = ("prefer_first", "prefer_second", "tie")

# Fixed filenames inside one experiment-output directory.
AB_CODE_FILENAME = "code.py"
AB_RESULTS_FILENAME = "results.txt"
AB_REPORT_FILENAME = "report.md"

AB_JUDGE_SYSTEM_TEXT = (
    "You compare two solutions to the same discovery problem on one quality "
    "dimension. First write an independent textual evaluation of each "
    "solution, then decide. Reply with a single JSON object: "
    "{\"evaluation_solution_1\": <paragraph>, \"evaluation_solution_2\": "
    "<paragraph>, \"preference\": \"1\" | \"2\" | \"tie\"}. Reply with JSON "
    "only."
)


@dataclass
class SummaryTable:
    n_total: int
    n_success: int
    success_rate: Fraction | None
    avg_runtime_success: Fraction | None
    avg_runtime_failure: Fraction | None
    avg_iterations_success: Fraction | None
    avg_cost_success: Fraction | None
    avg_cost_failure: Fraction | None


@dataclass(frozen=True)
class ExperimentOutput:
    code: str
    raw_results: str
    report: str
    system_label: str

    def __post_init__(self) -> None:
        if self.system_label not in SYSTEM_LABELS:
            raise ValueError(f"unknown system_label: {self.system_label!r}")


@dataclass(frozen=True)
class ABItem:
    problem_id: str
    side_a: ExperimentOutput
    side_b: ExperimentOutput

    def __post_init__(self) -> None:
        if (self.side_a.code, self.side_a.raw_results, self.side_a.report) == (
            self.side_b.code,
            self.side_b.raw_results,
            self.side_b.report,
        ):
            raise ValueError("A/B sides must differ by content")


@dataclass(frozen=True)
class ABVerdict:
    """Order-unmapped verdict: prefer_first refers to side_a, prefer_second
    to side_b, regardless of presentation order."""

    dimension: str
    rating: str
    eval_first: str
    eval_second: str

    def __post_init__(self) -> None:
        if self.dimension not in DIMENSIONS:
            raise ValueError(f"unknown dimension: {self.dimension!r}")
        if self.rating not in RATINGS:
            raise ValueError(f"unknown rating: {self.rating!r}")
        if not self.eval_first.strip() or not self.eval_second.strip():
            raise ValueError("both textual evaluations must be non-empty")


@dataclass(frozen=True)
class ABResult:
    item: ABItem
    dimension: str
    order: str
    verdict: ABVerdict


@dataclass
class PreferenceReport:
    proportions: dict[str, tuple[Fraction, Fraction, Fraction]]
    n_problems: int


@dataclass
class ProblemOutputs:
    problem_id: str
    baseline: ExperimentOutput | None = None
    augmented: ExperimentOutput | None = None


def aggregate_stats(records: list[DistillationRecord]) -> SummaryTable:
    """Exact summary statistics partitioned by terminal status."""
    successes = [r for r in records if r.status == STATUS_SUCCESS]
    failures = [r for r in records if r.status != STATUS_SUCCESS]

    def mean(values: list[Fraction]) -> Fraction | None:
        if not values:
            return None
        return sum(values, Fraction(0)) / len(values)

    n_total = len(records)
    return SummaryTable(
        n_total=n_total,
        n_success=len(successes),
        success_rate=(Fraction(len(successes), n_total) if n_total else None),
        avg_runtime_success=mean([Fraction(r.total_wall_time) for r in successes]),
        avg_runtime_failure=mean([Fraction(r.total_wall_time) for r in failures]),
        avg_iterations_success=mean([Fraction(len(r.iterations)) for r in successes]),
        avg_cost_success=mean([r.ledger.total for r in successes]),
        avg_cost_failure=mean([r.ledger.total for r in failures]),
    )


def _solution_block(number: int, output: ExperimentOutput) -> str:
    # system_label is intentionally absent: ratings are blind.
    return (
        f"Solution {number} code:\n{output.code}\n\n"
        f"Solution {number} raw results:\n{output.raw_results}\n\n"
        f"Solution {number} report:\n{output.report}"
    )


def build_ab_prompt(
    item: ABItem,
    dimension: str,
    order: str,
    *,
    model_id: str,
    max_output_tokens: int = 2048,
    temperature: float = 0.0,
) -> PromptRequest:
    if dimension not in DIMENSIONS:
        raise ValueError(f"unknown dimension: {dimension!r}")
    if order not in ORDERS:
        raise ValueError(f"unknown order: {order!r}")
    first, second = (
        (item.side_a, item.side_b) if order == "ab" else (item.side_b, item.side_a)
    )
    user_text = (
        f"Problem id: {item.problem_id}\n"
        f"Dimension under comparison: {dimension}\n\n"
        + _solution_block(1, first)
        + "\n\n"
        + _solution_block(2, second)
    )
    return PromptRequest(
        role_tag="ab_judge",
        system_text=AB_JUDGE_SYSTEM_TEXT,
        user_text=user_text,
        model_id=model_id,
        max_output_tokens=max_output_tokens,
        temperature=temperature,
    )


def ab_compare(
    item: ABItem,
    dimension: str,
    order: str,
    gateway: LlmGateway,
    *,
    model_id: str,
    max_output_tokens: int = 2048,
    temperature: float = 0.0,
) -> ABVerdict:
    """One blind comparison; the rating is mapped back through the
    presentation order so it refers to the underlying sides."""
    request = build_ab_prompt(
        item,
        dimension,
        order,
        model_id=model_id,
        max_output_tokens=max_output_tokens,
        temperature=temperature,
    )

    def parse(text: str) -> tuple[str, str, str]:
        payload = extract_json(text)
        preference = str(payload["preference"]).strip().lower()
        if preference not in ("1", "2", "tie"):
            raise ValueError(f"preference must be 1, 2, or tie, got {preference!r}")
        eval_1 = str(payload["evaluation_solution_1"])
        eval_2 = str(payload["evaluation_solution_2"])
        if not eval_1.strip() or not eval_2.strip():
            raise ValueError("both evaluations must be non-empty")
        return preference, eval_1, eval_2

    try:
        preference, eval_1, eval_2 = _complete_structured(gateway, request, parse)
    except MalformedResponse as exc:
        logger.warning("A/B judge unparseable for %s/%s: %s", item.problem_id, dimension, exc)
        diagnostic = f"judge response unparseable ({exc}); scored as tie"
        return ABVerdict(
            dimension=dimension,
            rating="tie",
            eval_first=diagnostic,
            eval_second=diagnostic,
        )

    if preference == "tie":
        rating = "tie"
    elif (preference == "1") == (order == "ab"):
        rating = "prefer_first"
    else:
        rating = "prefer_second"
    eval_first, eval_second = (eval_1, eval_2) if order == "ab" else (eval_2, eval_1)
    return ABVerdict(
        dimension=dimension,
        rating=rating,
        eval_first=eval_first,
        eval_second=eval_second,
    )


def _system_for_rating(item: ABItem, rating: str) -> str | None:
    if rating == "prefer_first":
        return item.side_a.system_label
    if rating == "prefer_second":
        return item.side_b.system_label
    return None


def aggregate_preferences(
    results: list[ABResult], *, rule: str = "agreement"
) -> PreferenceReport:
    """Combine the two counterbalanced ratings per problem per dimension.

    rule="agreement" (default): both ratings must name the same system,
    anything else is a tie. rule="half_vote": each rating contributes half
    a vote to its preferred bucket.
    """
    if rule not in ("agreement", "half_vote"):
        raise ValueError(f"unknown combination rule: {rule!r}")

    by_key: dict[tuple[str, str], dict[str, ABResult]] = {}
    for result in results:
        key = (result.item.problem_id, result.verdict.dimension)
        slot = by_key.setdefault(key, {})
        if result.order in slot:
            raise IncompleteDesign(
                f"duplicate order {result.order} for problem "
                f"{result.item.problem_id} / {result.verdict.dimension}"
            )
        slot[result.order] = result

    dimensions = sorted({dimension for _pid, dimension in by_key})
    problems = sorted({pid for pid, _dimension in by_key})
    counts: dict[str, dict[str, Fraction]] = {
        dimension: {"baseline": Fraction(0), "augmented": Fraction(0), "tie": Fraction(0)}
        for dimension in dimensions
    }
    for (problem_id, dimension), slot in by_key.items():
        missing = set(ORDERS) - set(slot)
        if missing:
            raise IncompleteDesign(
                f"problem {problem_id} / {dimension} missing order(s): "
                f"{', '.join(sorted(missing))}"
            )
        picks = [
            _system_for_rating(slot[order].item, slot[order].verdict.rating)
            for order in ORDERS
        ]
        if rule == "agreement":
            if picks[0] is not None and picks[0] == picks[1]:
                counts[dimension][picks[0]] += 1
            else:
                counts[dimension]["tie"] += 1
        else:
            for pick in picks:
                counts[dimension][pick or "tie"] += Fraction(1, 2)

    n_problems = len(problems)
    proportions = {}
    for dimension in dimensions:
        row = counts[dimension]
        total = row["baseline"] + row["augmented"] + row["tie"]
        if total == 0:
            continue
        proportions[dimension] = (
            row["baseline"] / total,
            row["augmented"] / total,
            row["tie"] / total,
        )
    return PreferenceReport(proportions=proportions, n_problems=n_problems)


def filter_completed_pairs(problems: list[ProblemOutputs]) -> list[ABItem]:
    """Keep only problems where both systems produced a solution."""
    items = []
    for problem in problems:
        if problem.baseline is None or problem.augmented is None:
            continue
        items.append(
            ABItem(
                problem_id=problem.problem_id,
                side_a=problem.baseline,
                side_b=problem.augmented,
            )
        )
    return items


def run_ab_evaluation(
    problems: list[ProblemOutputs],
    gateway: LlmGateway,
    *,
    model_id: str,
    dimensions: tuple[str, ...] = DIMENSIONS,
    rule: str = "agreement",
) -> PreferenceReport:
    """Full design: both orders per problem per dimension, then aggregation."""
    items = filter_completed_pairs(problems)
    results = []
    for item in items:
        for dimension in dimensions:
            for order in ORDERS:
                verdict = ab_compare(item, dimension, order, gateway, model_id=model_id)
                results.append(
                    ABResult(item=item, dimension=dimension, order=order, verdict=verdict)
                )
    return aggregate_preferences(results, rule=rule)


# --- loading and rendering ---------------------------------------------------

def load_records_dir(path: str | Path) -> list[DistillationRecord]:
    directory = Path(path)
    if not directory.is_dir():
        raise MissingInput(f"records directory not found: {directory}")
    records = []
    for record_path in sorted(directory.glob("*.json")):
        records.append(load_record(record_path))
    if not records:
        raise MissingInput(f"no records found under {directory}")
    return records


def _load_output(directory: Path, system_label: str) -> ExperimentOutput | None:
    code_path = directory / AB_CODE_FILENAME
    if not directory.is_dir() or not code_path.is_file():
        return None
    results_path = directory / AB_RESULTS_FILENAME
    report_path = directory / AB_REPORT_FILENAME
    return ExperimentOutput(
        code=code_path.read_text(),
        raw_results=results_path.read_text() if results_path.is_file() else "",
        report=report_path.read_text() if report_path.is_file() else "",
        system_label=system_label,
    )


def load_pairing_manifest(path: str | Path) -> list[ProblemOutputs]:
    """Read a pairing manifest: problem_id -> two output directories."""
    manifest_path = Path(path)
    if not manifest_path.is_file():
        raise MissingInput(f"pairing manifest not found: {manifest_path}")
    payload = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    problems = []
    for row in payload["problems"]:
        problem_id = row["problem_id"]
        problems.append(
            ProblemOutputs(
                problem_id=problem_id,
                baseline=_load_output(base / row["baseline"], "baseline"),
                augmented=_load_output(base / row["augmented"], "augmented"),
            )
        )
    if not problems:
        raise MissingInput(f"pairing manifest lists no problems: {manifest_path}")
    return problems


def _fmt_minutes(seconds: Fraction | None) -> str:
    if seconds is None:
        return "-"
    return f"{float(seconds) / 60.0:.1f} min"


def _fmt_percent(value: Fraction | None) -> str:
    if value is None:
        return "-"
    return f"{float(value) * 100.0:.1f}%"


def _fmt_usd(value: Fraction | None) -> str:
    if value is None:
        return "-"
    from .gateway import format_usd

    return f"${format_usd(value)}"


def render_summary_table(table: SummaryTable) -> str:
    rows = [
        ("Repositories", str(table.n_total)),
        ("Successfully completed", _fmt_percent(table.success_rate)),
        ("Avg. runtime (successful cases)", _fmt_minutes(table.avg_runtime_success)),
        ("Avg. runtime (unsuccessful cases)", _fmt_minutes(table.avg_runtime_failure)),
        (
            "Avg. debug iterations (successful cases)",
            "-"
            if table.avg_iterations_success is None
            else f"{float(table.avg_iterations_success):.1f}",
        ),
        ("Avg. cost (successful cases)", _fmt_usd(table.avg_cost_success)),
        ("Avg. cost (unsuccessful cases)", _fmt_usd(table.avg_cost_failure)),
    ]
    width = max(len(label) for label, _value in rows)
    return "\n".join(f"{label.ljust(width)}  {value}" for label, value in rows)


def summary_table_to_dict(table: SummaryTable) -> dict:
    def opt(value: Fraction | None) -> float | None:
        return None if value is None else float(value)

    return {
        "n_total": table.n_total,
        "n_success": table.n_success,
        "success_rate": opt(table.success_rate),
        "avg_runtime_success_seconds": opt(table.avg_runtime_success),
        "avg_runtime_failure_seconds": opt(table.avg_runtime_failure),
        "avg_iterations_success": opt(table.avg_iterations_success),
        "avg_cost_success_usd": opt(table.avg_cost_success),
        "avg_cost_failure_usd": opt(table.avg_cost_failure),
    }


def render_preference_report(report: PreferenceReport) -> str:
    lines = [f"Problems rated: {report.n_problems}"]
    for dimension, (baseline, augmented, tie) in sorted(report.proportions.items()):
        lines.append(
            f"{dimension.ljust(14)} baseline {_fmt_percent(baseline)}  "
            f"augmented {_fmt_percent(augmented)}  tie {_fmt_percent(tie)}"
        )
    return "\n".join(lines)


def preference_report_to_dict(report: PreferenceReport) -> dict:
    return {
        "n_problems": report.n_problems,
        "proportions": {
            dimension: {
                "prefer_baseline": float(values[0]),
                "prefer_augmented": float(values[1]),
                "tie": float(values[2]),
            }
            for dimension, values in report.proportions.items()
        },
    }
