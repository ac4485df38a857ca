"""The judge/reflect debug loop.

``distill`` drives generate -> execute -> judge for one repository, reflecting
on failure, until the judge accepts the example or the iteration cap is hit.
The exit-status hard gate sits above the LLM judge: a run that did not exit 0
is a failure no matter what the judge text says, because exit status is the
one signal the pipeline can verify on its own.

Every iteration is persisted before the loop moves on, so an interrupted
distillation resumes from its last completed iteration.
"""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from fractions import Fraction
from pathlib import Path

from .analysis import (
    ContextSelection,
    FileClassification,
    RepoPurpose,
    _complete_structured,
    classify_file,
    extract_json,
    load_classifications,
    locate_main_readme,
    resolve_mentions,
    save_classifications,
    select_context_files,
    summarize_purpose,
    summarize_purpose_from_tree,
)
from .config import PipelineConfig
from .errors import (
    AdmissionError,
    BudgetExceeded,
    CorruptRecord,
    FetchError,
    MalformedResponse,
    PromptOverflow,
    SandboxBackendError,
)
from .gateway import (
    CostLedger,
    LedgerEntry,
    LlmGateway,
    PromptRequest,
)
from .generation import (
    ExampleBundle,
    build_generation_prompt,
    bundle_digest,
    generate_bundle,
    metadata_from_dict,
    metadata_to_dict,
)
from .ingest import FileRecord, RepoDescriptor, WorkingCopy, enumerate_files
from .sandbox import IsolationBackend, RunTrace, execute, prepare_workspace

logger = logging.getLogger(__name__)

STATUS_SUCCESS = "success"
STATUS_FAILED_MAX_ITERATIONS = "failed_max_iterations"
STATUS_FAILED_BUDGET = "failed_budget"
STATUS_FAILED_FATAL = "failed_fatal"
STATUS_IN_PROGRESS = "in_progress"
TERMINAL_STATUSES = (
    STATUS_SUCCESS,
    STATUS_FAILED_MAX_ITERATIONS,
    STATUS_FAILED_BUDGET,
    STATUS_FAILED_FATAL,
)

RECORD_SCHEMA = "distillation-record-v1"

JUDGE_SYSTEM_TEXT = (
    "You judge whether a generated code example ran successfully and "
    "faithfully demonstrates the repository purpose it was built for. "
    "Inspect the execution evidence and reply with a single JSON object: "
    "{\"success\": <bool>, \"issues\": [<short descriptions of problems, "
    "empty when success is true>], \"rationale\": <one-paragraph "
    "justification>}. Reply with JSON only."
)


@dataclass(frozen=True)
class JudgeVerdict:
    success: bool
    issues: tuple[str, ...]
    rationale: str

    def __post_init__(self) -> None:
        if self.success and self.issues:
            raise ValueError("a success verdict cannot carry issues")
        if not self.rationale.strip():
            raise ValueError("rationale must be non-empty")


@dataclass(frozen=True)
class IterationRecord:
    index: int
    bundle_digest: str
    exit_status: int | str
    wall_time: float
    truncated: bool
    verdict: JudgeVerdict


@dataclass
class RepoAnalysis:
    purpose: RepoPurpose
    selection: ContextSelection


@dataclass
class DistillationRecord:
    repo: RepoDescriptor
    snapshot_id: str
    status: str
    iterations: list[IterationRecord]
    total_wall_time: float
    ledger: CostLedger
    final_bundle: ExampleBundle | None = None
    fatal_error: str | None = None


def _render_trace_evidence(trace: RunTrace) -> str:
    # Only replay-stable evidence goes into the prompt: wall-clock values and
    # log timestamps differ run to run and would break request fingerprints.
    parts = [f"Exit status: {trace.exit_status}"]
    if trace.log_entries:
        rendered = "\n".join(msg for _ts, msg in trace.log_entries)
        parts.append("Log messages:\n" + rendered)
    if trace.results_document is not None:
        parts.append(
            "Results document:\n" + json.dumps(trace.results_document, sort_keys=True)
        )
    if trace.stdout_tail:
        parts.append("stdout (tail):\n" + trace.stdout_tail)
    if trace.stderr_tail:
        parts.append("stderr (tail):\n" + trace.stderr_tail)
    if trace.produced_files:
        listing = "\n".join(f"{path} ({size} bytes)" for path, size in trace.produced_files)
        parts.append("Produced files:\n" + listing)
    if trace.truncated:
        parts.append("Note: captured output was truncated.")
    return "\n\n".join(parts)


def judge_run(
    bundle: ExampleBundle,
    trace: RunTrace,
    purpose: RepoPurpose,
    gateway: LlmGateway,
    *,
    model_id: str,
    max_output_tokens: int = 1024,
    temperature: float = 0.0,
) -> JudgeVerdict:
    """LLM judgment of one run, hard-gated by the observed exit status."""
    request = PromptRequest(
        role_tag="judge",
        system_text=JUDGE_SYSTEM_TEXT,
        user_text=(
            "Repository purpose:\n"
            + purpose.summary
            + "\n\nExample code:\n"
            + bundle.example_code
            + "\n\nExecution evidence:\n"
            + _render_trace_evidence(trace)
        ),
        model_id=model_id,
        max_output_tokens=max_output_tokens,
        temperature=temperature,
    )

    def parse(text: str) -> JudgeVerdict:
        payload = extract_json(text)
        issues = payload.get("issues", [])
        if not isinstance(issues, list):
            raise ValueError("issues must be a list")
        return JudgeVerdict(
            success=bool(payload["success"]),
            issues=tuple(str(issue) for issue in issues),
            rationale=str(payload.get("rationale", "")),
        )

    try:
        verdict = _complete_structured(gateway, request, parse)
    except MalformedResponse as exc:
        verdict = JudgeVerdict(
            success=False,
            issues=("judge unparseable",),
            rationale=f"judge response could not be parsed: {exc}",
        )

    if trace.exit_status != 0 and verdict.success:
        # Hard gate: the judge cannot overrule a failed execution.
        verdict = JudgeVerdict(
            success=False,
            issues=verdict.issues
            or (f"execution ended with status {trace.exit_status}",),
            rationale=verdict.rationale
            + f" [overridden: exit status was {trace.exit_status}]",
        )
    return verdict


def analyze_repo(
    copy: WorkingCopy,
    config: PipelineConfig,
    gateway: LlmGateway,
    *,
    sidecar_path: Path | None = None,
) -> RepoAnalysis:
    """Purpose summary plus classified, selected context files for one repo."""
    files = enumerate_files(copy)
    contents: dict[str, str] = {}
    for record in files:
        if record.is_text:
            contents[record.relative_path] = (
                (copy.root_path / record.relative_path).read_text(errors="replace")
            )

    readme = locate_main_readme(files)
    if readme is not None and contents.get(readme.relative_path, "").strip():
        purpose = summarize_purpose(
            contents[readme.relative_path],
            gateway,
            model_id=config.model_for("purpose"),
            source_readme=readme.relative_path,
            max_output_tokens=config.max_output_tokens_for("purpose"),
            temperature=config.temperature_for("purpose"),
        )
    else:
        purpose = summarize_purpose_from_tree(
            files,
            gateway,
            model_id=config.model_for("purpose"),
            max_output_tokens=config.max_output_tokens_for("purpose"),
            temperature=config.temperature_for("purpose"),
        )
    purpose = resolve_mentions(purpose, files)

    classifications: list[FileClassification] | None = None
    if sidecar_path is not None and sidecar_path.is_file():
        try:
            classifications = load_classifications(sidecar_path)
            logger.info("reusing %d classifications from sidecar", len(classifications))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            logger.warning("sidecar unusable, reclassifying: %s", exc)
            classifications = None
    if classifications is None:
        def classify_one(record: FileRecord) -> FileClassification:
            return classify_file(
                record,
                contents.get(record.relative_path, ""),
                gateway,
                model_id=config.model_for("classify"),
                purpose_summary=purpose.summary,
                max_output_tokens=config.max_output_tokens_for("classify"),
                temperature=config.temperature_for("classify"),
            )

        if config.classify_fanout > 1:
            with ThreadPoolExecutor(max_workers=config.classify_fanout) as pool:
                classifications = list(pool.map(classify_one, files))
        else:
            classifications = [classify_one(record) for record in files]
        if sidecar_path is not None:
            save_classifications(classifications, sidecar_path)

    selection = select_context_files(
        classifications, contents, config.context_budget_bytes
    )
    return RepoAnalysis(purpose=purpose, selection=selection)


@dataclass
class _ResumeState:
    iterations: list[IterationRecord]
    prior: tuple[ExampleBundle, RunTrace, JudgeVerdict] | None
    elapsed: float


def distill(
    copy: WorkingCopy,
    config: PipelineConfig,
    gateway: LlmGateway,
    *,
    sandbox_backend: IsolationBackend | None = None,
    record_path: Path | None = None,
    analysis: RepoAnalysis | None = None,
    sidecar_path: Path | None = None,
    workspace_root: Path | None = None,
    _resume: _ResumeState | None = None,
) -> DistillationRecord:
    """Run the full generate/execute/judge loop for one working copy.

    Unrecoverable pipeline errors become a failed_fatal record rather than
    an exception; budget exhaustion becomes failed_budget.
    """
    started = time.monotonic()
    resume = _resume or _ResumeState(iterations=[], prior=None, elapsed=0.0)
    iterations = list(resume.iterations)
    prior = resume.prior
    record = DistillationRecord(
        repo=copy.descriptor,
        snapshot_id=copy.snapshot_id,
        status=STATUS_IN_PROGRESS,
        iterations=iterations,
        total_wall_time=resume.elapsed,
        ledger=gateway.ledger,
        final_bundle=None,
    )

    owns_workspace_root = workspace_root is None
    if workspace_root is None:
        workspace_root = Path(tempfile.mkdtemp(prefix="repodistill-ws-"))
        workspace_root.chmod(0o711)
    workspace_root.mkdir(parents=True, exist_ok=True)

    def elapsed() -> float:
        return resume.elapsed + (time.monotonic() - started)

    def persist() -> None:
        record.total_wall_time = elapsed()
        if record_path is not None:
            save_record(record, record_path, analysis=analysis, prior=prior)

    try:
        if analysis is None:
            analysis = analyze_repo(copy, config, gateway, sidecar_path=sidecar_path)
            persist()
        purpose, selection = analysis.purpose, analysis.selection

        while len(iterations) < config.max_iterations:
            index = len(iterations) + 1
            role = "reflect" if prior is not None else "generate"
            request = build_generation_prompt(
                purpose,
                selection,
                prior,
                model_id=config.model_for(role),
                max_output_tokens=config.max_output_tokens_for(role),
                temperature=config.temperature_for(role),
                max_prompt_bytes=config.max_prompt_bytes,
            )
            bundle = generate_bundle(request, gateway)

            ws_dir = workspace_root / f"iter{index:02d}"
            if ws_dir.exists():
                shutil.rmtree(ws_dir)
            workspace = prepare_workspace(
                bundle,
                copy,
                ws_dir,
                limits=config.sandbox,
                machine_gpus=config.machine_gpus,
            )
            try:
                trace = execute(workspace, config.sandbox, sandbox_backend)
            finally:
                if not config.keep_workspaces:
                    workspace.cleanup()

            verdict = judge_run(
                bundle,
                trace,
                purpose,
                gateway,
                model_id=config.model_for("judge"),
                max_output_tokens=config.max_output_tokens_for("judge"),
                temperature=config.temperature_for("judge"),
            )
            iterations.append(
                IterationRecord(
                    index=index,
                    bundle_digest=bundle_digest(bundle),
                    exit_status=trace.exit_status,
                    wall_time=trace.wall_time,
                    truncated=trace.truncated,
                    verdict=verdict,
                )
            )
            prior = (bundle, trace, verdict)
            if verdict.success:
                record.status = STATUS_SUCCESS
                record.final_bundle = bundle
                break
            persist()
        else:
            record.status = STATUS_FAILED_MAX_ITERATIONS
    except BudgetExceeded as exc:
        logger.info("budget exhausted for %s: %s", copy.descriptor.name, exc)
        record.status = STATUS_FAILED_BUDGET
    except (
        AdmissionError,
        SandboxBackendError,
        MalformedResponse,
        PromptOverflow,
        FetchError,
        OSError,
    ) as exc:
        logger.error("fatal pipeline error for %s: %s", copy.descriptor.name, exc)
        record.status = STATUS_FAILED_FATAL
        record.fatal_error = f"{type(exc).__name__}: {exc}"
    finally:
        if owns_workspace_root and not config.keep_workspaces:
            shutil.rmtree(workspace_root, ignore_errors=True)

    record.total_wall_time = elapsed()
    if record_path is not None:
        save_record(record, record_path, analysis=analysis, prior=prior)
    return record


def resume(
    record_path: Path,
    copy: WorkingCopy,
    config: PipelineConfig,
    gateway: LlmGateway,
    *,
    sandbox_backend: IsolationBackend | None = None,
    workspace_root: Path | None = None,
) -> DistillationRecord:
    """Continue a persisted distillation from its last completed iteration.

    Terminal records are returned unchanged. The persisted ledger is
    restored onto the gateway so the budget gate keeps its memory.
    """
    payload = _load_record_payload(record_path)
    record = record_from_dict(payload)
    if record.status in TERMINAL_STATUSES:
        return record

    gateway.ledger = _ledger_from_dict(payload["ledger"])
    analysis = _analysis_from_dict(payload.get("analysis"))
    if analysis is None:
        raise CorruptRecord(f"{record_path}: in-progress record lacks analysis state")
    prior = _prior_from_dict(payload.get("prior"))
    return distill(
        copy,
        config,
        gateway,
        sandbox_backend=sandbox_backend,
        record_path=record_path,
        analysis=analysis,
        workspace_root=workspace_root,
        _resume=_ResumeState(
            iterations=list(record.iterations),
            prior=prior,
            elapsed=record.total_wall_time,
        ),
    )


# --- persistence -------------------------------------------------------------

def _verdict_to_dict(verdict: JudgeVerdict) -> dict:
    return {
        "success": verdict.success,
        "issues": list(verdict.issues),
        "rationale": verdict.rationale,
    }


def _verdict_from_dict(payload: dict) -> JudgeVerdict:
    return JudgeVerdict(
        success=payload["success"],
        issues=tuple(payload["issues"]),
        rationale=payload["rationale"],
    )


def _bundle_to_dict(bundle: ExampleBundle) -> dict:
    return {
        "example_code": bundle.example_code,
        "dependency_manifest": bundle.dependency_manifest,
        "run_script": bundle.run_script,
        "metadata": metadata_to_dict(bundle.metadata),
    }


def _bundle_from_dict(payload: dict) -> ExampleBundle:
    return ExampleBundle(
        example_code=payload["example_code"],
        dependency_manifest=payload["dependency_manifest"],
        run_script=payload["run_script"],
        metadata=metadata_from_dict(payload["metadata"]),
    )


def _trace_to_dict(trace: RunTrace) -> dict:
    return {
        "exit_status": trace.exit_status,
        "wall_time": trace.wall_time,
        "stdout_tail": trace.stdout_tail,
        "stderr_tail": trace.stderr_tail,
        "log_entries": [
            [ts.isoformat() if ts is not None else None, msg]
            for ts, msg in trace.log_entries
        ],
        "results_document": trace.results_document,
        "produced_files": [list(item) for item in trace.produced_files],
        "truncated": trace.truncated,
    }


def _trace_from_dict(payload: dict) -> RunTrace:
    return RunTrace(
        exit_status=payload["exit_status"],
        wall_time=payload["wall_time"],
        stdout_tail=payload["stdout_tail"],
        stderr_tail=payload["stderr_tail"],
        log_entries=[
            (datetime.fromisoformat(ts) if ts else None, msg)
            for ts, msg in payload["log_entries"]
        ],
        results_document=payload["results_document"],
        produced_files=[tuple(item) for item in payload["produced_files"]],
        truncated=payload["truncated"],
    )


def _descriptor_to_dict(descriptor: RepoDescriptor) -> dict:
    return {
        "host_url": descriptor.host_url,
        "name": descriptor.name,
        "license_id": descriptor.license_id,
        "default_branch": descriptor.default_branch,
        "matched_libraries": sorted(descriptor.matched_libraries),
        "last_activity": (
            descriptor.last_activity.isoformat() if descriptor.last_activity else None
        ),
    }


def _descriptor_from_dict(payload: dict) -> RepoDescriptor:
    return RepoDescriptor(
        host_url=payload["host_url"],
        name=payload["name"],
        license_id=payload["license_id"],
        default_branch=payload["default_branch"],
        matched_libraries=frozenset(payload["matched_libraries"]),
        last_activity=(
            datetime.fromisoformat(payload["last_activity"])
            if payload["last_activity"]
            else None
        ),
    )


def _ledger_to_dict(ledger: CostLedger) -> dict:
    return {
        "cost_cap": str(ledger.cost_cap) if ledger.cost_cap is not None else None,
        "exhausted": ledger.exhausted,
        "entries": [
            {
                "role_tag": entry.role_tag,
                "model_id": entry.model_id,
                "input_tokens": entry.input_tokens,
                "output_tokens": entry.output_tokens,
                "cost": str(entry.cost),
            }
            for entry in ledger.entries
        ],
    }


def _ledger_from_dict(payload: dict) -> CostLedger:
    ledger = CostLedger(
        cost_cap=Fraction(payload["cost_cap"]) if payload["cost_cap"] else None
    )
    ledger.exhausted = payload["exhausted"]
    for entry in payload["entries"]:
        ledger.entries.append(
            LedgerEntry(
                role_tag=entry["role_tag"],
                model_id=entry["model_id"],
                input_tokens=entry["input_tokens"],
                output_tokens=entry["output_tokens"],
                cost=Fraction(entry["cost"]),
            )
        )
    return ledger


def _classification_to_dict(classification: FileClassification) -> dict:
    record = classification.file
    return {
        "relative_path": record.relative_path,
        "byte_size": record.byte_size,
        "content_digest": record.content_digest,
        "is_text": record.is_text,
        "coarse_class": classification.coarse_class,
        "fine_class": classification.fine_class,
        "relevance": classification.relevance,
        "special_compute": classification.special_compute,
        "critical_info": classification.critical_info,
    }


def _classification_from_dict(payload: dict) -> FileClassification:
    return FileClassification(
        file=FileRecord(
            relative_path=payload["relative_path"],
            byte_size=payload["byte_size"],
            content_digest=payload["content_digest"],
            is_text=payload["is_text"],
        ),
        coarse_class=payload["coarse_class"],
        fine_class=payload["fine_class"],
        relevance=payload["relevance"],
        special_compute=payload["special_compute"],
        critical_info=payload["critical_info"],
    )


def _analysis_to_dict(analysis: RepoAnalysis | None) -> dict | None:
    if analysis is None:
        return None
    return {
        "purpose": {
            "summary": analysis.purpose.summary,
            "key_file_mentions": list(analysis.purpose.key_file_mentions),
            "source_readme": analysis.purpose.source_readme,
        },
        "selection": {
            "budget_bytes": analysis.selection.budget_bytes,
            "total_bytes": analysis.selection.total_bytes,
            "chosen": [
                {"classification": _classification_to_dict(c), "excerpt": excerpt}
                for c, excerpt in analysis.selection.chosen
            ],
        },
    }


def _analysis_from_dict(payload: dict | None) -> RepoAnalysis | None:
    if payload is None:
        return None
    purpose = RepoPurpose(
        summary=payload["purpose"]["summary"],
        key_file_mentions=list(payload["purpose"]["key_file_mentions"]),
        source_readme=payload["purpose"]["source_readme"],
    )
    selection = ContextSelection(
        chosen=[
            (_classification_from_dict(item["classification"]), item["excerpt"])
            for item in payload["selection"]["chosen"]
        ],
        total_bytes=payload["selection"]["total_bytes"],
        budget_bytes=payload["selection"]["budget_bytes"],
    )
    return RepoAnalysis(purpose=purpose, selection=selection)


def _prior_to_dict(
    prior: tuple[ExampleBundle, RunTrace, JudgeVerdict] | None,
) -> dict | None:
    if prior is None:
        return None
    bundle, trace, verdict = prior
    return {
        "bundle": _bundle_to_dict(bundle),
        "trace": _trace_to_dict(trace),
        "verdict": _verdict_to_dict(verdict),
    }


def _prior_from_dict(
    payload: dict | None,
) -> tuple[ExampleBundle, RunTrace, JudgeVerdict] | None:
    if payload is None:
        return None
    return (
        _bundle_from_dict(payload["bundle"]),
        _trace_from_dict(payload["trace"]),
        _verdict_from_dict(payload["verdict"]),
    )


def record_to_dict(
    record: DistillationRecord,
    *,
    analysis: RepoAnalysis | None = None,
    prior: tuple[ExampleBundle, RunTrace, JudgeVerdict] | None = None,
) -> dict:
    return {
        "schema": RECORD_SCHEMA,
        "repo": _descriptor_to_dict(record.repo),
        "snapshot_id": record.snapshot_id,
        "status": record.status,
        "fatal_error": record.fatal_error,
        "total_wall_time": record.total_wall_time,
        "iterations": [
            {
                "index": iteration.index,
                "bundle_digest": iteration.bundle_digest,
                "trace_summary": {
                    "exit_status": iteration.exit_status,
                    "wall_time": iteration.wall_time,
                    "truncated": iteration.truncated,
                },
                "verdict": _verdict_to_dict(iteration.verdict),
            }
            for iteration in record.iterations
        ],
        "ledger": _ledger_to_dict(record.ledger),
        "final_bundle": (
            _bundle_to_dict(record.final_bundle) if record.final_bundle else None
        ),
        "analysis": _analysis_to_dict(analysis),
        "prior": _prior_to_dict(prior) if record.status == STATUS_IN_PROGRESS else None,
    }


def record_from_dict(payload: dict) -> DistillationRecord:
    try:
        iterations = [
            IterationRecord(
                index=item["index"],
                bundle_digest=item["bundle_digest"],
                exit_status=item["trace_summary"]["exit_status"],
                wall_time=item["trace_summary"]["wall_time"],
                truncated=item["trace_summary"]["truncated"],
                verdict=_verdict_from_dict(item["verdict"]),
            )
            for item in payload["iterations"]
        ]
        return DistillationRecord(
            repo=_descriptor_from_dict(payload["repo"]),
            snapshot_id=payload["snapshot_id"],
            status=payload["status"],
            iterations=iterations,
            total_wall_time=payload["total_wall_time"],
            ledger=_ledger_from_dict(payload["ledger"]),
            final_bundle=(
                _bundle_from_dict(payload["final_bundle"])
                if payload["final_bundle"]
                else None
            ),
            fatal_error=payload.get("fatal_error"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptRecord(f"malformed record payload: {exc}") from exc


def save_record(
    record: DistillationRecord,
    path: Path,
    *,
    analysis: RepoAnalysis | None = None,
    prior: tuple[ExampleBundle, RunTrace, JudgeVerdict] | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = record_to_dict(record, analysis=analysis, prior=prior)
    temporary = path.with_suffix(path.suffix + ".tmp")
    temporary.write_text(json.dumps(payload, indent=2, sort_keys=True))
    temporary.replace(path)


def _load_record_payload(path: Path) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptRecord(f"cannot load record {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("schema") != RECORD_SCHEMA:
        raise CorruptRecord(f"{path}: not a {RECORD_SCHEMA} document")
    return payload


def load_record(path: Path) -> DistillationRecord:
    return record_from_dict(_load_record_payload(path))


def canonical_record_bytes(record: DistillationRecord) -> bytes:
    """Serialize for equality checks: wall-clock measurements are zeroed,
    everything else is byte-stable across replays of the same transcript."""
    payload = record_to_dict(record)
    payload.pop("analysis", None)
    payload.pop("prior", None)
    payload["total_wall_time"] = 0.0
    for iteration in payload["iterations"]:
        iteration["trace_summary"]["wall_time"] = 0.0
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
