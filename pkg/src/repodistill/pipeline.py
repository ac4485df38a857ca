"""Batch orchestration: ingest -> analyze -> distill -> store, per repository.

Repositories run on a bounded worker pool; each worker owns its sandbox,
ledger, and record. Progress is streamed as one structured JSON line per
stage on stderr so long runs are observable without a UI. Re-running over a
partially completed output root skips terminal records and resumes partial
ones.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import PipelineConfig
from .errors import ConfigError, RepodistillError
from .gateway import (
    CompletionBackend,
    CostLedger,
    HttpBackend,
    LlmGateway,
    PriceTable,
    RecordingBackend,
    format_usd,
    replay_store,
)
from .ingest import (
    RepoDescriptor,
    WorkingCopy,
    enumerate_files,
    fetch_repo,
    snapshot_digest,
)
from .library import ExampleLibrary, slugify
from .loop import (
    STATUS_FAILED_FATAL,
    STATUS_SUCCESS,
    TERMINAL_STATUSES,
    DistillationRecord,
    _load_record_payload,
    distill,
    record_from_dict,
    resume,
)

logger = logging.getLogger(__name__)

_emit_lock = threading.Lock()


def _emit(event: str, **fields) -> None:
    line = json.dumps({"event": event, **fields}, ensure_ascii=True, sort_keys=True)
    with _emit_lock:
        print(line, file=sys.stderr, flush=True)


def build_backend(config: PipelineConfig) -> CompletionBackend:
    if config.replay_transcript is not None:
        backend: CompletionBackend = replay_store(config.replay_transcript)
    elif config.provider_base_url is not None:
        backend = HttpBackend(config.provider_base_url, api_key_env=config.api_key_env)
    else:
        raise ConfigError("configure replay_transcript or provider_base_url")
    if config.record_transcript is not None:
        backend = RecordingBackend(backend, config.record_transcript)
    return backend


def output_paths(config: PipelineConfig) -> dict[str, Path]:
    root = config.output_root
    return {
        "records": root / "records",
        "sidecars": root / "sidecars",
        "work": root / "work",
        "library": root / "library",
    }


def _working_copy(
    descriptor: RepoDescriptor, work_dir: Path, *, max_bytes: int | None
) -> WorkingCopy:
    repo_dir = work_dir / "repo"
    if repo_dir.is_dir() and any(repo_dir.iterdir()):
        # Reuse the fetched copy on resume; the snapshot id is recomputed
        # from the file listing so a changed copy is detectable.
        copy = WorkingCopy(root_path=repo_dir, descriptor=descriptor, snapshot_id="")
        copy.snapshot_id = snapshot_digest(enumerate_files(copy))
        return copy
    return fetch_repo(descriptor, repo_dir, max_bytes=max_bytes)


def distill_one(
    descriptor: RepoDescriptor,
    config: PipelineConfig,
    backend: CompletionBackend,
    prices: PriceTable,
    library: ExampleLibrary,
    *,
    max_repo_bytes: int | None = None,
    sandbox_backend=None,
) -> DistillationRecord:
    paths = output_paths(config)
    slug = slugify(descriptor.name)
    record_path = paths["records"] / f"{slug}.json"
    sidecar_path = paths["sidecars"] / f"{slug}.classifications.jsonl"
    work_dir = paths["work"] / slug
    work_dir.mkdir(parents=True, exist_ok=True)
    os.chmod(work_dir, 0o711)
    workspace_root = work_dir / "ws"
    workspace_root.mkdir(exist_ok=True)
    os.chmod(workspace_root, 0o711)

    existing = None
    if record_path.is_file():
        existing = record_from_dict(_load_record_payload(record_path))
    if existing is not None and existing.status in TERMINAL_STATUSES:
        _emit("skip", repo=descriptor.name, status=existing.status)
        return existing

    _emit("fetch", repo=descriptor.name)
    copy = _working_copy(descriptor, work_dir, max_bytes=max_repo_bytes)

    gateway = LlmGateway(
        backend,
        prices,
        ledger=CostLedger(cost_cap=config.cost_cap_usd),
        max_retries=config.max_retries,
    )
    _emit("distill", repo=descriptor.name, snapshot=copy.snapshot_id[:12])
    if existing is not None:
        record = resume(
            record_path,
            copy,
            config,
            gateway,
            sandbox_backend=sandbox_backend,
            workspace_root=workspace_root,
        )
    else:
        record = distill(
            copy,
            config,
            gateway,
            sandbox_backend=sandbox_backend,
            record_path=record_path,
            sidecar_path=sidecar_path,
            workspace_root=workspace_root,
        )
    _emit(
        "done",
        repo=descriptor.name,
        status=record.status,
        iterations=len(record.iterations),
        cost_usd=format_usd(record.ledger.total),
        wall_seconds=round(record.total_wall_time, 1),
    )
    if record.status == STATUS_SUCCESS:
        entry = library.store(record)
        _emit("stored", repo=descriptor.name, entry_id=entry.entry_id)
    return record


def run_distill(
    config: PipelineConfig,
    repo_sources: list[RepoDescriptor],
    *,
    backend: CompletionBackend | None = None,
    max_repo_bytes: int | None = None,
    sandbox_backend=None,
) -> tuple[int, list[DistillationRecord]]:
    """Distill every source repository; returns (exit_code, records)."""
    if not repo_sources:
        raise ConfigError("no repositories to distill")
    config.validate()
    if backend is None:
        backend = build_backend(config)
    prices = PriceTable.from_mapping(config.price_table)
    paths = output_paths(config)
    for path in paths.values():
        path.mkdir(parents=True, exist_ok=True)
    library = ExampleLibrary(paths["library"])

    def worker(descriptor: RepoDescriptor) -> DistillationRecord:
        try:
            return distill_one(
                descriptor,
                config,
                backend,
                prices,
                library,
                max_repo_bytes=max_repo_bytes,
                sandbox_backend=sandbox_backend,
            )
        except RepodistillError as exc:
            logger.error("repo %s failed fatally: %s", descriptor.name, exc)
            _emit("fatal", repo=descriptor.name, error=str(exc))
            record = DistillationRecord(
                repo=descriptor,
                snapshot_id="",
                status=STATUS_FAILED_FATAL,
                iterations=[],
                total_wall_time=0.0,
                ledger=CostLedger(),
                fatal_error=f"{type(exc).__name__}: {exc}",
            )
            from .loop import save_record

            save_record(
                record, paths["records"] / f"{slugify(descriptor.name)}.json"
            )
            return record

    if config.parallel_repos > 1 and len(repo_sources) > 1:
        with ThreadPoolExecutor(max_workers=config.parallel_repos) as pool:
            records = list(pool.map(worker, repo_sources))
    else:
        records = [worker(descriptor) for descriptor in repo_sources]

    exit_code = 0 if all(r.status != STATUS_FAILED_FATAL for r in records) else 1
    return exit_code, records


def local_repo_descriptor(path: str | Path) -> RepoDescriptor:
    """Descriptor for an explicit local repository directory."""
    resolved = Path(path).resolve()
    return RepoDescriptor(
        host_url=f"file://{resolved}",
        name=resolved.name,
        license_id="unknown",
    )
