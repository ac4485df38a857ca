"""The vetted example library consumed by downstream Code-RAG agents.

Only successful distillations are admitted. Storage is a plain directory
tree (one bundle directory per entry plus a single JSON index) so a
discovery agent can read example files directly. Retrieval is deliberately
lexical: token-overlap scoring against the description and inclusion
criteria, with an exclusion-phrase veto, keeps ranking deterministic. The
scorer is a constructor hook so an embedding backend can replace it later.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from .errors import DuplicateEntry
from .generation import ExampleBundle, bundle_digest, read_bundle_dir, write_bundle_dir
from .loop import STATUS_SUCCESS, DistillationRecord

logger = logging.getLogger(__name__)

INDEX_FILENAME = "index.json"
ENTRIES_DIRNAME = "entries"
PROVENANCE_FILENAME = "provenance.json"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass
class LibraryEntry:
    entry_id: str
    bundle: ExampleBundle
    repo_name: str
    host_url: str
    snapshot_id: str
    status: str
    iterations: int
    created_at: str


@dataclass(frozen=True)
class LibraryQuery:
    task_text: str
    required_capabilities: tuple[str, ...] = ()
    max_results: int = 5

    def __post_init__(self) -> None:
        if not self.task_text.strip():
            raise ValueError("task_text must be non-empty")
        if self.max_results < 1:
            raise ValueError("max_results must be positive")


def _tokenize(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


def _normalize_phrase(text: str) -> str:
    return " ".join(text.lower().split())


def overlap_score(task_text: str, entry: LibraryEntry) -> int:
    """Token overlap between the task and the entry's description plus
    inclusion criteria (the default, deterministic scorer)."""
    haystack = " ".join(
        (entry.bundle.metadata.description, *entry.bundle.metadata.inclusion_criteria)
    )
    return len(_tokenize(task_text) & _tokenize(haystack))


def excluded_by_criteria(task_text: str, entry: LibraryEntry) -> bool:
    """Case-insensitive phrase veto: the task hitting an exclusion phrase
    (in either containment direction) removes the entry."""
    task = _normalize_phrase(task_text)
    for criterion in entry.bundle.metadata.exclusion_criteria:
        phrase = _normalize_phrase(criterion)
        if not phrase:
            continue
        if phrase in task or task in phrase:
            return True
    return False


def slugify(name: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9._-]+", "-", name).strip("-")
    return cleaned or "repo"


def entry_id_for(repo_name: str, snapshot_id: str) -> str:
    return f"{slugify(repo_name)}--{snapshot_id[:12]}"


class ExampleLibrary:
    """Filesystem-backed library with a single-writer, atomically replaced
    index; concurrent readers are safe."""

    def __init__(
        self,
        root: str | Path,
        *,
        scorer: Callable[[str, LibraryEntry], float] = overlap_score,
    ):
        self.root = Path(root)
        self.entries_dir = self.root / ENTRIES_DIRNAME
        self.index_path = self.root / INDEX_FILENAME
        self._scorer = scorer
        self._write_lock = threading.Lock()
        self.root.mkdir(parents=True, exist_ok=True)
        self.entries_dir.mkdir(exist_ok=True)
        if not self.index_path.exists():
            self._write_index({})

    # -- index ---------------------------------------------------------------

    def _read_index(self) -> dict:
        return json.loads(self.index_path.read_text())

    def _write_index(self, index: dict) -> None:
        temporary = self.index_path.with_suffix(".tmp")
        temporary.write_text(json.dumps(index, indent=2, sort_keys=True))
        os.replace(temporary, self.index_path)

    def _entry_from_index(self, entry_id: str, meta: dict) -> LibraryEntry:
        bundle = read_bundle_dir(self.entries_dir / entry_id)
        return LibraryEntry(
            entry_id=entry_id,
            bundle=bundle,
            repo_name=meta["repo_name"],
            host_url=meta["host_url"],
            snapshot_id=meta["snapshot_id"],
            status=meta["status"],
            iterations=meta["iterations"],
            created_at=meta["created_at"],
        )

    # -- operations ----------------------------------------------------------

    def store(self, record: DistillationRecord) -> LibraryEntry:
        """Admit one successful distillation; idempotent per (repo, snapshot)."""
        if record.status != STATUS_SUCCESS or record.final_bundle is None:
            raise ValueError(
                f"only successful records are admitted (got {record.status})"
            )
        entry_id = entry_id_for(record.repo.name, record.snapshot_id)
        digest = bundle_digest(record.final_bundle)
        with self._write_lock:
            index = self._read_index()
            existing = index.get(entry_id)
            if existing is not None:
                if existing["bundle_digest"] != digest:
                    raise DuplicateEntry(
                        f"entry {entry_id} already stored with a different bundle"
                    )
                return self._entry_from_index(entry_id, existing)

            entry_dir = self.entries_dir / entry_id
            write_bundle_dir(record.final_bundle, entry_dir)
            created_at = datetime.now(timezone.utc).isoformat()
            provenance = {
                "repo_name": record.repo.name,
                "host_url": record.repo.host_url,
                "license_id": record.repo.license_id,
                "snapshot_id": record.snapshot_id,
                "status": record.status,
                "iterations": len(record.iterations),
                "created_at": created_at,
            }
            (entry_dir / PROVENANCE_FILENAME).write_text(
                json.dumps(provenance, indent=2, sort_keys=True)
            )
            index[entry_id] = {
                "repo_name": record.repo.name,
                "host_url": record.repo.host_url,
                "snapshot_id": record.snapshot_id,
                "status": record.status,
                "iterations": len(record.iterations),
                "created_at": created_at,
                "bundle_digest": digest,
            }
            self._write_index(index)
        return self._entry_from_index(entry_id, index[entry_id])

    def get(self, entry_id: str) -> LibraryEntry | None:
        meta = self._read_index().get(entry_id)
        if meta is None:
            return None
        return self._entry_from_index(entry_id, meta)

    def entries(self) -> list[LibraryEntry]:
        index = self._read_index()
        return [self._entry_from_index(eid, meta) for eid, meta in sorted(index.items())]

    def query(self, q: LibraryQuery) -> list[LibraryEntry]:
        """Rank entries for a task; exclusion hits are removed entirely."""
        survivors = []
        for entry in self.entries():
            if excluded_by_criteria(q.task_text, entry):
                continue
            haystack = " ".join(
                (
                    entry.bundle.metadata.description,
                    *entry.bundle.metadata.inclusion_criteria,
                )
            )
            entry_tokens = _tokenize(haystack)
            if q.required_capabilities and not all(
                _tokenize(capability) <= entry_tokens
                for capability in q.required_capabilities
            ):
                continue
            survivors.append((self._scorer(q.task_text, entry), entry))
        survivors.sort(key=lambda pair: (-pair[0], pair[1].entry_id))
        return [entry for _score, entry in survivors[: q.max_results]]

    def export_manifest(self) -> dict:
        """Single document describing every entry; the drop-in example index
        for a downstream discovery agent."""
        rows = []
        for entry in self.entries():
            metadata = entry.bundle.metadata
            rows.append(
                {
                    "entry_id": entry.entry_id,
                    "description": metadata.description,
                    "inclusion_criteria": list(metadata.inclusion_criteria),
                    "exclusion_criteria": list(metadata.exclusion_criteria),
                    "resources": {
                        "cpu_cores": metadata.resources.cpu_cores,
                        "gpus": metadata.resources.gpus,
                        "ram_mib": metadata.resources.ram_mib,
                        "disk_mib": metadata.resources.disk_mib,
                    },
                    "standalone": metadata.standalone,
                }
            )
        return {"schema": "example-library-manifest-v1", "entries": rows}


def write_manifest(library: ExampleLibrary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(library.export_manifest(), indent=2, sort_keys=True))


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
