"""Repository purpose summarization and per-file relevance classification.

The classifier is purely prompt-based: each text file goes to the cheap-tier
model with a closed label schema, and anything the model cannot label validly
(after one repair attempt) falls back to ``other`` with relevance 1 so every
file is guaranteed exactly one classification. Selection is a deterministic
greedy pass over the scored files under a byte budget.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .errors import MalformedResponse
from .gateway import LlmGateway, PromptRequest
from .ingest import FileRecord

logger = logging.getLogger(__name__)

COARSE_CLASSES = ("code", "documentation", "script", "data", "other")

FINE_CLASSES: dict[str, tuple[str, ...]] = {
    "code": ("library_code", "existing_example", "entry_point", "test"),
    "documentation": ("readme", "instructions", "api_reference", "changelog"),
    "script": ("build_setup", "run_entry", "utility"),
}

DEFAULT_CONTEXT_BUDGET_BYTES = 256 * 1024

ELISION_MARKER = "\n...[content elided]...\n"
# Head/tail split when a large file must be excerpted to fit its allowance.
EXCERPT_HEAD_SHARE = 0.6

PURPOSE_SYSTEM_TEXT = (
    "You analyze a software repository to state its core purpose. "
    "Given its README (or a file tree when no README exists), reply with a "
    "single JSON object: {\"summary\": <one-paragraph purpose>, "
    "\"key_files\": [<paths the text calls out as important for setup or "
    "running the core code>]}. Reply with JSON only."
)

CLASSIFY_SYSTEM_TEXT = (
    "You classify one repository file for its usefulness when building a "
    "small runnable example of the repository's core functionality. Reply "
    "with a single JSON object with keys: coarse_class (one of code, "
    "documentation, script, data, other), fine_class (for code: "
    "library_code, existing_example, entry_point, test; for documentation: "
    "readme, instructions, api_reference, changelog; for script: "
    "build_setup, run_entry, utility; otherwise null), relevance (integer "
    "1-5, 5 = most useful), special_compute (true if the file mentions "
    "special computational requirements such as GPUs), critical_info "
    "(short string with any critical setup or configuration detail, else "
    "null). Reply with JSON only."
)


@dataclass
class RepoPurpose:
    summary: str
    key_file_mentions: list[str] = field(default_factory=list)
    source_readme: str | None = None


@dataclass(frozen=True)
class FileClassification:
    file: FileRecord
    coarse_class: str
    fine_class: str | None
    relevance: int
    special_compute: bool = False
    critical_info: str | None = None

    def __post_init__(self) -> None:
        if self.coarse_class not in COARSE_CLASSES:
            raise ValueError(f"illegal coarse_class: {self.coarse_class!r}")
        legal_fine = FINE_CLASSES.get(self.coarse_class)
        if legal_fine is None:
            if self.fine_class is not None:
                raise ValueError(
                    f"{self.coarse_class} files take no fine_class, "
                    f"got {self.fine_class!r}"
                )
        else:
            if self.fine_class not in legal_fine:
                raise ValueError(
                    f"illegal fine_class {self.fine_class!r} for {self.coarse_class}"
                )
        if not isinstance(self.relevance, int) or isinstance(self.relevance, bool):
            raise ValueError("relevance must be an integer")
        if not 1 <= self.relevance <= 5:
            raise ValueError(f"relevance out of range: {self.relevance}")


@dataclass
class ContextSelection:
    chosen: list[tuple[FileClassification, str]]
    total_bytes: int
    budget_bytes: int


def extract_json(text: str) -> dict:
    """Parse a JSON object out of a model response, tolerating code fences."""
    candidates = []
    stripped = text.strip()
    fence = re.search(r"```(?:json)?\s*(.*?)\s*```", text, flags=re.DOTALL)
    if fence:
        candidates.append(fence.group(1))
    candidates.append(stripped)
    start = stripped.find("{")
    if start > 0:
        candidates.append(stripped[start:])
    for candidate in candidates:
        try:
            parsed = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(parsed, dict):
            return parsed
    raise ValueError("no JSON object found in response")


def _path_depth(path: str) -> int:
    return path.count("/")


def locate_main_readme(files: Sequence[FileRecord]) -> FileRecord | None:
    """Pick the repository's main README: shallowest readme-stemmed path."""
    candidates = [
        record
        for record in files
        if Path(record.relative_path).stem.lower() == "readme"
    ]
    if not candidates:
        return None
    return min(
        candidates,
        key=lambda record: (
            _path_depth(record.relative_path),
            len(record.relative_path),
            record.relative_path,
        ),
    )


def _complete_structured(
    gateway: LlmGateway, request: PromptRequest, parse
) -> object:
    """One call plus one repair retry; raises MalformedResponse after that."""
    completion = gateway.complete(request)
    try:
        return parse(completion.text)
    except (ValueError, KeyError, TypeError) as first_error:
        repair = replace(
            request,
            user_text=(
                request.user_text
                + "\n\nYour previous reply could not be parsed "
                + f"({first_error}). Reply again with valid JSON only."
            ),
        )
        completion = gateway.complete(repair)
        try:
            return parse(completion.text)
        except (ValueError, KeyError, TypeError) as second_error:
            raise MalformedResponse(
                f"unparseable {request.role_tag} response: {second_error}"
            ) from second_error


def summarize_purpose(
    readme_text: str,
    gateway: LlmGateway,
    *,
    model_id: str,
    source_readme: str | None = None,
    max_output_tokens: int = 1024,
    temperature: float = 0.0,
) -> RepoPurpose:
    """Summarize the repository's core purpose from its README text."""
    if not readme_text:
        raise ValueError("readme_text must be non-empty")
    request = PromptRequest(
        role_tag="purpose",
        system_text=PURPOSE_SYSTEM_TEXT,
        user_text=f"README:\n{readme_text}",
        model_id=model_id,
        max_output_tokens=max_output_tokens,
        temperature=temperature,
    )

    def parse(text: str) -> RepoPurpose:
        payload = extract_json(text)
        summary = payload["summary"]
        if not isinstance(summary, str) or not summary.strip():
            raise ValueError("summary missing or empty")
        mentions = payload.get("key_files", [])
        if not isinstance(mentions, list):
            raise ValueError("key_files must be a list")
        return RepoPurpose(
            summary=summary.strip(),
            key_file_mentions=[str(m) for m in mentions],
            source_readme=source_readme,
        )

    return _complete_structured(gateway, request, parse)


def summarize_purpose_from_tree(
    files: Sequence[FileRecord],
    gateway: LlmGateway,
    *,
    model_id: str,
    max_output_tokens: int = 1024,
    temperature: float = 0.0,
) -> RepoPurpose:
    """Fallback purpose summary when the repository has no README."""
    listing = "\n".join(record.relative_path for record in files) or "(empty repository)"
    request = PromptRequest(
        role_tag="purpose",
        system_text=PURPOSE_SYSTEM_TEXT,
        user_text=f"No README present. File tree:\n{listing}",
        model_id=model_id,
        max_output_tokens=max_output_tokens,
        temperature=temperature,
    )

    def parse(text: str) -> RepoPurpose:
        payload = extract_json(text)
        summary = payload["summary"]
        if not isinstance(summary, str) or not summary.strip():
            raise ValueError("summary missing or empty")
        mentions = payload.get("key_files", [])
        if not isinstance(mentions, list):
            raise ValueError("key_files must be a list")
        return RepoPurpose(
            summary=summary.strip(),
            key_file_mentions=[str(m) for m in mentions],
            source_readme=None,
        )

    return _complete_structured(gateway, request, parse)


def resolve_mentions(
    purpose: RepoPurpose, files: Sequence[FileRecord]
) -> RepoPurpose:
    """Drop key-file mentions that do not resolve to enumerated paths."""
    known = {record.relative_path for record in files}
    kept = []
    for mention in purpose.key_file_mentions:
        normalized = mention.strip().lstrip("./")
        if normalized in known:
            kept.append(normalized)
        else:
            logger.info("dropping unresolvable README mention: %s", mention)
    purpose.key_file_mentions = kept
    return purpose


def _fallback_classification(file: FileRecord) -> FileClassification:
    return FileClassification(
        file=file, coarse_class="other", fine_class=None, relevance=1
    )


def _parse_classification(file: FileRecord, text: str) -> FileClassification:
    payload = extract_json(text)
    coarse = payload["coarse_class"]
    fine = payload.get("fine_class")
    if fine is not None:
        fine = str(fine)
    relevance = payload["relevance"]
    if isinstance(relevance, str) and relevance.isdigit():
        relevance = int(relevance)
    critical = payload.get("critical_info")
    if critical is not None:
        critical = str(critical)
    return FileClassification(
        file=file,
        coarse_class=str(coarse),
        fine_class=fine,
        relevance=relevance,
        special_compute=bool(payload.get("special_compute", False)),
        critical_info=critical,
    )


def classify_file(
    file: FileRecord,
    content: str,
    gateway: LlmGateway,
    *,
    model_id: str,
    purpose_summary: str | None = None,
    max_output_tokens: int = 512,
    temperature: float = 0.0,
    content_excerpt_bytes: int = 16 * 1024,
) -> FileClassification:
    """Classify one file; guaranteed to return a valid classification.

    Empty and binary files short-circuit without an LLM call. A schema
    violation gets one repair retry, after which the file falls back to
    ``other`` / relevance 1 with the diagnostic logged.
    """
    if file.byte_size == 0:
        return _fallback_classification(file)
    if not file.is_text:
        return FileClassification(
            file=file, coarse_class="data", fine_class=None, relevance=1
        )

    sections = []
    if purpose_summary:
        sections.append(f"Repository purpose: {purpose_summary}")
    excerpt = excerpt_text(content, content_excerpt_bytes)
    sections.append(f"File path: {file.relative_path}")
    sections.append(f"File contents:\n{excerpt}")
    request = PromptRequest(
        role_tag="classify",
        system_text=CLASSIFY_SYSTEM_TEXT,
        user_text="\n\n".join(sections),
        model_id=model_id,
        max_output_tokens=max_output_tokens,
        temperature=temperature,
    )
    try:
        return _complete_structured(
            gateway, request, lambda text: _parse_classification(file, text)
        )
    except MalformedResponse as exc:
        logger.warning(
            "classification fallback for %s: %s", file.relative_path, exc
        )
        return _fallback_classification(file)


def excerpt_text(text: str, allowance_bytes: int) -> str:
    """Fit text into a byte allowance, keeping head and tail when elided.

    The result always encodes to at most ``allowance_bytes`` UTF-8 bytes.
    """
    if allowance_bytes <= 0:
        return ""
    data = text.encode("utf-8")
    if len(data) <= allowance_bytes:
        return text
    marker = ELISION_MARKER.encode("utf-8")
    usable = allowance_bytes - len(marker)
    if usable < 2:
        return data[:allowance_bytes].decode("utf-8", errors="ignore")
    head_len = int(usable * EXCERPT_HEAD_SHARE)
    tail_len = usable - head_len
    head = data[:head_len].decode("utf-8", errors="ignore")
    tail = data[len(data) - tail_len:].decode("utf-8", errors="ignore")
    return head + ELISION_MARKER + tail


def _readme_classification(
    classifications: Sequence[FileClassification],
) -> FileClassification | None:
    candidates = [c for c in classifications if c.fine_class == "readme"]
    if not candidates:
        candidates = [
            c
            for c in classifications
            if Path(c.file.relative_path).stem.lower() == "readme"
        ]
    if not candidates:
        return None
    return min(
        candidates,
        key=lambda c: (
            _path_depth(c.file.relative_path),
            len(c.file.relative_path),
            c.file.relative_path,
        ),
    )


def select_context_files(
    classifications: Sequence[FileClassification],
    contents: Mapping[str, str],
    budget_bytes: int,
) -> ContextSelection:
    """Greedy relevance-descending selection under a byte budget.

    The README is always included first (excerpted if it alone exceeds the
    budget). After that, files are taken whole in (relevance desc, path)
    order; a file too large for the remaining budget is excerpted instead of
    skipped only when its relevance is 5. Deterministic in the input set,
    not its order.
    """
    if budget_bytes <= 0:
        raise ValueError("budget_bytes must be positive")

    def content_of(classification: FileClassification) -> str:
        return contents.get(classification.file.relative_path, "")

    chosen: list[tuple[FileClassification, str]] = []
    total = 0

    readme = _readme_classification(classifications)
    if readme is not None:
        text = excerpt_text(content_of(readme), budget_bytes)
        chosen.append((readme, text))
        total += len(text.encode("utf-8"))

    remaining_files = sorted(
        (c for c in classifications if c is not readme),
        key=lambda c: (-c.relevance, c.file.relative_path),
    )
    for classification in remaining_files:
        text = content_of(classification)
        size = len(text.encode("utf-8"))
        remaining = budget_bytes - total
        if size <= remaining:
            chosen.append((classification, text))
            total += size
        elif classification.relevance == 5 and remaining > 0:
            excerpt = excerpt_text(text, remaining)
            chosen.append((classification, excerpt))
            total += len(excerpt.encode("utf-8"))
    return ContextSelection(chosen=chosen, total_bytes=total, budget_bytes=budget_bytes)


# --- sidecar persistence (resume without reclassifying) ---------------------

def save_classifications(
    classifications: Sequence[FileClassification], path: str | Path
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for c in classifications:
            handle.write(
                json.dumps(
                    {
                        "relative_path": c.file.relative_path,
                        "byte_size": c.file.byte_size,
                        "content_digest": c.file.content_digest,
                        "is_text": c.file.is_text,
                        "coarse_class": c.coarse_class,
                        "fine_class": c.fine_class,
                        "relevance": c.relevance,
                        "special_compute": c.special_compute,
                        "critical_info": c.critical_info,
                    },
                    ensure_ascii=True,
                )
                + "\n"
            )


def load_classifications(path: str | Path) -> list[FileClassification]:
    results = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        payload = json.loads(line)
        record = FileRecord(
            relative_path=payload["relative_path"],
            byte_size=payload["byte_size"],
            content_digest=payload["content_digest"],
            is_text=payload["is_text"],
        )
        results.append(
            FileClassification(
                file=record,
                coarse_class=payload["coarse_class"],
                fine_class=payload["fine_class"],
                relevance=payload["relevance"],
                special_compute=payload["special_compute"],
                critical_info=payload["critical_info"],
            )
        )
    return results
