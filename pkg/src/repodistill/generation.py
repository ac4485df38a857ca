"""Example bundle generation: prompt assembly and response parsing.

A bundle is the four generated components: the executable example script,
its pinned dependency manifest, a shell run script, and structured metadata.
The wire format uses explicit BEGIN/END sentinels per section so parsing is
deterministic and order-insensitive; :func:`parse_bundle` is also the
validator, so any bundle it accepts satisfies the bundle invariants.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING

from .analysis import ContextSelection, RepoPurpose
from .errors import (
    BundleContractError,
    MalformedResponse,
    MetadataParseError,
    MissingSection,
    PromptOverflow,
)
from .gateway import LlmGateway, PromptRequest

if TYPE_CHECKING:
    from .loop import JudgeVerdict
    from .sandbox import RunTrace

logger = logging.getLogger(__name__)

# On-disk bundle layout; fixed names shared with the sandbox and the library.
EXAMPLE_FILENAME = "example.py"
MANIFEST_FILENAME = "requirements.txt"
RUN_SCRIPT_FILENAME = "run.sh"
METADATA_FILENAME = "metadata.json"

SECTION_NAMES = ("EXAMPLE CODE", "DEPENDENCY MANIFEST", "RUN SCRIPT", "METADATA")

# Last log lines carried into a reflection prompt.
REFLECTION_LOG_LINES = 200

_REQUIREMENT_RE = re.compile(
    r"^[A-Za-z0-9][A-Za-z0-9._-]*(\[[A-Za-z0-9,_. -]+\])?\s*"
    r"([<>=!~;@].*)?$"
)


@dataclass(frozen=True)
class ResourceSpec:
    cpu_cores: int = 1
    gpus: int = 0
    ram_mib: int = 1024
    disk_mib: int = 1024

    def __post_init__(self) -> None:
        for name in ("cpu_cores", "ram_mib", "disk_mib"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.gpus < 0:
            raise ValueError("gpus must be non-negative")


@dataclass(frozen=True)
class BundleMetadata:
    description: str
    inclusion_criteria: tuple[str, ...] = ()
    exclusion_criteria: tuple[str, ...] = ()
    resources: ResourceSpec = ResourceSpec()
    standalone: bool = True

    def __post_init__(self) -> None:
        if not self.description.strip():
            raise ValueError("description must be non-empty")


@dataclass(frozen=True)
class ExampleBundle:
    example_code: str
    dependency_manifest: str
    run_script: str
    metadata: BundleMetadata


@dataclass(frozen=True)
class GenerationProfile:
    """Target ecosystem for generated bundles (default: Python script +
    pip requirements + bash run script)."""

    interpreter: str = "python3"
    example_filename: str = EXAMPLE_FILENAME
    manifest_filename: str = MANIFEST_FILENAME
    environment_hint: str = (
        "set up any needed environment (e.g. `pip install -r requirements.txt` "
        "into the current environment) and then run the example"
    )


DEFAULT_PROFILE = GenerationProfile()


def _output_contract(profile: GenerationProfile) -> str:
    # Keep in sync with sandbox filename constants; they are injected so the
    # generated code writes instrumentation where the runner harvests it.
    from .sandbox import LOG_FILENAME, OUTPUT_DIRNAME, RESULTS_FILENAME

    return (
        "Produce EXACTLY four sections, each wrapped in its own sentinel "
        "lines, in any order:\n"
        "=== BEGIN EXAMPLE CODE ===\n<contents of "
        f"{profile.example_filename}: a self-contained, non-interactive "
        "script demonstrating the repository's core functionality>\n"
        "=== END EXAMPLE CODE ===\n"
        "=== BEGIN DEPENDENCY MANIFEST ===\n<contents of "
        f"{profile.manifest_filename}: one pinned requirement per line>\n"
        "=== END DEPENDENCY MANIFEST ===\n"
        "=== BEGIN RUN SCRIPT ===\n<bash script that will "
        f"{profile.environment_hint}; it must invoke "
        f"{profile.interpreter} {profile.example_filename}>\n"
        "=== END RUN SCRIPT ===\n"
        "=== BEGIN METADATA ===\n<JSON object with keys: description, "
        "inclusion_criteria (list), exclusion_criteria (list), resources "
        "(object with cpu_cores, gpus, ram_mib, disk_mib), standalone "
        "(bool)>\n"
        "=== END METADATA ===\n"
        "\nInstrumentation requirements for the example code:\n"
        f"- append one 'ISO-8601-timestamp<TAB>message' line to {LOG_FILENAME} "
        "for each major operation\n"
        f"- write an overall JSON results file to {RESULTS_FILENAME} with a "
        "top-level \"status\" key\n"
        f"- write any produced files (figures, data) under {OUTPUT_DIRNAME}/; "
        "generate figures or other human-readable demonstrations where "
        "sensible\n"
        "- the repository's files are available read-only at the path in the "
        "REPO_DIR environment variable\n"
    )


def build_generation_prompt(
    purpose: RepoPurpose,
    selection: ContextSelection,
    prior: "tuple[ExampleBundle, RunTrace, JudgeVerdict] | None" = None,
    *,
    model_id: str,
    profile: GenerationProfile = DEFAULT_PROFILE,
    max_output_tokens: int = 8192,
    temperature: float = 0.2,
    max_prompt_bytes: int | None = None,
) -> PromptRequest:
    """Assemble the generation (or, with ``prior``, reflection) prompt.

    The prompt is a pure function of its inputs: identical arguments yield
    byte-identical prompts, which is what makes transcript replay work.
    """
    if not selection.chosen:
        raise ValueError("selection must contain at least one file")

    parts: list[str] = []
    if prior is not None:
        prior_bundle, prior_trace, prior_verdict = prior
        log_lines = [entry[1] for entry in prior_trace.log_entries][-REFLECTION_LOG_LINES:]
        parts.append(
            "The previous attempt did not run successfully. Review the "
            "failure evidence below, then regenerate the full four-section "
            "output with the problems fixed."
        )
        parts.append("Previous example code:\n" + prior_bundle.example_code)
        parts.append(
            "Previous run script:\n" + prior_bundle.run_script
        )
        parts.append(f"Exit status: {prior_trace.exit_status}")
        if log_lines:
            parts.append("Execution log (tail):\n" + "\n".join(log_lines))
        if prior_trace.stdout_tail:
            parts.append("stdout (tail):\n" + prior_trace.stdout_tail)
        if prior_trace.stderr_tail:
            parts.append("stderr (tail):\n" + prior_trace.stderr_tail)
        if prior_verdict.issues:
            parts.append(
                "Judge issues:\n" + "\n".join(f"- {issue}" for issue in prior_verdict.issues)
            )

    parts.append("Repository purpose:\n" + purpose.summary)
    if purpose.key_file_mentions:
        parts.append(
            "Files the README calls out:\n"
            + "\n".join(f"- {m}" for m in purpose.key_file_mentions)
        )
    file_blocks = []
    for classification, content in selection.chosen:
        path = classification.file.relative_path
        file_blocks.append(f"### FILE: {path}\n{content}\n### END FILE: {path}")
    parts.append("Selected repository files:\n" + "\n\n".join(file_blocks))

    system_text = (
        "You build one minimal, self-contained, executable example that "
        "demonstrates the core functionality of a code repository.\n\n"
        + _output_contract(profile)
    )
    user_text = "\n\n".join(parts)
    if max_prompt_bytes is not None:
        size = len(system_text.encode("utf-8")) + len(user_text.encode("utf-8"))
        if size > max_prompt_bytes:
            raise PromptOverflow(
                f"assembled prompt is {size} bytes (limit {max_prompt_bytes})"
            )
    return PromptRequest(
        role_tag="reflect" if prior is not None else "generate",
        system_text=system_text,
        user_text=user_text,
        model_id=model_id,
        max_output_tokens=max_output_tokens,
        temperature=temperature,
    )


def _section_pattern(name: str) -> re.Pattern[str]:
    return re.compile(
        rf"^=== BEGIN {re.escape(name)} ===\n(.*?)\n=== END {re.escape(name)} ===$",
        re.DOTALL | re.MULTILINE,
    )


def _parse_metadata(raw: str) -> BundleMetadata:
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MetadataParseError(f"metadata is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise MetadataParseError("metadata must be a JSON object")

    known = {
        "description",
        "inclusion_criteria",
        "exclusion_criteria",
        "resources",
        "standalone",
    }
    for key in payload.keys() - known:
        logger.info("ignoring unknown metadata key: %s", key)

    def str_list(key: str) -> tuple[str, ...]:
        value = payload.get(key, [])
        if not isinstance(value, list):
            raise MetadataParseError(f"{key} must be a list")
        return tuple(str(item) for item in value)

    resources_raw = payload.get("resources", {})
    if not isinstance(resources_raw, dict):
        raise MetadataParseError("resources must be an object")
    try:
        resources = ResourceSpec(
            cpu_cores=int(resources_raw.get("cpu_cores", 1)),
            gpus=int(resources_raw.get("gpus", 0)),
            ram_mib=int(resources_raw.get("ram_mib", 1024)),
            disk_mib=int(resources_raw.get("disk_mib", 1024)),
        )
        description = payload.get("description", "")
        if not isinstance(description, str):
            raise ValueError("description must be a string")
        return BundleMetadata(
            description=description,
            inclusion_criteria=str_list("inclusion_criteria"),
            exclusion_criteria=str_list("exclusion_criteria"),
            resources=resources,
            standalone=bool(payload.get("standalone", True)),
        )
    except (TypeError, ValueError) as exc:
        raise MetadataParseError(str(exc)) from exc


def validate_manifest(manifest: str) -> None:
    for lineno, line in enumerate(manifest.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if not _REQUIREMENT_RE.match(stripped):
            raise BundleContractError(
                f"dependency manifest line {lineno} is not a requirement: {stripped!r}"
            )


def parse_bundle(
    response_text: str, *, profile: GenerationProfile = DEFAULT_PROFILE
) -> ExampleBundle:
    """Extract and validate the four sentinel-delimited bundle sections."""
    sections: dict[str, str] = {}
    for name in SECTION_NAMES:
        match = _section_pattern(name).search(response_text)
        if match is None or not match.group(1).strip():
            raise MissingSection(name.lower())
        sections[name] = match.group(1)

    metadata = _parse_metadata(sections["METADATA"])
    manifest = sections["DEPENDENCY MANIFEST"]
    validate_manifest(manifest)
    run_script = sections["RUN SCRIPT"]
    if profile.example_filename not in run_script:
        raise BundleContractError(
            f"run script does not reference {profile.example_filename}"
        )
    return ExampleBundle(
        example_code=sections["EXAMPLE CODE"],
        dependency_manifest=manifest,
        run_script=run_script,
        metadata=metadata,
    )


def render_bundle(bundle: ExampleBundle) -> str:
    """Serialize a bundle back into the wire format (parse round-trips)."""
    metadata_json = json.dumps(
        {
            "description": bundle.metadata.description,
            "inclusion_criteria": list(bundle.metadata.inclusion_criteria),
            "exclusion_criteria": list(bundle.metadata.exclusion_criteria),
            "resources": {
                "cpu_cores": bundle.metadata.resources.cpu_cores,
                "gpus": bundle.metadata.resources.gpus,
                "ram_mib": bundle.metadata.resources.ram_mib,
                "disk_mib": bundle.metadata.resources.disk_mib,
            },
            "standalone": bundle.metadata.standalone,
        },
        indent=2,
        sort_keys=True,
    )
    blocks = [
        ("EXAMPLE CODE", bundle.example_code),
        ("DEPENDENCY MANIFEST", bundle.dependency_manifest),
        ("RUN SCRIPT", bundle.run_script),
        ("METADATA", metadata_json),
    ]
    return "\n".join(
        f"=== BEGIN {name} ===\n{content}\n=== END {name} ==="
        for name, content in blocks
    )


def bundle_digest(bundle: ExampleBundle) -> str:
    return hashlib.sha256(render_bundle(bundle).encode("utf-8")).hexdigest()


def generate_bundle(request: PromptRequest, gateway: LlmGateway) -> ExampleBundle:
    """One gateway call, parsed into a bundle, with one repair retry."""
    if request.role_tag not in ("generate", "reflect"):
        raise ValueError("generate_bundle takes generate/reflect requests only")
    completion = gateway.complete(request)
    try:
        return parse_bundle(completion.text)
    except (MissingSection, MetadataParseError, BundleContractError) as first_error:
        logger.info("bundle parse failed, issuing repair call: %s", first_error)
        repair = replace(
            request,
            user_text=(
                request.user_text
                + "\n\nYour previous reply could not be parsed: "
                + f"{first_error}. Resend ALL four sections exactly per the "
                + "output contract."
            ),
        )
        completion = gateway.complete(repair)
        try:
            return parse_bundle(completion.text)
        except (MissingSection, MetadataParseError, BundleContractError) as second_error:
            raise MalformedResponse(
                f"bundle unparseable after repair: {second_error}"
            ) from second_error


def write_bundle_dir(bundle: ExampleBundle, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / EXAMPLE_FILENAME).write_text(bundle.example_code)
    (directory / MANIFEST_FILENAME).write_text(bundle.dependency_manifest)
    (directory / RUN_SCRIPT_FILENAME).write_text(bundle.run_script)
    (directory / METADATA_FILENAME).write_text(
        json.dumps(metadata_to_dict(bundle.metadata), indent=2, sort_keys=True)
    )


def read_bundle_dir(directory: str | Path) -> ExampleBundle:
    directory = Path(directory)
    metadata = metadata_from_dict(
        json.loads((directory / METADATA_FILENAME).read_text())
    )
    return ExampleBundle(
        example_code=(directory / EXAMPLE_FILENAME).read_text(),
        dependency_manifest=(directory / MANIFEST_FILENAME).read_text(),
        run_script=(directory / RUN_SCRIPT_FILENAME).read_text(),
        metadata=metadata,
    )


def metadata_to_dict(metadata: BundleMetadata) -> dict:
    return {
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


def metadata_from_dict(payload: dict) -> BundleMetadata:
    resources = payload.get("resources", {})
    return BundleMetadata(
        description=payload["description"],
        inclusion_criteria=tuple(payload.get("inclusion_criteria", [])),
        exclusion_criteria=tuple(payload.get("exclusion_criteria", [])),
        resources=ResourceSpec(
            cpu_cores=resources.get("cpu_cores", 1),
            gpus=resources.get("gpus", 0),
            ram_mib=resources.get("ram_mib", 1024),
            disk_mib=resources.get("disk_mib", 1024),
        ),
        standalone=payload.get("standalone", True),
    )
