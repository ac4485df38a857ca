from __future__ import annotations

import json
import re
from datetime import datetime
from pathlib import Path

import pytest

from repodistill.config import config_from_dict
from repodistill.gateway import (
    CostLedger,
    LlmGateway,
    PriceTable,
    PromptRequest,
    ScriptedBackend,
    as_usd,
)
from repodistill.sandbox import RunTrace

TEST_PRICES = {"test-model": (3.0, 15.0), "test-model-mini": (0.25, 1.25)}

EXAMPLE_CODE = """\
import datetime
import json
import os


def log(message):
    with open("run.log", "a") as handle:
        handle.write(datetime.datetime.now().isoformat() + "\\t" + message + "\\n")


log("starting demo")
print("demo ok")
os.makedirs("output", exist_ok=True)
with open(os.path.join("output", "summary.txt"), "w") as handle:
    handle.write("demo summary\\n")
with open("results.json", "w") as handle:
    json.dump({"status": "ok"}, handle)
log("finished demo")
"""

RUN_SCRIPT = "#!/bin/bash\nset -e\npython3 example.py\n"

MANIFEST = "# stdlib only\n"


def make_bundle_response(description: str = "Minimal demo example") -> str:
    metadata = json.dumps(
        {
            "description": description,
            "inclusion_criteria": ["demonstrating the core demo workflow"],
            "exclusion_criteria": [],
            "resources": {"cpu_cores": 1, "gpus": 0, "ram_mib": 256, "disk_mib": 64},
            "standalone": True,
        },
        indent=2,
        sort_keys=True,
    )
    return (
        "=== BEGIN EXAMPLE CODE ===\n"
        + EXAMPLE_CODE
        + "\n=== END EXAMPLE CODE ===\n"
        "=== BEGIN DEPENDENCY MANIFEST ===\n"
        + MANIFEST
        + "\n=== END DEPENDENCY MANIFEST ===\n"
        "=== BEGIN RUN SCRIPT ===\n"
        + RUN_SCRIPT
        + "\n=== END RUN SCRIPT ===\n"
        "=== BEGIN METADATA ===\n"
        + metadata
        + "\n=== END METADATA ==="
    )


def scripted_pipeline_llm(request: PromptRequest) -> str:
    """Deterministic stand-in for every pipeline role.

    A repository whose README mentions ALWAYS-FAIL propagates that marker
    through the purpose summary, and the scripted judge then rejects every
    iteration for it.
    """
    if request.role_tag == "purpose":
        body = request.user_text.split("README:\n", 1)[-1].strip()
        first_line = body.splitlines()[0] if body else "files only"
        return json.dumps(
            {"summary": f"Demo repository: {first_line}", "key_files": []}
        )
    if request.role_tag == "classify":
        match = re.search(r"^File path: (.+)$", request.user_text, re.MULTILINE)
        path = match.group(1) if match else "unknown"
        stem = Path(path).stem.lower()
        if stem == "readme":
            payload = {"coarse_class": "documentation", "fine_class": "readme", "relevance": 3}
        elif path.endswith(".py") and "example" in path:
            payload = {"coarse_class": "code", "fine_class": "existing_example", "relevance": 5}
        elif path.endswith(".py"):
            payload = {"coarse_class": "code", "fine_class": "library_code", "relevance": 4}
        elif path.endswith(".sh"):
            payload = {"coarse_class": "script", "fine_class": "run_entry", "relevance": 2}
        elif path.endswith(".md"):
            payload = {"coarse_class": "documentation", "fine_class": "instructions", "relevance": 2}
        else:
            payload = {"coarse_class": "other", "fine_class": None, "relevance": 1}
        payload.update({"special_compute": False, "critical_info": None})
        return json.dumps(payload)
    if request.role_tag in ("generate", "reflect"):
        match = re.search(
            r"^Repository purpose:\n(.+)$", request.user_text, re.MULTILINE
        )
        summary = match.group(1) if match else "a demo repository"
        return make_bundle_response(description=f"Example for {summary}")
    if request.role_tag == "judge":
        if "ALWAYS-FAIL" in request.user_text:
            return json.dumps(
                {
                    "success": False,
                    "issues": ["repository is marked always failing"],
                    "rationale": "scripted rejection",
                }
            )
        return json.dumps(
            {"success": True, "issues": [], "rationale": "scripted approval"}
        )
    raise AssertionError(f"scripted pipeline has no answer for role {request.role_tag}")


def build_fixture_repo(root: Path, name: str, *, failing: bool = False) -> Path:
    repo = root / name
    (repo / "src").mkdir(parents=True)
    (repo / "examples").mkdir()
    marker = " ALWAYS-FAIL" if failing else ""
    (repo / "README.md").write_text(
        f"{name}{marker}: toy numeric demo repository\n\n"
        "Run examples/demo.py to see the core workflow.\n"
    )
    (repo / "src" / "core.py").write_text(
        "def crunch(values):\n"
        '    """Sum of squares."""\n'
        "    return sum(v * v for v in values)\n"
    )
    (repo / "examples" / "demo.py").write_text(
        "from src.core import crunch\n\nprint(crunch([1, 2, 3]))\n"
    )
    (repo / "setup.sh").write_text("#!/bin/bash\necho setup\n")
    (repo / "data.bin").write_bytes(b"\x00\x01\x02binary")
    (repo / "notes.txt").write_text("assorted notes\n")
    return repo


def make_gateway(
    script=scripted_pipeline_llm, *, cost_cap=None, backend=None
) -> LlmGateway:
    return LlmGateway(
        backend if backend is not None else ScriptedBackend(script),
        PriceTable.from_mapping(TEST_PRICES),
        ledger=CostLedger(cost_cap=as_usd(cost_cap) if cost_cap is not None else None),
    )


def make_config(output_root: Path, **overrides):
    raw = {
        "models": {"default": "test-model", "classify": "test-model-mini"},
        "price_table": TEST_PRICES,
        "output_root": str(output_root),
        "sandbox": {
            "wall_clock_cap_seconds": 20.0,
            "cpu_cores": 2,
            "ram_mib": 1024,
            "disk_mib": 256,
            "network_allowed": True,
        },
    }
    raw.update(overrides)
    return config_from_dict(raw)


def make_trace(
    exit_status: int | str = 0,
    *,
    stdout_tail: str = "demo ok\n",
    stderr_tail: str = "",
    log_messages: tuple[str, ...] = ("starting demo", "finished demo"),
    results: dict | None = None,
    truncated: bool = False,
    wall_time: float = 0.5,
) -> RunTrace:
    return RunTrace(
        exit_status=exit_status,
        wall_time=wall_time,
        stdout_tail=stdout_tail,
        stderr_tail=stderr_tail,
        log_entries=[(datetime(2026, 1, 1, 12, 0, i), msg) for i, msg in enumerate(log_messages)],
        results_document=results if results is not None else {"status": "ok"},
        produced_files=[("summary.txt", 13)],
        truncated=truncated,
    )


@pytest.fixture
def gateway() -> LlmGateway:
    return make_gateway()


@pytest.fixture
def fixture_repo(tmp_path: Path) -> Path:
    return build_fixture_repo(tmp_path, "demo-repo")
