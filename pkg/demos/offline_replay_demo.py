#!/usr/bin/env python3
"""End-to-end offline demo: distill two toy repositories without any live LLM.

The completion backend is a small scripted function standing in for a model.
The demo records a transcript from it, then replays that transcript through
the full pipeline (classify -> generate -> sandbox -> judge -> library) twice
to show the replay path is deterministic, and finally queries the resulting
example library the way a downstream agent would.

Run:  python demos/offline_replay_demo.py
"""

from __future__ import annotations

import json
import re
import tempfile
from pathlib import Path

from repodistill.config import config_from_dict
from repodistill.evaluation import aggregate_stats, render_summary_table
from repodistill.gateway import PromptRequest, RecordingBackend, ScriptedBackend
from repodistill.library import ExampleLibrary, LibraryQuery
from repodistill.loop import canonical_record_bytes
from repodistill.pipeline import local_repo_descriptor, run_distill

PRICES = {"demo-model": (3.0, 15.0), "demo-model-mini": (0.25, 1.25)}

EXAMPLE_CODE = """\
import datetime
import json
import os


def log(message):
    with open("run.log", "a") as handle:
        handle.write(datetime.datetime.now().isoformat() + "\\t" + message + "\\n")


log("starting")
print("demo computation: sum of squares =", sum(v * v for v in range(10)))
os.makedirs("output", exist_ok=True)
with open("output/values.txt", "w") as handle:
    handle.write("0 1 4 9 16 25 36 49 64 81\\n")
with open("results.json", "w") as handle:
    json.dump({"status": "ok"}, handle)
log("finished")
"""


def scripted_model(request: PromptRequest) -> str:
    """A deterministic stand-in for every LLM role the pipeline uses."""
    if request.role_tag == "purpose":
        first_line = request.user_text.split("README:\n", 1)[-1].strip().splitlines()[0]
        return json.dumps({"summary": f"Toy repository: {first_line}", "key_files": []})
    if request.role_tag == "classify":
        match = re.search(r"^File path: (.+)$", request.user_text, re.MULTILINE)
        path = match.group(1) if match else ""
        if path.lower().startswith("readme"):
            payload = {"coarse_class": "documentation", "fine_class": "readme", "relevance": 3}
        elif path.endswith(".py"):
            payload = {"coarse_class": "code", "fine_class": "library_code", "relevance": 4}
        else:
            payload = {"coarse_class": "other", "fine_class": None, "relevance": 1}
        payload.update({"special_compute": False, "critical_info": None})
        return json.dumps(payload)
    if request.role_tag in ("generate", "reflect"):
        summary = re.search(r"^Repository purpose:\n(.+)$", request.user_text, re.MULTILINE)
        description = f"Runnable example for {summary.group(1) if summary else 'the repo'}"
        metadata = json.dumps(
            {
                "description": description,
                "inclusion_criteria": ["sum of squares demo", "numeric toy workflow"],
                "exclusion_criteria": ["not suitable for gpu benchmarking"],
                "resources": {"cpu_cores": 1, "gpus": 0, "ram_mib": 256, "disk_mib": 64},
                "standalone": True,
            },
            indent=2,
            sort_keys=True,
        )
        return (
            "=== BEGIN EXAMPLE CODE ===\n" + EXAMPLE_CODE + "\n=== END EXAMPLE CODE ===\n"
            "=== BEGIN DEPENDENCY MANIFEST ===\n# stdlib only\n=== END DEPENDENCY MANIFEST ===\n"
            "=== BEGIN RUN SCRIPT ===\n#!/bin/bash\nset -e\npython3 example.py\n=== END RUN SCRIPT ===\n"
            "=== BEGIN METADATA ===\n" + metadata + "\n=== END METADATA ==="
        )
    if request.role_tag == "judge":
        return json.dumps({"success": True, "issues": [], "rationale": "ran cleanly"})
    raise ValueError(f"demo model has no answer for role {request.role_tag}")


def build_toy_repo(root: Path, name: str) -> Path:
    repo = root / name
    (repo / "src").mkdir(parents=True)
    (repo / "README.md").write_text(f"{name}: computes sums of squares.\n")
    (repo / "src" / "squares.py").write_text(
        "def squares(n):\n    return [v * v for v in range(n)]\n"
    )
    return repo


def demo_config(output_root: Path, transcript: Path | None = None) -> dict:
    raw = {
        "models": {"default": "demo-model", "classify": "demo-model-mini"},
        "price_table": PRICES,
        "output_root": str(output_root),
        "max_iterations": 8,
        "sandbox": {"wall_clock_cap_seconds": 60.0, "cpu_cores": 2, "ram_mib": 1024,
                    "disk_mib": 256},
    }
    if transcript is not None:
        raw["replay_transcript"] = str(transcript)
    return raw


def main() -> None:
    base = Path(tempfile.mkdtemp(prefix="repodistill-demo-"))
    print(f"working under {base}")

    repos = [build_toy_repo(base / "src", name) for name in ("squares-lib", "squares-cli")]
    sources = [local_repo_descriptor(path) for path in repos]

    print("\n[1/4] recording a transcript from the scripted model ...")
    transcript = base / "transcript.jsonl"
    record_config = config_from_dict(demo_config(base / "record-out"))
    backend = RecordingBackend(ScriptedBackend(scripted_model), transcript)
    exit_code, _ = run_distill(record_config, sources, backend=backend)
    print(f"      recorded {sum(1 for _ in transcript.open())} exchanges, exit={exit_code}")

    print("\n[2/4] replaying the transcript twice ...")
    replays = []
    for tag in ("one", "two"):
        config = config_from_dict(demo_config(base / f"replay-{tag}", transcript))
        exit_code, records = run_distill(config, sources)
        assert exit_code == 0
        replays.append(records)
    matched = all(
        canonical_record_bytes(a) == canonical_record_bytes(b)
        for a, b in zip(*replays)
    )
    print(f"      replay runs byte-identical (canonical form): {matched}")

    print("\n[3/4] summary statistics over the replayed records:")
    print(render_summary_table(aggregate_stats(replays[0])))

    print("\n[4/4] querying the example library like a retrieval agent:")
    library = ExampleLibrary(base / "replay-one" / "library")
    hits = library.query(LibraryQuery(task_text="sum of squares toy workflow"))
    for entry in hits:
        print(f"      {entry.entry_id}: {entry.bundle.metadata.description}")
    excluded = library.query(LibraryQuery(task_text="gpu benchmarking"))
    print(f"      'gpu benchmarking' hits after exclusion filtering: {len(excluded)}")


if __name__ == "__main__":
    main()
