"""Pipeline configuration: one checked-in file plus flag overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError
from .gateway import ROLE_TAGS, as_usd
from .sandbox import SandboxLimits

# Per-role generation knobs. The source material never states temperatures,
# token limits, or retry policies, so these are plain documented defaults.
DEFAULT_MAX_OUTPUT_TOKENS: dict[str, int] = {
    "purpose": 1024,
    "classify": 512,
    "generate": 8192,
    "reflect": 8192,
    "judge": 1024,
    "ab_judge": 2048,
}
DEFAULT_TEMPERATURE: dict[str, float] = {
    "purpose": 0.0,
    "classify": 0.0,
    "generate": 0.2,
    "reflect": 0.2,
    "judge": 0.0,
    "ab_judge": 0.0,
}

DEFAULT_COST_CAP_USD = Fraction(5)
DEFAULT_MAX_ITERATIONS = 8
DEFAULT_CONTEXT_BUDGET_BYTES = 256 * 1024


@dataclass
class PipelineConfig:
    models: dict[str, str] = field(default_factory=dict)
    price_table: dict = field(default_factory=dict)
    context_budget_bytes: int = DEFAULT_CONTEXT_BUDGET_BYTES
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    cost_cap_usd: Fraction = DEFAULT_COST_CAP_USD
    sandbox: SandboxLimits = field(default_factory=SandboxLimits)
    machine_gpus: int = 0
    parallel_repos: int = 1
    classify_fanout: int = 1
    output_root: Path = Path("repodistill-out")
    replay_transcript: Path | None = None
    record_transcript: Path | None = None
    provider_base_url: str | None = None
    api_key_env: str = "REPODISTILL_API_KEY"
    max_prompt_bytes: int | None = None
    max_retries: int = 2
    keep_workspaces: bool = False

    def model_for(self, role: str) -> str:
        try:
            return self.models.get(role) or self.models["default"]
        except KeyError:
            raise ConfigError("models must define a 'default' entry") from None

    def max_output_tokens_for(self, role: str) -> int:
        return DEFAULT_MAX_OUTPUT_TOKENS[role]

    def temperature_for(self, role: str) -> float:
        return DEFAULT_TEMPERATURE[role]

    def validate(self) -> "PipelineConfig":
        if "default" not in self.models:
            raise ConfigError("models must define a 'default' entry")
        for role in self.models:
            if role != "default" and role not in ROLE_TAGS:
                raise ConfigError(f"unknown model role: {role!r}")
        for name in ("context_budget_bytes", "max_iterations", "parallel_repos",
                     "classify_fanout"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.cost_cap_usd <= 0:
            raise ConfigError("cost_cap_usd must be positive")
        if self.max_prompt_bytes is not None and self.max_prompt_bytes < 1:
            raise ConfigError("max_prompt_bytes must be positive")
        if self.replay_transcript is not None and self.provider_base_url is not None:
            raise ConfigError(
                "replay_transcript disables live providers; drop provider_base_url"
            )
        if not self.price_table:
            raise ConfigError("price_table must not be empty")
        return self


def _parse_sandbox(raw: dict) -> SandboxLimits:
    try:
        return SandboxLimits(
            wall_clock_cap=float(raw.get("wall_clock_cap_seconds", 1800.0)),
            cpu_cores=int(raw.get("cpu_cores", 2)),
            ram_mib=int(raw.get("ram_mib", 2048)),
            disk_mib=int(raw.get("disk_mib", 1024)),
            network_allowed=bool(raw.get("network_allowed", True)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sandbox limits: {exc}") from exc


def config_from_dict(raw: dict) -> PipelineConfig:
    try:
        config = PipelineConfig(
            models=dict(raw.get("models", {})),
            price_table=dict(raw.get("price_table", {})),
            context_budget_bytes=int(
                raw.get("context_budget_bytes", DEFAULT_CONTEXT_BUDGET_BYTES)
            ),
            max_iterations=int(raw.get("max_iterations", DEFAULT_MAX_ITERATIONS)),
            cost_cap_usd=as_usd(raw.get("cost_cap_usd", DEFAULT_COST_CAP_USD)),
            sandbox=_parse_sandbox(raw.get("sandbox", {})),
            machine_gpus=int(raw.get("machine_gpus", 0)),
            parallel_repos=int(raw.get("parallel_repos", 1)),
            classify_fanout=int(raw.get("classify_fanout", 1)),
            output_root=Path(raw.get("output_root", "repodistill-out")),
            replay_transcript=(
                Path(raw["replay_transcript"]) if raw.get("replay_transcript") else None
            ),
            record_transcript=(
                Path(raw["record_transcript"]) if raw.get("record_transcript") else None
            ),
            provider_base_url=raw.get("provider_base_url"),
            api_key_env=raw.get("api_key_env", "REPODISTILL_API_KEY"),
            max_prompt_bytes=(
                int(raw["max_prompt_bytes"]) if raw.get("max_prompt_bytes") else None
            ),
            max_retries=int(raw.get("max_retries", 2)),
            keep_workspaces=bool(raw.get("keep_workspaces", False)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return config.validate()


def load_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    """Load config from a JSON file; override values win over file values."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    return config_from_dict(raw)

