"""repodistill: distill repositories into vetted, executable example bundles."""

from .analysis import (
    ContextSelection,
    FileClassification,
    RepoPurpose,
    classify_file,
    locate_main_readme,
    select_context_files,
    summarize_purpose,
)
from .config import PipelineConfig, config_from_dict, load_config
from .evaluation import (
    ABItem,
    ABResult,
    ABVerdict,
    ExperimentOutput,
    PreferenceReport,
    SummaryTable,
    ab_compare,
    aggregate_preferences,
    aggregate_stats,
    filter_completed_pairs,
)
from .gateway import (
    Completion,
    CostLedger,
    LlmGateway,
    PriceTable,
    PromptRequest,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
    ledger_total,
    replay_store,
    request_fingerprint,
)
from .generation import (
    BundleMetadata,
    ExampleBundle,
    GenerationProfile,
    ResourceSpec,
    build_generation_prompt,
    bundle_digest,
    generate_bundle,
    parse_bundle,
    render_bundle,
)
from .ingest import (
    FileRecord,
    FixtureRepoIndex,
    RepoDescriptor,
    WorkingCopy,
    discover_repos,
    enumerate_files,
    fetch_repo,
    sample_repos,
)
from .library import ExampleLibrary, LibraryEntry, LibraryQuery
from .loop import (
    DistillationRecord,
    IterationRecord,
    JudgeVerdict,
    RepoAnalysis,
    analyze_repo,
    distill,
    judge_run,
    resume,
)
from .pipeline import run_distill
from .sandbox import (
    RunTrace,
    SandboxLimits,
    SubprocessBackend,
    Workspace,
    collect_trace,
    execute,
    prepare_workspace,
)

__version__ = "0.1.0"
