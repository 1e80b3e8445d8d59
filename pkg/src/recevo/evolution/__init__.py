"""Evolution engine: archive, parent sampling, the four-phase iteration and the outer loop."""

from .archive import ARCHIVE_FILE, ArchiveEntry, ArchiveError, EvolutionArchive, archive_digest, sample_parent
from .engine import (
    Evaluation,
    EvolutionConfig,
    EvolutionDeps,
    EvolutionError,
    InitializationError,
    evaluate_codebase,
    final_test_evaluation,
    init_archive,
    load_run_transcripts,
    run_evolution,
    run_iteration,
)
from .planning import (
    CoevolutionResult,
    DevelopmentReport,
    IterationAborted,
    Modification,
    StructuralAnalysis,
    analyze_structure,
    build_dev_report,
    coevolve_diag,
    evolve_code,
    plan_queries,
)

__all__ = [
    "ARCHIVE_FILE",
    "ArchiveEntry",
    "ArchiveError",
    "CoevolutionResult",
    "DevelopmentReport",
    "Evaluation",
    "EvolutionArchive",
    "EvolutionConfig",
    "EvolutionDeps",
    "EvolutionError",
    "InitializationError",
    "IterationAborted",
    "Modification",
    "StructuralAnalysis",
    "analyze_structure",
    "archive_digest",
    "build_dev_report",
    "coevolve_diag",
    "evaluate_codebase",
    "evolve_code",
    "final_test_evaluation",
    "init_archive",
    "load_run_transcripts",
    "plan_queries",
    "run_evolution",
    "run_iteration",
    "sample_parent",
]
