"""Command line, run configuration and run-directory management."""

from .config import ConfigError, Paths, RunConfig, load_config, parse_config, with_stage
from .main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main
from .pipeline import (
    CORPORA,
    SUITES,
    RuntimeFailure,
    cmd_datagen,
    cmd_eval,
    cmd_train,
    load_corpora,
    load_teacher,
    run_label,
    sha256_file,
    teacher_path,
)
from .report import NOT_EVALUATED, cmd_report, render_summary

__all__ = [name for name in dir() if not name.startswith("_")]
