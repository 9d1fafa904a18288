"""Periodic polling and daily CSV persistence."""
from .csvfile import (
    DailyCsvWriter,
    StorageError,
    StorageFull,
    StoragePermissionDenied,
    append_reading,
    header_line,
    recover_file,
    resolve_output_path,
)
from .metadata import SCHEMA_VERSION, build_metadata, metadata_path, write_metadata
from .service import BusCoordinator, RunSummary, TaskSummary, default_opener, run_logging_service
from .task import LoggingTask

__all__ = [
    "BusCoordinator", "DailyCsvWriter", "LoggingTask", "RunSummary", "SCHEMA_VERSION",
    "StorageError", "StorageFull", "StoragePermissionDenied", "TaskSummary",
    "append_reading", "build_metadata", "default_opener", "header_line", "metadata_path",
    "recover_file", "resolve_output_path", "run_logging_service", "write_metadata",
]
