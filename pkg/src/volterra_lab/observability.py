"""
Configures logging and OpenTelemetry for volterra-lab runs.

Tracing and log export go via OTLP (gRPC or HTTP) when an endpoint is set.
Paths dropped by the overflow guard are written to a dedicated flagged-path
logger so a run can be audited after the fact.
"""

import importlib
import logging
import os
from typing import Any, Dict, Optional

from rich.logging import RichHandler

from volterra_lab import __version__

# Module logger
logger: logging.Logger = logging.getLogger(__name__)

FLAGGED_PATH_LOGGER_NAME: str = "volterra_lab_flagged_paths"
LOG_LEVEL_ENV: str = "VOLTERRA_LOG_LEVEL"
FLAG_LOG_PATH_ENV: str = "VOLTERRA_FLAG_LOG_PATH"

# protocol -> (span exporter module, log exporter module)
OTLP_EXPORTER_MODULES: Dict[str, tuple[str, str]] = {
    "grpc": (
        "opentelemetry.exporter.otlp.proto.grpc.trace_exporter",
        "opentelemetry.exporter.otlp.proto.grpc._log_exporter",
    ),
    "http/protobuf": (
        "opentelemetry.exporter.otlp.proto.http.trace_exporter",
        "opentelemetry.exporter.otlp.proto.http._log_exporter",
    ),
}


def setup_console_logging(level: Optional[str] = None) -> None:
    """Routes the root logger through rich at ``level`` (env ``VOLTERRA_LOG_LEVEL``, default WARNING)."""
    name: str = (level or os.getenv(LOG_LEVEL_ENV, "WARNING")).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        logger.warning("Unknown log level %r, using WARNING.", name)
        numeric = logging.WARNING

    root: logging.Logger = logging.getLogger()
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        root.addHandler(RichHandler(rich_tracebacks=True, show_path=False))
    root.setLevel(numeric)


def setup_flagged_path_logging(log_path: Optional[str] = None) -> logging.Logger:
    """Configures the flagged-path logger; without a path records are discarded."""
    flagged_logger: logging.Logger = logging.getLogger(FLAGGED_PATH_LOGGER_NAME)
    flagged_logger.setLevel(logging.INFO)
    flagged_logger.propagate = False

    path: Optional[str] = log_path or os.getenv(FLAG_LOG_PATH_ENV)
    if not path:
        if not flagged_logger.handlers:
            flagged_logger.addHandler(logging.NullHandler())
        return flagged_logger

    target: str = os.path.abspath(path)
    for existing in flagged_logger.handlers:
        if isinstance(existing, logging.FileHandler) and existing.baseFilename == target:
            return flagged_logger

    log_dir: str = os.path.dirname(target)
    try:
        os.makedirs(log_dir, exist_ok=True)
    except OSError as e:
        logger.warning("Error creating log directory %s: %s", log_dir, e)
        return flagged_logger

    try:
        handler: logging.Handler = logging.FileHandler(target)
        # Format: timestamp: volterra-lab: path 17 (seed 42) flagged at t=0.53
        handler.setFormatter(logging.Formatter("%(asctime)s: volterra-lab: %(message)s", datefmt="%Y-%m-%d %H:%M:%S"))
        for stale in [h for h in flagged_logger.handlers if isinstance(h, logging.NullHandler)]:
            flagged_logger.removeHandler(stale)
        flagged_logger.addHandler(handler)
        logger.info("Flagged-path logging configured at: %s", target)
    except PermissionError:
        logger.warning("PermissionError: Could not write flagged-path log at %s.", target)
    except Exception as e:
        logger.warning("Failed to set up flagged-path logger: %s", e)
    return flagged_logger


def _otlp_exporter(module_name: str, class_name: str, endpoint: str) -> Optional[Any]:
    try:
        return getattr(importlib.import_module(module_name), class_name)(endpoint=endpoint)
    except Exception as e:
        logger.warning("OTLP exporter %s unavailable: %s", class_name, e)
        return None


def _attach_log_export(resource: Any, module_name: str, endpoint: str) -> None:
    """Forwards INFO and above from the root logger to OTLP."""
    try:
        from opentelemetry._logs import set_logger_provider
        from opentelemetry.sdk._logs import LoggerProvider, LoggingHandler
        from opentelemetry.sdk._logs.export import BatchLogRecordProcessor
    except Exception as e:
        logger.info("OpenTelemetry logs SDK not available: %s", e)
        return

    exporter = _otlp_exporter(module_name, "OTLPLogExporter", endpoint)
    if exporter is None:
        return
    provider = LoggerProvider(resource=resource)
    provider.add_log_record_processor(BatchLogRecordProcessor(exporter))
    set_logger_provider(provider)
    logging.getLogger().addHandler(LoggingHandler(level=logging.INFO, logger_provider=provider))


def setup_observability() -> bool:
    """Starts OTLP export of the lab's spans and logs, then the flagged-path logger.

    Export is on only when ``OTEL_EXPORTER_OTLP_ENDPOINT`` is set, the protocol
    is ``grpc`` or ``http/protobuf`` and the SDK imports. Returns whether spans
    are exported.
    """
    endpoint: Optional[str] = os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT")
    protocol: str = os.getenv("OTEL_EXPORTER_OTLP_PROTOCOL", "grpc")
    enabled = False
    try:
        if not endpoint:
            logger.info("OTel endpoint not configured. Skipping OpenTelemetry setup.")
            return enabled
        modules = OTLP_EXPORTER_MODULES.get(protocol)
        if modules is None:
            logger.warning("Unsupported OTLP protocol %r; expected one of %s.", protocol, sorted(OTLP_EXPORTER_MODULES))
            return enabled

        try:
            from opentelemetry import trace as ot_trace
            from opentelemetry.sdk.resources import Resource
            from opentelemetry.sdk.trace import TracerProvider
            from opentelemetry.sdk.trace.export import BatchSpanProcessor
        except Exception as e:
            logger.debug("OpenTelemetry SDK not available: %s", e)
            return enabled

        span_exporter = _otlp_exporter(modules[0], "OTLPSpanExporter", endpoint)
        if span_exporter is None:
            return enabled

        resource = Resource.create(
            attributes={
                "service.name": os.getenv("OTEL_SERVICE_NAME", "volterra-lab"),
                "service.version": __version__,
            }
        )
        tracer_provider = TracerProvider(resource=resource)
        tracer_provider.add_span_processor(BatchSpanProcessor(span_exporter))
        ot_trace.set_tracer_provider(tracer_provider)
        enabled = True
        _attach_log_export(resource, modules[1], endpoint)
        logger.info("Exporting spans and logs via %s to %s.", protocol, endpoint)
        return enabled
    finally:
        setup_flagged_path_logging()
