import os
from pathlib import Path
from typing import Optional

from .error_trace import ErrorTraceLogger, logger


def setup_logging(
    log_dir: Optional[str] = None,
    debug_mode: Optional[bool] = None,
    preserve_logs: bool = True,
) -> ErrorTraceLogger:
    """
    Configure the shared logger used by every module.

    Args:
        log_dir: Directory for log files (defaults to MASK_FUSION_LOG_DIR or 'logs' in project root)
        debug_mode: Enable debug logging (defaults to the DEBUG environment variable)
        preserve_logs: Whether to keep duplicate suppression across existing log files

    Returns:
        The configured shared ErrorTraceLogger instance
    """
    if log_dir is None:
        project_root = Path(__file__).parent.parent.parent
        log_dir = os.getenv("MASK_FUSION_LOG_DIR", str(project_root / "logs"))

    if debug_mode is None:
        debug_mode = os.getenv("DEBUG", "false").lower() == "true"

    logger.debug_mode = debug_mode
    logger.preserve_logs = preserve_logs
    logger.redirect(log_dir)
    if not preserve_logs:
        logger._log_cache = set()

    logger.info(
        "Logging system initialized",
        {"log_dir": log_dir, "debug_mode": debug_mode, "preserve_logs": preserve_logs},
    )
    return logger
