import inspect
import json
import os
import sys
import traceback
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from dotenv import load_dotenv

load_dotenv()

RULE = "=" * 80
THIN_RULE = "-" * 80
_SKIP_FILES = {__file__, str(Path(__file__).with_name("logging_config.py"))}


class LogLevel(Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"


def render_value(value: Any) -> str:
    """Compact text for a context value; arrays and tensors are summarized, not dumped."""
    if isinstance(value, np.generic) or (hasattr(value, "shape") and len(value.shape) == 0):
        value = value.item()
    if hasattr(value, "shape") and hasattr(value, "dtype"):
        shape = tuple(int(s) for s in value.shape)
        return f"<{type(value).__name__} shape={shape} dtype={value.dtype}>"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (dict, list, tuple)):
        try:
            return json.dumps(value, sort_keys=True, default=str)
        except (TypeError, ValueError):
            return str(value)
    return str(value)


class ErrorTraceLogger:
    """
    Per-level log files of framed entries with caller location and a context block.

    Entries already present in the files are not written twice when preserve_logs
    is set.
    """

    def __init__(
        self,
        log_dir: str = "logs",
        preserve_logs: bool = True,
        debug_mode: bool = False,
    ) -> None:
        self.preserve_logs = preserve_logs
        self.debug_mode = debug_mode
        self.redirect(log_dir)
        self._log_cache = self._load_existing_log_hashes() if preserve_logs else set()

    def redirect(self, log_dir: Union[str, Path]) -> None:
        """Point every level file at a new directory."""
        self.log_dir = Path(log_dir)
        self._ensure_log_directory()

    @property
    def log_files(self) -> Dict[LogLevel, Path]:
        return {level: self.log_dir / f"{level.value.lower()}.log" for level in LogLevel}

    def _ensure_log_directory(self) -> None:
        try:
            self.log_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            fallback = Path.cwd() / "logs"
            print(
                f"Failed to create log directory {self.log_dir}: {e}; using {fallback}",
                file=sys.stderr,
            )
            self.log_dir = fallback
            try:
                self.log_dir.mkdir(parents=True, exist_ok=True)
            except OSError as fallback_error:
                print(f"Fallback directory creation failed: {fallback_error}", file=sys.stderr)

    def _load_existing_log_hashes(self) -> set:
        cache = set()
        for path in self.log_files.values():
            if not path.exists():
                continue
            try:
                for entry in path.read_text(encoding="utf-8").split(RULE + "\n"):
                    if entry.strip():
                        cache.add(hash(f"{RULE}\n{entry.strip()}\n{RULE}\n"))
            except OSError:
                pass
        return cache

    @staticmethod
    def _get_caller_info() -> Tuple[str, str, int]:
        """Function, file name and line of the first frame outside the logging modules."""
        for frame in inspect.stack()[1:]:
            if frame.filename not in _SKIP_FILES:
                return frame.function, Path(frame.filename).name, frame.lineno
        return "Unknown", "Unknown", 0

    def _format_message(
        self,
        level: LogLevel,
        message: str,
        error: Optional[Union[BaseException, str]] = None,
        additional_info: Optional[Dict[str, Any]] = None,
        exc_info: bool = False,
    ) -> str:
        function_name, file_name, line_no = self._get_caller_info()
        lines = [
            RULE,
            f"TIMESTAMP: {datetime.now().strftime('%Y-%m-%d %H:%M:%S.%f')}",
            f"LEVEL: {level.value}",
            f"FILE: {file_name}",
            f"FUNCTION: {function_name}",
            f"LINE: {line_no}",
            THIN_RULE,
            f"MESSAGE: {message}",
        ]
        if isinstance(error, BaseException):
            lines += [f"ERROR TYPE: {type(error).__name__}", f"ERROR MESSAGE: {error}", THIN_RULE]
            if exc_info and error.__traceback__ is not None:
                lines += [
                    "FULL TRACEBACK:",
                    "".join(traceback.format_exception(type(error), error, error.__traceback__)),
                ]
        elif isinstance(error, str):
            lines += [f"ERROR MESSAGE: {error}", THIN_RULE]

        context: Dict[str, Any] = {"package": "mask_fusion", "pid": os.getpid()}
        context.update(additional_info or {})
        lines += [
            THIN_RULE,
            "CONTEXT:",
            "\n".join(f"{key}: {render_value(value)}" for key, value in context.items()),
            RULE + "\n",
        ]
        return "\n".join(lines)

    def _write_log(self, level: LogLevel, message: str) -> None:
        entry_hash = hash(message)
        if entry_hash in self._log_cache:
            return
        path = self.log_files[level]
        try:
            self._ensure_log_directory()
            with open(path, "a", encoding="utf-8") as f:
                f.write(message)
            self._log_cache.add(entry_hash)
        except OSError as e:
            print(f"Failed to write log to {path}: {e}", file=sys.stderr)

    def debug(self, message: str, additional_info: Optional[Dict[str, Any]] = None) -> None:
        """Dropped unless debug mode is on."""
        if self.debug_mode:
            self._write_log(
                LogLevel.DEBUG, self._format_message(LogLevel.DEBUG, message, additional_info=additional_info)
            )

    def info(self, message: str, additional_info: Optional[Dict[str, Any]] = None) -> None:
        self._write_log(
            LogLevel.INFO, self._format_message(LogLevel.INFO, message, additional_info=additional_info)
        )

    def warning(self, message: str, additional_info: Optional[Dict[str, Any]] = None) -> None:
        self._write_log(
            LogLevel.WARNING, self._format_message(LogLevel.WARNING, message, additional_info=additional_info)
        )

    def error(
        self,
        error: Union[BaseException, str],
        additional_info: Optional[Dict[str, Any]] = None,
        exc_info: bool = True,
    ) -> None:
        message = error.message if hasattr(error, "message") else "An error occurred"
        self._write_log(
            LogLevel.ERROR,
            self._format_message(LogLevel.ERROR, str(message), error, additional_info, exc_info),
        )


# Global logger instance
logger = ErrorTraceLogger(
    log_dir=os.getenv("MASK_FUSION_LOG_DIR", "logs"),
    preserve_logs=True,
    debug_mode=os.getenv("DEBUG", "false").lower() == "true",
)
