import logging
import logging.handlers
import os
import sys
import glob
import threading
from datetime import datetime, timedelta
from typing import Optional, Dict, Any

from src.config.settings import LOGGING_CONFIG, LOG_DIR, LOG_COLORS

LEVELS = {
    'DEBUG': logging.DEBUG,
    'INFO': logging.INFO,
    'WARNING': logging.WARNING,
    'ERROR': logging.ERROR,
    'CRITICAL': logging.CRITICAL,
}


def format_context(context: Optional[Dict[str, Any]]) -> str:
    """Render a context mapping as ``k=v, k=v``."""
    if not context:
        return ""
    return ", ".join(f"{k}={v}" for k, v in context.items())


class ColoredFormatter(logging.Formatter):
    """
    Formatter adding colors to level names for terminal output.
    """

    def __init__(self, fmt: Optional[str] = None, datefmt: Optional[str] = None):
        super().__init__(fmt, datefmt)
        self.colors = LOG_COLORS

    def format(self, record):
        levelname = record.levelname
        if levelname in self.colors:
            record.levelname = f"{self.colors[levelname]}{levelname}{self.colors['RESET']}"
        try:
            return super().format(record)
        finally:
            # handlers share the record; the file handler must see the plain name
            record.levelname = levelname


class ContextFormatter(logging.Formatter):
    """
    Formatter prefixing the message with the record's ``[k=v, ...]`` context.
    """

    def format(self, record) -> str:
        context = getattr(record, 'custom_context', "")
        if not context:
            return super().format(record)
        original = record.msg
        record.msg = f"[{context}] {original}"
        try:
            return super().format(record)
        finally:
            record.msg = original


class DateRotatingFileHandler(logging.handlers.BaseRotatingHandler):
    """
    File handler writing one file per day (``yyyyMMdd.log``) and deleting
    files older than ``retention_days``.
    """

    def __init__(self, log_dir: str = LOG_DIR, retention_days: int = 5, encoding: str = 'utf8'):
        self.log_dir = log_dir
        self.retention_days = retention_days
        self.current_date = self._get_current_date()
        self.current_file_path = os.path.join(log_dir, f"{self.current_date}.log")

        os.makedirs(log_dir, exist_ok=True)
        self._cleanup_old_logs()

        super().__init__(self.current_file_path, mode='a', encoding=encoding, delay=False)

    def _cleanup_old_logs(self):
        cutoff_date = datetime.now() - timedelta(days=self.retention_days)

        for log_file in glob.glob(os.path.join(self.log_dir, "*.log")):
            date_part = os.path.basename(log_file).split('.')[0]
            try:
                file_date = datetime.strptime(date_part, '%Y%m%d')
            except ValueError:
                continue
            if file_date < cutoff_date:
                try:
                    os.remove(log_file)
                except OSError:
                    pass

    @staticmethod
    def _get_current_date() -> str:
        return datetime.now().strftime('%Y%m%d')

    def shouldRollover(self, record):
        return self._get_current_date() != self.current_date

    def doRollover(self):
        if self.stream:
            self.stream.close()

        self.current_date = self._get_current_date()
        self.current_file_path = os.path.join(self.log_dir, f"{self.current_date}.log")
        self.baseFilename = os.path.abspath(self.current_file_path)
        self._cleanup_old_logs()

        self.mode = 'a'
        self.stream = self._open()


class Logger:
    """
    Wrapper around a stdlib logger with colored console output, an optional
    daily file, per-message ``context=`` and a persistent context.
    """

    def __init__(self, name: Optional[str] = None, config: Optional[Dict[str, Any]] = None):
        self.name = name or __name__
        self.config = config or LOGGING_CONFIG
        self.logger = logging.getLogger(self.name)
        self.console_handler: Optional[logging.Handler] = None
        self.file_handler: Optional[logging.Handler] = None
        self._context: Optional[Dict[str, Any]] = None
        self._setup_logger()

    def _setup_logger(self):
        if self.logger.handlers:
            for handler in self.logger.handlers:
                if isinstance(handler, DateRotatingFileHandler):
                    self.file_handler = handler
                elif isinstance(handler, logging.StreamHandler):
                    self.console_handler = handler
            return

        self.logger.setLevel(LEVELS.get(self.config["level"], logging.INFO))
        self.logger.propagate = False

        self.console_handler = logging.StreamHandler(sys.stdout)
        self.console_handler.setFormatter(ColoredFormatter(
            fmt=self.config["console"]["format"],
            datefmt=self.config["console"]["datefmt"],
        ))
        self.logger.addHandler(self.console_handler)

        file_config = self.config["file"]
        if not file_config["enabled"]:
            return
        try:
            self.file_handler = DateRotatingFileHandler(
                log_dir=file_config["directory"],
                retention_days=file_config["retention_days"],
            )
        except OSError as e:
            self.logger.warning(f"File logging disabled, cannot write to {file_config['directory']}: {e}")
            return
        self.file_handler.setFormatter(ContextFormatter(
            fmt=file_config["format"],
            datefmt=file_config["datefmt"],
        ))
        self.logger.addHandler(self.file_handler)

    def debug(self, message: str, **kwargs):
        """Log a debug message."""
        self._log(logging.DEBUG, message, **kwargs)

    def info(self, message: str, **kwargs):
        """Log an info message."""
        self._log(logging.INFO, message, **kwargs)

    def warning(self, message: str, **kwargs):
        """Log a warning message."""
        self._log(logging.WARNING, message, **kwargs)

    def error(self, message: str, **kwargs):
        """Log an error message."""
        self._log(logging.ERROR, message, **kwargs)

    def critical(self, message: str, **kwargs):
        """Log a critical message."""
        self._log(logging.CRITICAL, message, **kwargs)

    def exception(self, message: str, **kwargs):
        """Log an error together with the active traceback."""
        kwargs['exc_info'] = True
        self._log(logging.ERROR, message, **kwargs)

    def _log(self, level: int, message: str, **kwargs):
        if not self.logger.isEnabledFor(level):
            return
        context: Dict[str, Any] = dict(self._context or {})
        context.update(kwargs.get('context') or {})
        self.logger.log(
            level,
            message,
            extra={'custom_context': format_context(context)},
            exc_info=kwargs.get('exc_info', False),
            stacklevel=3,
        )

    def set_level(self, level: str):
        """
        Set the logging level at runtime.

        Args:
            level: One of 'DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'

        Raises:
            ValueError: If the level name is unknown.
        """
        if level.upper() not in LEVELS:
            raise ValueError(f"Invalid log level: {level}. Valid levels are: {list(LEVELS)}")
        self.logger.setLevel(LEVELS[level.upper()])

    def add_custom_context(self, context: Dict[str, Any]):
        """
        Attach context to every subsequent message of this logger.

        Args:
            context: Dictionary of context information
        """
        self._context = dict(context)

    def clear_custom_context(self):
        self._context = None


_loggers: Dict[str, Logger] = {}
_loggers_lock = threading.Lock()


def get_logger(name: Optional[str] = None) -> Logger:
    """
    Get the shared Logger instance for ``name``.

    Args:
        name: Name for the logger. If None, uses this module's name.

    Returns:
        Logger instance
    """
    logger_name = name or __name__
    with _loggers_lock:
        if logger_name not in _loggers:
            _loggers[logger_name] = Logger(logger_name)
        return _loggers[logger_name]


def set_level(level: str):
    """Set the level of every logger created so far, and of later ones."""
    if level.upper() not in LEVELS:
        raise ValueError(f"Invalid log level: {level}. Valid levels are: {list(LEVELS)}")
    LOGGING_CONFIG["level"] = level.upper()
    with _loggers_lock:
        loggers = list(_loggers.values())
    for logger in loggers:
        logger.set_level(level)


# Create a default logger instance
default_logger = get_logger("asablade")


def debug(message: str, **kwargs):
    """Log a debug message using the default logger."""
    default_logger.debug(message, **kwargs)


def info(message: str, **kwargs):
    """Log an info message using the default logger."""
    default_logger.info(message, **kwargs)


def warning(message: str, **kwargs):
    """Log a warning message using the default logger."""
    default_logger.warning(message, **kwargs)


def error(message: str, **kwargs):
    """Log an error message using the default logger."""
    default_logger.error(message, **kwargs)


def critical(message: str, **kwargs):
    """Log a critical message using the default logger."""
    default_logger.critical(message, **kwargs)


def exception(message: str, **kwargs):
    """Log an exception with traceback using the default logger."""
    default_logger.exception(message, **kwargs)
