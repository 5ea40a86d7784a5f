"""
Logging module for loract.
Provides console and optional file logging with configurable verbosity levels.
"""

import logging


class LoractLogger:
    """Logger class for loract with console and file output."""

    def __init__(self, verbose=False, log_file=None):
        """
        Initialize the logger.

        Args:
            verbose (bool): Enable verbose (DEBUG) logging
            log_file (str): Path to log file, or None for console only
        """
        self.verbose = verbose
        self.log_file = log_file
        self.logger = logging.getLogger('loract')
        self.logger.setLevel(logging.DEBUG if verbose else logging.INFO)
        self.logger.propagate = False

        # Replace handlers left by an earlier configuration
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)
            handler.close()

        console_formatter = logging.Formatter(
            '%(levelname)s: %(message)s'
        )
        file_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )

        console_handler = logging.StreamHandler()
        console_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
        console_handler.setFormatter(console_formatter)
        self.logger.addHandler(console_handler)

        if log_file:
            try:
                file_handler = logging.FileHandler(log_file)
                file_handler.setLevel(logging.DEBUG)
                file_handler.setFormatter(file_formatter)
                self.logger.addHandler(file_handler)
            except OSError as e:
                self.logger.warning(f"Could not create log file {log_file}: {e}")

    def set_console_level(self, level):
        """Set the console threshold by level name, e.g. 'WARNING'."""
        numeric = logging.getLevelName(level)
        for handler in self.logger.handlers:
            if not isinstance(handler, logging.FileHandler):
                handler.setLevel(numeric)
        # the file handler keeps receiving DEBUG records
        self.logger.setLevel(logging.DEBUG if self.log_file else numeric)

    def info(self, message):
        """Log info message."""
        self.logger.info(message)

    def error(self, message):
        """Log error message."""
        self.logger.error(message)

    def debug(self, message):
        """Log debug message."""
        self.logger.debug(message)

    def warning(self, message):
        """Log warning message."""
        self.logger.warning(message)


_shared = None


def get_logger(verbose=False, log_file=None):
    """
    Get a configured logger instance.

    The first call configures the shared 'loract' logger; later calls
    without arguments reuse it, calls with arguments reconfigure it.

    Args:
        verbose (bool): Enable verbose logging
        log_file (str): Path to log file

    Returns:
        LoractLogger: Configured logger instance
    """
    global _shared
    if _shared is None or verbose or log_file:
        _shared = LoractLogger(verbose=verbose, log_file=log_file)
    return _shared
