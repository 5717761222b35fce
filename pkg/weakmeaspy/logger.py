import logging
import sys
from pathlib import Path

FMT_LOGGING = '%(asctime)s|%(name)s|%(filename)s|%(levelname)s: %(message)s'
PACKAGE_LOGGER = 'weakmeaspy'


class Logger:
    """Handlers live on the package root logger; every module logger is a child of it."""

    def __init__(self, name: str, log_file: Path | None = None, level: int | None = None) -> None:
        self.logger = logging.getLogger(name)
        root = logging.getLogger(PACKAGE_LOGGER)
        formatter = logging.Formatter(FMT_LOGGING)

        if not root.handlers:  # Prevent duplicate handlers
            root.setLevel(logging.INFO if level is None else level)
            root.propagate = False

            # Console handler, stderr so report tables on stdout stay clean
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setFormatter(formatter)
            root.addHandler(console_handler)
        elif level is not None:
            root.setLevel(level)

        # File handler (if provided)
        if log_file and not self._has_file_handler(root, log_file):
            file_handler = logging.FileHandler(log_file)
            file_handler.setFormatter(formatter)
            root.addHandler(file_handler)

    @staticmethod
    def _has_file_handler(root: logging.Logger, log_file: Path) -> bool:
        target = str(Path(log_file).resolve())
        return any(isinstance(h, logging.FileHandler) and h.baseFilename == target for h in root.handlers)

    def get_logger(self) -> logging.Logger:
        return self.logger

    @staticmethod
    def close_file_handlers() -> None:
        root = logging.getLogger(PACKAGE_LOGGER)
        for handler in [h for h in root.handlers if isinstance(h, logging.FileHandler)]:
            handler.close()
            root.removeHandler(handler)
