from logging import getLogger, Logger, StreamHandler, Formatter, FileHandler, DEBUG, INFO, WARNING, ERROR
from typing import Optional

from pythonjsonlogger.jsonlogger import JsonFormatter

_LOGGER_NAME = "cmaxsim"
_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
_LEVELS = {"DEBUG": DEBUG, "INFO": INFO, "WARNING": WARNING, "ERROR": ERROR}


def setup_logging(level: str = "INFO", fmt: str = "text", log_file: Optional[str] = None) -> None:
	"""Configure package logging.

	Safe to call multiple times; handlers won't be duplicated. Console output
	goes to stderr so result files written to stdout stay clean.
	"""
	logger = getLogger(_LOGGER_NAME)
	if logger.handlers:
		# Already configured
		return

	numeric_level = _LEVELS.get(level.upper(), INFO)
	logger.setLevel(numeric_level)
	logger.propagate = False

	formatter = JsonFormatter(_FORMAT) if fmt.lower() == "json" else Formatter(_FORMAT)

	console_handler = StreamHandler()
	console_handler.setLevel(numeric_level)
	console_handler.setFormatter(formatter)
	logger.addHandler(console_handler)

	if log_file:
		file_handler = FileHandler(log_file, encoding="utf-8")
		file_handler.setLevel(numeric_level)
		file_handler.setFormatter(formatter)
		logger.addHandler(file_handler)


def get_logger(name: Optional[str] = None) -> Logger:
	if name:
		return getLogger(f"{_LOGGER_NAME}.{name}")
	return getLogger(_LOGGER_NAME)
