"""
Logging configuration with Rich console output and JSON file logging.

Features:
- Rich-based console output with colored levels
- Shortened module names (wavelet, scatter, pcanet, ols, svm, pipeline)
- Dual output: pretty console + structured JSON file
- Structured context (stage, stream, fold, size, seed) copied into JSON records
- Minimal verbosity by default (INFO and above)
"""

import logging
import json
import os
from datetime import datetime
from typing import Dict, Tuple
from rich.console import Console
from rich.logging import RichHandler
from rich.theme import Theme

# Module name mappings for cleaner output
MODULE_NAME_MAP: Dict[str, str] = {
    '__main__': 'cli',
    'shdl_cli': 'cli',
    'pipeline': 'pipeline',
    'datasets': 'data',
    'model_store': 'store',
    'wavelet': 'wavelet',
    'scatter': 'scatter',
    'pcanet': 'pcanet',
    'ols': 'ols',
    'svm': 'svm',
    'settings': 'settings',
    'startup': 'startup'
}

# Extra attributes forwarded to the JSON file when present on a record
CONTEXT_FIELDS: Tuple[str, ...] = ('stage', 'stream', 'fold', 'size', 'seed')

custom_theme = Theme({
    "logging.level.debug": "dim cyan",
    "logging.level.info": "green",
    "logging.level.warning": "yellow",
    "logging.level.error": "bold red",
    "logging.level.critical": "bold white on red",
})

console = Console(theme=custom_theme, stderr=True)


class RichConsoleFormatter(logging.Formatter):
    """
    Formatter that shortens the logger name and leaves the layout to RichHandler.
    """

    def format(self, record: logging.LogRecord) -> str:
        module_name = MODULE_NAME_MAP.get(record.name, record.name)
        if len(module_name) > 10:
            module_name = module_name[:10]
        record.name = module_name

        stage = getattr(record, 'stage', None)
        if stage:
            return f"[{stage}] {record.getMessage()}"
        return record.getMessage()


class JSONFileFormatter(logging.Formatter):
    """
    Formatter for structured JSON file logging, one object per line.
    """

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            'timestamp': datetime.fromtimestamp(record.created).isoformat(),
            'level': record.levelname,
            'module': record.name,
            'message': record.getMessage(),
            'function': record.funcName,
            'line': record.lineno
        }

        if record.exc_info:
            log_entry['exception'] = self.formatException(record.exc_info)

        for field in CONTEXT_FIELDS:
            if hasattr(record, field):
                log_entry[field] = getattr(record, field)

        return json.dumps(log_entry, ensure_ascii=False, default=str)


def setup_logging(log_level: int = logging.INFO, log_dir: str = 'logs') -> None:
    """
    Configure logging with Rich console output and JSON file logging.

    Args:
        log_level: Minimum log level shown on the console (default: INFO)
        log_dir: Directory for JSON log files (default: 'logs')
    """
    os.makedirs(log_dir, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)  # filter at handler level
    root_logger.handlers.clear()

    # --- Rich Console Handler ---
    console_handler = RichHandler(
        console=console,
        show_time=True,
        show_level=True,
        show_path=False,
        markup=False,  # path descriptors contain brackets
        rich_tracebacks=True,
        tracebacks_show_locals=False,
        log_time_format="[%H:%M:%S]",
    )
    console_handler.setLevel(log_level)
    console_handler.setFormatter(RichConsoleFormatter())
    root_logger.addHandler(console_handler)

    # --- JSON File Handler (Everything) ---
    log_filename = os.path.join(log_dir, f'shdl_{datetime.now().strftime("%Y%m%d")}.json')
    file_handler = logging.FileHandler(log_filename, encoding='utf-8')
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(JSONFileFormatter())
    root_logger.addHandler(file_handler)

    logging.getLogger('PIL').setLevel(logging.WARNING)
    logging.getLogger('matplotlib').setLevel(logging.WARNING)

    logger = logging.getLogger('startup')
    logger.info(f"✓ Logging initialized (console: {logging.getLevelName(log_level)}, file: DEBUG)")
    logger.debug(f"Log file: {log_filename}")
