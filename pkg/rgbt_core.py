"""
RGBT Detection - Shared Core Library
====================================
Shared infrastructure for the data, model, training and CLI modules.

Provides logging setup, the CSV run logger, the error hierarchy,
environment settings and seeding helpers.
"""

import csv
import logging
import os
import random
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

import numpy as np
import torch
from dotenv import load_dotenv

# Load .env file
load_dotenv()

# CONFIGURATION (from .env)
OUTPUT_ROOT = Path(os.getenv("RGBT_OUTPUT_ROOT", "runs"))
LOG_DIR = OUTPUT_ROOT / "logs"
ERROR_LOG_FILENAME = "errors.log"

LOG_FORMAT = '%(asctime)s | %(levelname)s | %(message)s'


class RgbtError(Exception):
    """Base error; `category` is the machine-parsable tag printed by the CLI."""

    category = "error"

    def __init__(self, message):
        super().__init__(message)
        self.message = message

    def one_line(self):
        return f"error: {self.category}"


class ConfigError(RgbtError):
    category = "config"


class DatasetError(RgbtError):
    category = "dataset"


class LabelParseError(RgbtError):
    """Malformed label line; names the file and 1-based line number."""

    category = "label-parse"

    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = Path(path)
        self.line_no = line_no


class ShapeError(RgbtError):
    category = "shape"

    def __init__(self, stage, reason):
        super().__init__(f"stage {stage}: {reason}")
        self.stage = stage


class CheckpointError(RgbtError):
    category = "load"

    def __init__(self, tensor_name, reason):
        super().__init__(f"tensor '{tensor_name}': {reason}")
        self.tensor_name = tensor_name


class DomainError(RgbtError):
    category = "domain"


class TrainingError(RgbtError):
    category = "training"

    def __init__(self, component, reason):
        super().__init__(f"{component}: {reason}")
        self.component = component


class CSVLogger:
    """Append-only CSV logger; the header is written when the file is created."""

    def __init__(self, log_file, columns):
        self.log_file = Path(log_file)
        self.columns = list(columns)
        self._init_csv()

    def _init_csv(self):
        """Initialize CSV file with header if it doesn't exist."""
        if not self.log_file.exists():
            self.log_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_file, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                writer.writerow(self.columns)

    def log_data(self, data_dict):
        """Write data row to CSV file."""
        row = [_format_cell(data_dict.get(col, "")) for col in self.columns]
        with open(self.log_file, 'a', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(row)

    def read_rows(self):
        """Read back all rows as dicts of strings."""
        with open(self.log_file, 'r', newline='', encoding='utf-8') as f:
            return list(csv.DictReader(f))


def _format_cell(value):
    # repr keeps the full float precision so identical runs give identical bytes
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, torch.Tensor):
        return repr(float(value.detach().cpu().item()))
    return value


class ConsoleHandler(logging.StreamHandler):
    """Console handler bound to the current sys.stderr at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def setup_logging(log_dir=None, level=logging.INFO):
    """Setup the `rgbt` logger: rotating error log file + console (shared)."""
    log_dir = Path(log_dir) if log_dir is not None else LOG_DIR
    log_dir.mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger('rgbt')
    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    log_file = (log_dir / ERROR_LOG_FILENAME).resolve()
    formatter = logging.Formatter(LOG_FORMAT)

    has_file = any(
        isinstance(h, RotatingFileHandler) and Path(h.baseFilename) == log_file
        for h in logger.handlers
    )
    if not has_file:
        handler = RotatingFileHandler(log_file, encoding='utf-8', maxBytes=5*1024*1024, backupCount=5)
        handler.setLevel(logging.DEBUG)
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    has_console = any(isinstance(h, ConsoleHandler) for h in logger.handlers)
    if not has_console:
        console = ConsoleHandler()
        console.setLevel(level)
        console.setFormatter(formatter)
        logger.addHandler(console)

    return logger


def seed_everything(seed):
    """Seed python, numpy and torch RNGs."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def set_deterministic(seed, enabled=True):
    """
    Seed all RNGs and, when enabled, force deterministic kernels.

    Deterministic mode trades throughput for bitwise reproducibility.
    """
    seed_everything(seed)
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False
    else:
        torch.use_deterministic_algorithms(False)


def output_dir(name, root=None):
    """Resolve `<output root>/<name>` and create it."""
    path = Path(root) if root is not None else OUTPUT_ROOT
    path = path / name
    path.mkdir(parents=True, exist_ok=True)
    return path
