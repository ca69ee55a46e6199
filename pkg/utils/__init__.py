"""
FlowAug - Utilities Module
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .image_io import CLASS_NAMES, load_dataset, read_pgm, save_dataset, write_pgm, write_sheet
from .io_utils import atomic_write_bytes, atomic_write_text, read_csv, write_csv
from .logging_utils import configure_logging
from .stats import mean_sd, paired_comparison, sign_test

__all__ = [
    'save_checkpoint',
    'load_checkpoint',
    'CLASS_NAMES',
    'read_pgm',
    'write_pgm',
    'write_sheet',
    'save_dataset',
    'load_dataset',
    'atomic_write_bytes',
    'atomic_write_text',
    'read_csv',
    'write_csv',
    'configure_logging',
    'mean_sd',
    'paired_comparison',
    'sign_test'
]
