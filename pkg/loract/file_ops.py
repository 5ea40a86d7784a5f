"""
File operations module for loract.
Reads and writes matrix fixtures and writes run reports atomically.
"""

import json
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import FixtureError
from .logger import get_logger

FIXTURE_MAGIC = b'LRMX'
FIXTURE_VERSION = 1
# little-endian: magic, version u8, dtype u8, rows u32, cols u32
_HEADER = struct.Struct('<4sBBII')
_DTYPE_CODES = {0: np.dtype('<f8'), 1: np.dtype('<f4')}
_CODE_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_RESERVED_NAMES = {'CON', 'PRN', 'AUX', 'NUL'} | {f"COM{i}" for i in range(1, 10)} | {f"LPT{i}" for i in range(1, 10)}


def write_matrix_fixture(path, A):
    """
    Write a matrix as an LRMX fixture, or as headerless CSV for a .csv path.

    Args:
        path (str): Destination
        A (np.ndarray): 2-D float64 or float32 matrix
    """
    A = np.asarray(A)
    if A.ndim != 2 or A.dtype not in _CODE_FOR:
        raise FixtureError(f"fixtures hold 2-D float32/float64 matrices, got {A.dtype} {A.shape}")
    path_obj = Path(path)
    if path_obj.suffix.lower() == '.csv':
        pd.DataFrame(A).to_csv(path_obj, header=False, index=False, float_format='%.17g')
        return
    code = _CODE_FOR[A.dtype]
    header = _HEADER.pack(FIXTURE_MAGIC, FIXTURE_VERSION, code, A.shape[0], A.shape[1])
    with open(path_obj, 'wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(A, dtype=_DTYPE_CODES[code]).tobytes())


def read_matrix_fixture(path):
    """
    Read an LRMX fixture (or a headerless CSV).

    Args:
        path (str): Fixture path

    Returns:
        np.ndarray: The stored matrix in its stored precision

    Raises:
        FixtureError: Missing file, bad magic or version, truncated payload
    """
    path_obj = Path(path)
    if not path_obj.is_file():
        raise FixtureError(f"fixture not found: {path}")
    if path_obj.suffix.lower() == '.csv':
        try:
            frame = pd.read_csv(path_obj, header=None, dtype=np.float64, float_precision='round_trip')
        except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise FixtureError(f"{path}: unreadable CSV fixture: {e}") from None
        return frame.to_numpy()

    data = path_obj.read_bytes()
    if len(data) < _HEADER.size:
        raise FixtureError(f"{path}: truncated header")
    magic, version, code, rows, cols = _HEADER.unpack_from(data)
    if magic != FIXTURE_MAGIC:
        raise FixtureError(f"{path}: bad magic {magic!r}")
    if version != FIXTURE_VERSION:
        raise FixtureError(f"{path}: unsupported fixture version {version}")
    if code not in _DTYPE_CODES:
        raise FixtureError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    expected = rows * cols * dtype.itemsize
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise FixtureError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(rows, cols).astype(dtype.newbyteorder('='))


def _flatten_row(row):
    """CSV cells hold scalars; nested values become JSON text."""
    flat = {}
    for key, value in row.items():
        if isinstance(value, (dict, list, tuple)):
            value = json.dumps(value, sort_keys=True, default=_json_default)
        flat[key] = value
    return flat


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


class FileOperations:
    """Report and directory manager for loract runs."""

    def __init__(self, verbose=False):
        """
        Initialize file operations manager.

        Args:
            verbose (bool): Enable verbose logging
        """
        self.logger = get_logger(verbose=verbose)

    def is_valid_filename(self, filename):
        """
        Check if a report name is usable as a file name on every platform.

        Args:
            filename (str): Filename to validate

        Returns:
            bool: True if valid, False otherwise
        """
        if re.search(r'[<>:"/\\|?*]', filename):
            return False
        if filename.split('.')[0].upper() in _RESERVED_NAMES:
            return False
        if not filename.strip() or len(filename) > 255:
            return False
        return True

    def create_directory(self, directory_path):
        """
        Create directory if it doesn't exist.

        Args:
            directory_path (str): Path to directory

        Returns:
            bool: True if successful or already exists, False otherwise
        """
        path_obj = Path(directory_path)
        if path_obj.exists():
            if path_obj.is_dir():
                return True
            self.logger.error(f"Path exists but is not a directory: {directory_path}")
            return False
        try:
            path_obj.mkdir(parents=True, exist_ok=True)
        except PermissionError:
            self.logger.error(f"Permission denied creating directory: {directory_path}")
            return False
        except OSError as e:
            self.logger.error(f"Failed to create directory {directory_path}: {e}")
            return False
        self.logger.debug(f"Created directory: {directory_path}")
        return True

    def _atomic_write(self, target, writer):
        """Write through a temp file in the target directory, then rename."""
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        os.close(fd)
        try:
            writer(tmp)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def write_report(self, out_dir, name, rows, metadata=None, config=None, formats=('csv', 'json')):
        """
        Write report rows as CSV and/or JSON.

        The CSV holds only the data rows. The JSON nests metadata, the config
        echo and the rows.

        Args:
            out_dir (str): Output directory (created when missing)
            name (str): Report base name
            rows (list): Row dicts
            metadata (dict): Report metadata header
            config (dict): Config echo
            formats (iterable): Any of 'csv', 'json'

        Returns:
            list: Paths written
        """
        if not self.is_valid_filename(name):
            raise FixtureError(f"invalid report name: {name!r}")
        if not self.create_directory(out_dir):
            raise FixtureError(f"cannot create output directory: {out_dir}")
        written = []
        if 'csv' in formats:
            target = Path(out_dir) / f"{name}.csv"
            frame = pd.DataFrame([_flatten_row(r) for r in rows])
            self._atomic_write(target, lambda tmp: frame.to_csv(tmp, index=False, float_format='%.17g'))
            written.append(target)
        if 'json' in formats:
            target = Path(out_dir) / f"{name}.json"
            document = {'metadata': metadata or {}, 'config': config or {}, 'rows': rows}

            def dump(tmp):
                with open(tmp, 'w', encoding='utf-8') as f:
                    json.dump(document, f, indent=2, sort_keys=True, default=_json_default)
                    f.write('\n')

            self._atomic_write(target, dump)
            written.append(target)
        for path in written:
            self.logger.info(f"Wrote report: {path}")
        return written
