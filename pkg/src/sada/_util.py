import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from sada.errors import SadaError


def fingerprint_arrays(*arrays, extra=""):
    """sha256 over dtype, shape and raw bytes of each array, plus an optional tag."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    h.update(extra.encode())
    return h.hexdigest()


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_grid_csv(path, grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("CSV grids must be 2-D")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # %.17g round-trips float64 exactly
    np.savetxt(path, grid, delimiter=",", fmt="%.17g")


def read_grid_csv(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


@contextmanager
def run_dir_lock(directory):
    """Exclusive ownership of a run directory via an O_EXCL lock file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise SadaError(f"run directory {directory} is locked by another process ({lock})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)
