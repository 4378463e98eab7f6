import math
import os
import tempfile
from collections.abc import Mapping
from contextlib import contextmanager

import numpy as np


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def image_side_of(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"{n} pixels do not form a square image")
    return side


def relative_error(actual, expected, floor: float = 1e-8) -> float:
    """ Norm-wise relative error with an absolute floor for near-zero references """
    actual = np.asarray(actual, dtype=np.float64).ravel()
    expected = np.asarray(expected, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(actual), np.linalg.norm(expected), floor)
    return float(np.linalg.norm(actual - expected) / scale)


@contextmanager
def atomic_write(path, mode="w", **kwargs):
    """
    Write to a temp file next to path and rename it into place, so readers never see a torn file
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(str(path)))
    try:
        with os.fdopen(fd, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


class BaseDict(Mapping):
    def __init__(self, entries):
        self._storage = entries

    def __getitem__(self, key):
        value = self._storage[key]
        # numpy scalars leak out of reductions, hand out plain python values
        if isinstance(value, np.generic):
            return value.item()
        return value

    def __setitem__(self, key, value):
        self._storage[key] = value

    def __iter__(self):
        return iter(self._storage)

    def __len__(self):
        return len(self._storage)

    def get_data(self):
        return {key: self[key] for key in self._storage}
