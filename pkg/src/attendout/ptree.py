"""Helpers over nested dataclasses of numpy arrays ("parameter trees").

Gradient trees reuse the parameter dataclasses: zeros_like produces the
same structure with zeroed arrays, and the pairwise ops walk two trees of
identical shape. Non-array fields (hyperparameters, temperatures) ride
along untouched, giving one generic path for optimizers, checkpointing and
finite-difference flattening.
"""

from __future__ import annotations

import copy
import dataclasses

import numpy as np


def _is_tree(obj) -> bool:
    return dataclasses.is_dataclass(obj) and not isinstance(obj, type)


def iter_arrays(tree, prefix: str = ""):
    """Yield (path, array) leaves in a deterministic field order."""
    if _is_tree(tree):
        for f in dataclasses.fields(tree):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_arrays(getattr(tree, f.name), name)
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from iter_arrays(item, f"{prefix}.{i}")
    elif isinstance(tree, np.ndarray):
        yield prefix, tree


def copy_tree(tree):
    out = copy.deepcopy(tree)
    return out


def zeros_like(tree):
    out = copy.deepcopy(tree)
    for _, arr in iter_arrays(out):
        arr[...] = 0.0
    return out


def add_scaled(target, source, scale: float = 1.0) -> None:
    """target += scale * source, leafwise in place."""
    for (name_t, a), (name_s, b) in zip(iter_arrays(target), iter_arrays(source)):
        if name_t != name_s or a.shape != b.shape:
            raise ValueError(f"tree mismatch at {name_t} vs {name_s}")
        a += scale * b


def scale_(tree, factor: float) -> None:
    for _, arr in iter_arrays(tree):
        arr *= factor


def flatten(tree) -> np.ndarray:
    parts = [arr.ravel() for _, arr in iter_arrays(tree)]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def set_flat(tree, vec: np.ndarray) -> None:
    """Write a flat vector back into the tree's arrays, in place."""
    vec = np.asarray(vec, dtype=np.float64)
    offset = 0
    for _, arr in iter_arrays(tree):
        n = arr.size
        arr[...] = vec[offset:offset + n].reshape(arr.shape)
        offset += n
    if offset != vec.size:
        raise ValueError(f"vector length {vec.size} != tree size {offset}")


def num_params(tree) -> int:
    return sum(arr.size for _, arr in iter_arrays(tree))


def trees_equal(a, b) -> bool:
    """Bitwise equality of all array leaves."""
    leaves_a = list(iter_arrays(a))
    leaves_b = list(iter_arrays(b))
    if [n for n, _ in leaves_a] != [n for n, _ in leaves_b]:
        return False
    return all(np.array_equal(x, y) for (_, x), (_, y) in zip(leaves_a, leaves_b))


def first_nonfinite(tree) -> str | None:
    for name, arr in iter_arrays(tree):
        if not np.all(np.isfinite(arr)):
            return name
    return None
