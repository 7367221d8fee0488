"""Dense float64 tensors: validation helpers, error taxonomy, serialization.

Every array that flows through the engine is a C-contiguous float64
ndarray.  The (de)serialization format is the standard ``.npy`` record
(dtype tag, rank, shape, row-major data), which round-trips bit-exactly.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "ContractError",
    "ConfigError",
    "tensor",
    "check_finite",
    "save_tensor",
    "load_tensor",
    "save_tensors",
    "load_tensors",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's domain."""


class ContractError(RuntimeError):
    """A caller violated an interface precondition."""


class ConfigError(ValueError):
    """Unknown or inconsistent configuration value."""


def tensor(data) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float64 array (0-d preserved)."""
    a = np.asarray(data, dtype=np.float64)
    return a if a.flags["C_CONTIGUOUS"] else np.ascontiguousarray(a)


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(a).all():
        raise DomainError(f"{what} contains NaN/Inf")
    return a


def save_tensor(path, a: np.ndarray) -> None:
    """Write one array as a flat binary record; bit-exact on reload."""
    with open(path, "wb") as fh:
        np.save(fh, np.ascontiguousarray(a), allow_pickle=False)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return np.load(fh, allow_pickle=False)


def save_tensors(path, **named: np.ndarray) -> None:
    """Write a named bundle of arrays (uncompressed, deterministic order)."""
    np.savez(path, **{k: np.ascontiguousarray(v) for k, v in sorted(named.items())})


def load_tensors(path) -> dict:
    with np.load(path, allow_pickle=False) as bundle:
        return {k: bundle[k] for k in bundle.files}
