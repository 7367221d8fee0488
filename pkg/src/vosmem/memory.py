"""Memory banks: append-only, EMA-blended, and constant-size recurrent.

A bank is an ordered list of (key, per-object values) slots.  The
append discipline stores a new slot every ``theta`` frames and grows
without bound; the EMA discipline keeps a reference slot plus one slot
blended in place; the recurrent discipline keeps a fixed set of slots
(reference frame, latest frame, and a recurrent embedding folded
forward by the aggregation module), so its footprint is independent of
stream length.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import sam as sam_mod
from .autodiff import Var
from .encoders import KeyMap, ValueMap
from .tensor import ConfigError, ContractError, DimensionError, DomainError


class Origin(Enum):
    GT = "gt"
    LATEST = "latest"
    RDE = "rde"
    HISTORICAL = "historical"


class Pattern(Enum):
    STM = "stm"
    EMA = "ema"
    SAM = "sam"


@dataclass
class MemorySlot:
    key: KeyMap
    values: ValueMap
    origin: Origin
    frame_index: int

    @property
    def num_objects(self):
        return self.values.num_objects

    def float_count(self) -> int:
        return self.key.k.size + sum(v.size for v in self.values.values)


@dataclass
class MemoryBank:
    pattern: Pattern
    slots: list
    theta: int = 3

    def __post_init__(self):
        if self.theta < 1:
            raise DomainError("sampling interval theta must be >= 1")

    def float_count(self) -> int:
        return sum(s.float_count() for s in self.slots)

    def __len__(self):
        return len(self.slots)


@dataclass
class RdeState:
    """The recurrent embedding carried between updates."""

    k_rde: KeyMap
    v_rde: ValueMap
    last_update_frame: int = 0

    @classmethod
    def from_slot(cls, slot: MemorySlot) -> "RdeState":
        """Seed the recurrence from the reference slot (frame 0)."""
        return cls(KeyMap(slot.key.k.detach()),
                   ValueMap([v.detach() for v in slot.values.values]),
                   last_update_frame=slot.frame_index)

    def as_slot(self) -> MemorySlot:
        return MemorySlot(self.k_rde, self.v_rde, Origin.RDE,
                          self.last_update_frame)


def stm_append(bank: MemoryBank, slot: MemorySlot, frame_index: int) -> MemoryBank:
    """Store ``slot`` iff the frame lands on the sampling cadence."""
    if bank.pattern is not Pattern.STM:
        raise ContractError(f"stm_append on a {bank.pattern.value} bank")
    if frame_index % bank.theta != 0:
        return bank
    return replace(bank, slots=bank.slots + [slot])


def ema_update(old, query, lam: float) -> Var:
    """(1 - lambda) * query + lambda * old, entries already paired."""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"blend strength {lam} outside [0, 1]")
    old, query = ad.as_var(old), ad.as_var(query)
    if old.shape != query.shape:
        raise DimensionError("ema_update operands must share a shape")
    return ad.add(ad.scale(query, 1.0 - lam), ad.scale(old, lam))


def ema_pairing(mem_key: np.ndarray, query_key: np.ndarray) -> np.ndarray:
    """For each memory position, the most cosine-similar query position.

    This is the default pairing rule; callers may substitute their own.
    """
    if mem_key.shape[0] != query_key.shape[0]:
        raise DimensionError("pairing requires matching channel counts")
    mn = mem_key / np.maximum(np.linalg.norm(mem_key, axis=0, keepdims=True), 1e-12)
    qn = query_key / np.maximum(np.linalg.norm(query_key, axis=0, keepdims=True), 1e-12)
    return (mn.T @ qn).argmax(axis=1)


def ema_blend_slot(slot: MemorySlot, query_key: KeyMap, query_values: ValueMap,
                   lam: float, pairing=ema_pairing) -> MemorySlot:
    """Blend a query embedding into a slot, position-paired by ``pairing``."""
    ck, h, w = slot.key.k.shape
    mem_k = slot.key.k.value.reshape(ck, h * w)
    qry_k = query_key.k.value.reshape(ck, h * w)
    pair = pairing(mem_k, qry_k)

    def blend(mem_var: Var, qry_var: Var) -> Var:
        c = mem_var.shape[0]
        mem_flat = ad.reshape(mem_var, (c, h * w))
        qry_flat = ad.reshape(qry_var, (c, h * w))
        sel = np.zeros((h * w, h * w))
        sel[pair, np.arange(h * w)] = 1.0  # column p picks query position pair[p]
        picked = ad.matmul(qry_flat, ad.as_var(sel))
        return ad.reshape(ema_update(mem_flat, picked, lam), (c, h, w))

    new_key = KeyMap(blend(slot.key.k, query_key.k))
    new_vals = ValueMap([blend(m, q) for m, q in
                         zip(slot.values.values, query_values.values)])
    return MemorySlot(new_key, new_vals, slot.origin, slot.frame_index)


def sam_update(rde: RdeState, latest: MemorySlot, params_key: sam_mod.SamParams,
               params_value: sam_mod.SamParams, pool: int = 2) -> RdeState:
    """Fold the latest frame's embedding into the recurrent one.

    Keys and values run through their own aggregation instances; the
    previous recurrent embedding is discarded.  Pure: inputs untouched.
    """
    if latest.origin is not Origin.LATEST:
        raise ContractError(f"sam_update expects a latest-frame slot, "
                            f"got origin {latest.origin.value}")
    ck, h, w = rde.k_rde.k.shape
    if latest.key.k.shape != (ck, h, w):
        raise DimensionError("rde / latest key shapes differ")

    def run(params, prev: Var, new: Var) -> Var:
        c = prev.shape[0]
        out = sam_mod.sam_forward(ad.reshape(prev, (c, 1, h, w)),
                                  ad.reshape(new, (c, 1, h, w)),
                                  params, pool=pool)
        return ad.reshape(out, (c, h, w))

    new_k = KeyMap(run(params_key, rde.k_rde.k, latest.key.k))
    new_v = ValueMap([run(params_value, pv, lv) for pv, lv in
                      zip(rde.v_rde.values, latest.values.values)])
    return RdeState(new_k, new_v, last_update_frame=latest.frame_index)


# Table of recognized bank-composition strategies; tokens may be joined
# with '&' in any combination, e.g. "2F & L & RDE".
_TOKEN_ALIASES = {
    "f": ("f",), "firstframe": ("f",), "2f": ("f", "f"),
    "firstframex2": ("f", "f"),
    "l": ("l",), "latestframe": ("l",), "2l": ("l", "l"),
    "latestframex2": ("l", "l"),
    "rde": ("rde",),
}


def parse_strategy(strategy: str) -> tuple:
    """Normalize a composition string to a tuple of f/l/rde picks."""
    picks = []
    for raw in strategy.split("&"):
        token = raw.strip().lower().replace(" ", "").replace("×", "x")
        if token not in _TOKEN_ALIASES:
            raise ConfigError(f"unknown bank strategy token {raw.strip()!r}")
        picks.extend(_TOKEN_ALIASES[token])
    if not picks:
        raise ConfigError("empty bank strategy")
    return tuple(picks)


def assemble_bank(gt: MemorySlot, latest: MemorySlot, rde: RdeState,
                  strategy: str = "2F & L & RDE", theta: int = 3) -> MemoryBank:
    """Build the constant-size bank for one query frame."""
    picks = parse_strategy(strategy)
    chosen = {"f": gt, "l": latest, "rde": rde.as_slot()}
    slots = [chosen[p] for p in picks]
    return MemoryBank(Pattern.SAM, slots, theta=theta)


def flatten_bank(bank: MemoryBank):
    """Stack slot embeddings into matching matrices.

    Returns ``(keys, values)`` where keys is (ck, n_mem) and values is a
    per-object list of (cv, n_mem); columns are ordered slot-major, then
    row-major over each slot's spatial grid.
    """
    if not bank.slots:
        raise ContractError("cannot flatten an empty bank")
    n_objects = bank.slots[0].num_objects
    for s in bank.slots:
        if s.num_objects != n_objects:
            raise DimensionError("slots disagree on object count")

    def fold(vars_):
        flat = [ad.reshape(v, (v.shape[0], v.shape[1] * v.shape[2]))
                for v in vars_]
        out = flat[0]
        for f in flat[1:]:
            out = ad.concat(out, f, axis=1)
        return out

    keys = fold([s.key.k for s in bank.slots])
    values = [fold([s.values.values[i] for s in bank.slots])
              for i in range(n_objects)]
    return keys, values


def unflatten_keys(flat: np.ndarray, n_slots: int, h: int, w: int) -> list:
    """Inverse of the key half of :func:`flatten_bank`."""
    ck, n_mem = flat.shape
    if n_mem != n_slots * h * w:
        raise DimensionError("flat width does not factor into slots x h x w")
    return [flat[:, i * h * w:(i + 1) * h * w].reshape(ck, h, w)
            for i in range(n_slots)]


_ORIGINS = tuple(Origin)
_PATTERNS = tuple(Pattern)


def save_bank(path, bank: MemoryBank) -> None:
    """Snapshot a bank (for test fixtures and debugging)."""
    from .tensor import save_tensors
    named = {"meta": np.array([_PATTERNS.index(bank.pattern), bank.theta,
                               len(bank.slots)], dtype=np.int64)}
    for i, slot in enumerate(bank.slots):
        named[f"slot{i}_meta"] = np.array(
            [_ORIGINS.index(slot.origin), slot.frame_index,
             slot.num_objects], dtype=np.int64)
        named[f"slot{i}_key"] = slot.key.k.value
        for j, v in enumerate(slot.values.values):
            named[f"slot{i}_val{j}"] = v.value
    save_tensors(path, **named)


def load_bank(path) -> MemoryBank:
    from .tensor import load_tensors
    arrays = load_tensors(path)
    pattern_idx, theta, n_slots = (int(x) for x in arrays["meta"])
    slots = []
    for i in range(n_slots):
        origin_idx, frame_index, n_objects = (int(x)
                                              for x in arrays[f"slot{i}_meta"])
        key = KeyMap(ad.as_var(arrays[f"slot{i}_key"]))
        vals = ValueMap([ad.as_var(arrays[f"slot{i}_val{j}"])
                         for j in range(n_objects)])
        slots.append(MemorySlot(key, vals, _ORIGINS[origin_idx], frame_index))
    return MemoryBank(_PATTERNS[pattern_idx], slots, theta=theta)
