"""Attention readout over the memory bank, plus the stub decoder.

Similarity is the negative squared euclidean distance between key
columns, computed in the expanded form 2*K_m^T K_q - |K_m|^2 - |K_q|^2
(one matmul instead of a pairwise loop).  Per query position the
affinity is a softmax over memory positions, optionally restricted to
the top-k most similar ones; readout is then a weighted sum of memory
values, and a small conv head turns readout + query features into one
logit map per object at full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .encoders import EncoderParams, Frame, ObjectMask, encode_image
from .memory import MemoryBank, flatten_bank
from .tensor import (ContractError, DimensionError, DomainError, load_tensors,
                     save_tensors)

UPSAMPLE = 16


def similarity(mem_keys, query_keys) -> Var:
    """(n_mem, n_query) matrix of -||k_m(p) - k_q(q)||^2."""
    mem_keys, query_keys = ad.as_var(mem_keys), ad.as_var(query_keys)
    if mem_keys.ndim != 2 or query_keys.ndim != 2:
        raise DimensionError("similarity expects (C, N) key matrices")
    ck, nm = mem_keys.shape
    ck2, nq = query_keys.shape
    if ck != ck2:
        raise DimensionError(f"key channel mismatch ({ck} vs {ck2})")
    cross = ad.matmul(ad.transpose(mem_keys), query_keys)
    m_sq = ad.reshape(ad.sum_axis(ad.mul(mem_keys, mem_keys), 0), (nm, 1))
    q_sq = ad.reshape(ad.sum_axis(ad.mul(query_keys, query_keys), 0), (1, nq))
    m_cols = ad.matmul(m_sq, ad.as_var(np.ones((1, nq))))
    q_rows = ad.matmul(ad.as_var(np.ones((nm, 1))), q_sq)
    return ad.sub(ad.scale(cross, 2.0), ad.add(m_cols, q_rows))


def topk_filter(s, k: int) -> Var:
    """Keep the k largest entries per query column, -inf elsewhere.

    Ties break toward the lower memory index so reruns are bit-stable.
    """
    s = ad.as_var(s)
    n_mem = s.shape[0]
    if not 1 <= k <= n_mem:
        raise DomainError(f"top-k {k} outside [1, {n_mem}]")
    order = np.argsort(-s.value, axis=0, kind="stable")
    mask = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(mask, order[:k], True, axis=0)
    return ad.where_mask(s, mask, -np.inf)


def affinity(s) -> Var:
    """Column-wise softmax over memory positions; -inf rows get 0."""
    s = ad.as_var(s)
    if not np.isfinite(s.value).any(axis=0).all():
        raise ContractError("affinity: a query column is fully masked")
    return ad.softmax(s, axis=0)


def readout(weights, mem_values) -> Var:
    """(cv, n_mem) values weighted into (cv, n_query) features."""
    weights, mem_values = ad.as_var(weights), ad.as_var(mem_values)
    return ad.matmul(mem_values, weights)


@dataclass
class DecoderParams:
    """Two-conv logit head over [readout | query value], then x16 nearest."""

    w1: Var  # (hidden, 2*cv, 3, 3)
    w2: Var  # (1, hidden, 3, 3)
    seed: int = 0

    @classmethod
    def create(cls, seed: int, cv: int, hidden: int = 32) -> "DecoderParams":
        rng = np.random.default_rng(np.random.PCG64(seed))

        def gauss(shape):
            fan_in = int(np.prod(shape[1:]))
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        return cls(ad.parameter(gauss((hidden, 2 * cv, 3, 3))),
                   ad.parameter(gauss((1, hidden, 3, 3))), seed=seed)

    def tensors(self) -> dict:
        return {"w1": self.w1, "w2": self.w2}

    def save(self, path):
        save_tensors(path, **{k: v.value for k, v in self.tensors().items()})

    @classmethod
    def load(cls, path, seed: int = 0) -> "DecoderParams":
        arrays = load_tensors(path)
        return cls(ad.parameter(arrays["w1"]), ad.parameter(arrays["w2"]),
                   seed=seed)


def decode(readout_i, query_value, params: DecoderParams) -> Var:
    """Per-object logit map at full resolution (H, W)."""
    readout_i, query_value = ad.as_var(readout_i), ad.as_var(query_value)
    if readout_i.shape != query_value.shape:
        raise DimensionError("readout / query value shapes differ")
    x = ad.concat(readout_i, query_value, axis=0)
    hidden = ad.relu(ad.conv(x, params.w1))
    logit = ad.conv(hidden, params.w2)  # (1, h, w)
    up = ad.upsample_nearest(logit, UPSAMPLE)
    return ad.reshape(up, up.shape[1:])


def fuse_labels(logit_maps: list, num_objects: int) -> np.ndarray:
    """Per-pixel argmax over {background=0} + object logits."""
    stacked = np.stack([np.zeros_like(logit_maps[0])] + list(logit_maps))
    return stacked.argmax(axis=0).astype(np.int64)


def write_mask(path, labels: np.ndarray, fmt: str) -> None:
    """Write an id map as an 8-bit PNG or a portable textual grid."""
    if fmt == "png":
        from PIL import Image
        Image.fromarray(labels.astype(np.uint8), mode="L").save(path)
    elif fmt == "text":
        with open(path, "w") as fh:
            for row in labels:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")
    else:
        raise DomainError(f"unknown mask format {fmt!r}")


def segment_frame(bank: MemoryBank, frame: Frame, enc_params: EncoderParams,
                  dec_params: DecoderParams, topk: int = 40):
    """Segment one frame against a bank.

    Returns the predicted mask, the per-object logit maps, and the
    pre-decoder readout features (the quantity the guidance loss
    compares).  ``topk`` is clamped to the bank's position count.
    """
    if not bank.slots:
        raise ContractError("cannot segment against an empty bank")
    mem_keys, mem_values = flatten_bank(bank)
    key, query_value = encode_image(frame, enc_params)
    ck, h, w = key.k.shape
    query_flat = ad.reshape(key.k, (ck, h * w))

    s = similarity(mem_keys, query_flat)
    s = topk_filter(s, min(topk, mem_keys.shape[1]))
    weights = affinity(s)

    readouts, logits = [], []
    for mv in mem_values:
        r = ad.reshape(readout(weights, mv), (mv.shape[0], h, w))
        readouts.append(r)
        logits.append(decode(r, query_value, dec_params))
    labels = fuse_labels([l.value for l in logits], len(mem_values))
    return ObjectMask(labels, num_objects=len(mem_values)), logits, readouts
