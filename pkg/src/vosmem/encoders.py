"""Seeded convolutional stand-ins for the image and mask encoders.

A single four-stage stride-2 trunk (3x3 conv + relu) runs over the RGB
channels plus one mask channel, landing at 1/16 resolution.  Two 1x1
projection heads produce the matching embedding (key, ``ck`` channels,
computed with the mask channel zeroed so it is target-agnostic) and the
per-object content embedding (value, ``cv`` channels, one trunk pass per
object with that object's binary mask in the fourth channel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .tensor import DimensionError, DomainError, load_tensors, save_tensors

STRIDE_TOTAL = 16
_TRUNK_CHANNELS = (16, 32, 32, 32)


@dataclass(frozen=True)
class Frame:
    """One RGB frame, values in [0, 1]."""

    pixels: np.ndarray  # (3, H, W)
    index: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DimensionError(f"frame must be (3, H, W), got {self.pixels.shape}")
        h, w = self.pixels.shape[1:]
        if h % STRIDE_TOTAL or w % STRIDE_TOTAL:
            raise DimensionError(f"frame dims {h}x{w} must be divisible by {STRIDE_TOTAL}")

    @property
    def hw(self):
        return self.pixels.shape[1:]


@dataclass(frozen=True)
class ObjectMask:
    """Integer id map; 0 is background, objects are 1..num_objects."""

    labels: np.ndarray  # (H, W) ints
    num_objects: int

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DimensionError("mask labels must be 2-D")
        if self.num_objects < 1:
            raise DomainError("num_objects must be >= 1")
        if self.labels.min() < 0 or self.labels.max() > self.num_objects:
            raise DomainError("mask ids must lie in {0..num_objects}")

    def binary(self, obj_id: int) -> np.ndarray:
        if not 1 <= obj_id <= self.num_objects:
            raise DomainError(f"object id {obj_id} out of range")
        return (self.labels == obj_id).astype(np.float64)


@dataclass
class KeyMap:
    """Target-agnostic matching embedding at 1/16 resolution."""

    k: Var  # (ck, h, w)

    @property
    def shape(self):
        return self.k.shape


@dataclass
class ValueMap:
    """Per-object content embeddings at 1/16 resolution."""

    values: list  # of Var, each (cv, h, w)

    @property
    def num_objects(self):
        return len(self.values)


def _gaussian(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


@dataclass
class EncoderParams:
    """Trainable weights of the trunk and the two projection heads."""

    trunk: list  # of Var, 3x3 stride-2 kernels
    key_head: Var  # (ck, c_last, 1, 1)
    value_head: Var  # (cv, c_last, 1, 1)
    seed: int = 0
    ck: int = 64
    cv: int = 512

    @classmethod
    def create(cls, seed: int, ck: int = 64, cv: int = 512) -> "EncoderParams":
        rng = np.random.default_rng(np.random.PCG64(seed))
        trunk, c_in = [], 4
        for c_out in _TRUNK_CHANNELS:
            trunk.append(ad.parameter(_gaussian(rng, (c_out, c_in, 3, 3))))
            c_in = c_out
        key_head = ad.parameter(_gaussian(rng, (ck, c_in, 1, 1)))
        value_head = ad.parameter(_gaussian(rng, (cv, c_in, 1, 1)))
        return cls(trunk, key_head, value_head, seed=seed, ck=ck, cv=cv)

    def tensors(self) -> dict:
        named = {f"trunk{i}": w for i, w in enumerate(self.trunk)}
        named["key_head"] = self.key_head
        named["value_head"] = self.value_head
        return named

    def save(self, path):
        save_tensors(path, **{k: v.value for k, v in self.tensors().items()})

    @classmethod
    def load(cls, path, seed: int = 0) -> "EncoderParams":
        arrays = load_tensors(path)
        trunk = [ad.parameter(arrays[f"trunk{i}"])
                 for i in range(len(_TRUNK_CHANNELS))]
        key_head = ad.parameter(arrays["key_head"])
        value_head = ad.parameter(arrays["value_head"])
        return cls(trunk, key_head, value_head, seed=seed,
                   ck=key_head.shape[0], cv=value_head.shape[0])


def _trunk_features(pixels: np.ndarray, mask_channel: np.ndarray,
                    params: EncoderParams) -> Var:
    x = ad.as_var(np.concatenate([pixels, mask_channel[None]], axis=0))
    for w in params.trunk:
        x = ad.relu(ad.conv(x, w, stride=2))
    return x


def encode_image(frame: Frame, params: EncoderParams):
    """Key and query-value features of a frame, mask channel zeroed."""
    feat = _trunk_features(frame.pixels, np.zeros(frame.hw), params)
    key = ad.conv(feat, params.key_head)
    query_value = ad.conv(feat, params.value_head)
    return KeyMap(key), query_value


def encode_mask(frame: Frame, mask: ObjectMask, params: EncoderParams):
    """Key (mask-independent) plus one value embedding per object."""
    if mask.labels.shape != frame.hw:
        raise DimensionError(
            f"mask dims {mask.labels.shape} do not match frame {frame.hw}")
    key, _ = encode_image(frame, params)
    values = []
    for obj in range(1, mask.num_objects + 1):
        feat = _trunk_features(frame.pixels, mask.binary(obj), params)
        values.append(ad.conv(feat, params.value_head))
    return key, ValueMap(values)
