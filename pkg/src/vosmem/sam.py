"""Spatio-temporal aggregation: extract, enhance, squeeze.

``extract`` concatenates the carried embedding and the latest frame's
embedding along time and runs a dot-product non-local block over all
2*h*w positions (queries at full resolution; keys/values on a spatially
max-pooled copy, normalized by the pooled position count -- no softmax).
``enhance`` adds a dilated-conv pyramid residual, and ``squeeze``
compresses the two time steps back to one with a 2x3x3 convolution, so
the carried embedding keeps a constant size no matter how many frames
have been folded into it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .tensor import ContractError, DimensionError, load_tensors, save_tensors

DEFAULT_ASPP_RATES = (1, 2, 4)


def _gaussian(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


@dataclass
class SamParams:
    """Weights of one aggregation module instance (key- or value-sized)."""

    w_omega: Var  # (C, C, 1, 1, 1)
    w_phi: Var
    w_g: Var
    aspp: list  # of Var, (C, C, 1, 3, 3), one per dilation rate
    aspp_merge: Var  # (C, len(rates)*C, 1, 1, 1)
    w_squeeze: Var  # (C, C, 2, 3, 3)
    rates: tuple = DEFAULT_ASPP_RATES
    channels: int = 0
    seed: int = 0

    @classmethod
    def create(cls, seed: int, channels: int,
               rates: tuple = DEFAULT_ASPP_RATES) -> "SamParams":
        rng = np.random.default_rng(np.random.PCG64(seed))
        c = channels
        w_omega = ad.parameter(_gaussian(rng, (c, c, 1, 1, 1)))
        w_phi = ad.parameter(_gaussian(rng, (c, c, 1, 1, 1)))
        w_g = ad.parameter(_gaussian(rng, (c, c, 1, 1, 1)))
        aspp = [ad.parameter(_gaussian(rng, (c, c, 1, 3, 3))) for _ in rates]
        aspp_merge = ad.parameter(_gaussian(rng, (c, len(rates) * c, 1, 1, 1)))
        w_squeeze = ad.parameter(_gaussian(rng, (c, c, 2, 3, 3)))
        return cls(w_omega, w_phi, w_g, aspp, aspp_merge, w_squeeze,
                   rates=tuple(rates), channels=c, seed=seed)

    def tensors(self) -> dict:
        named = {"w_omega": self.w_omega, "w_phi": self.w_phi, "w_g": self.w_g,
                 "aspp_merge": self.aspp_merge, "w_squeeze": self.w_squeeze}
        for rate, w in zip(self.rates, self.aspp):
            named[f"aspp_r{rate}"] = w
        return named

    def save(self, path):
        save_tensors(path, **{k: v.value for k, v in self.tensors().items()})

    @classmethod
    def load(cls, path, rates: tuple = DEFAULT_ASPP_RATES, seed: int = 0):
        arrays = load_tensors(path)
        return cls(ad.parameter(arrays["w_omega"]),
                   ad.parameter(arrays["w_phi"]),
                   ad.parameter(arrays["w_g"]),
                   [ad.parameter(arrays[f"aspp_r{r}"]) for r in rates],
                   ad.parameter(arrays["aspp_merge"]),
                   ad.parameter(arrays["w_squeeze"]),
                   rates=tuple(rates),
                   channels=arrays["w_omega"].shape[0], seed=seed)


def _check_pair(prev: Var, latest: Var):
    if prev.ndim != 4 or prev.shape[1] != 1:
        raise DimensionError(f"expected (C, 1, h, w), got {prev.shape}")
    if prev.shape != latest.shape:
        raise DimensionError(
            f"previous/latest shapes differ: {prev.shape} vs {latest.shape}")


def extract(prev, latest, params: SamParams, pool: int = 2) -> Var:
    """Non-local aggregation over the time-concatenated pair."""
    prev, latest = ad.as_var(prev), ad.as_var(latest)
    _check_pair(prev, latest)
    c, _, h, w = prev.shape
    x = ad.concat(prev, latest, axis=1)  # (C, 2, h, w)
    xd = x if pool == 1 else ad.maxpool2d(x, pool, pool)
    hd, wd = xd.shape[2], xd.shape[3]

    omega = ad.reshape(ad.conv(x, params.w_omega), (c, 2 * h * w))
    phi = ad.reshape(ad.conv(xd, params.w_phi), (c, 2 * hd * wd))
    g = ad.reshape(ad.conv(xd, params.w_g), (c, 2 * hd * wd))

    # x_agg(p) = (1/N_pool) * sum_q <omega_p, phi_q> g_q
    scores = ad.matmul(ad.transpose(phi), omega)  # (N_pool, N_full)
    agg = ad.scale(ad.matmul(g, scores), 1.0 / (2 * hd * wd))
    return ad.reshape(agg, (c, 2, h, w))


def enhance(x_agg, params: SamParams) -> Var:
    """Residual dilated-conv pyramid applied per time step."""
    x_agg = ad.as_var(x_agg)
    if x_agg.ndim != 4:
        raise DimensionError(f"expected (C, T, h, w), got {x_agg.shape}")
    branches = None
    for rate, w in zip(params.rates, params.aspp):
        b = ad.conv(x_agg, w, dilation=rate)
        branches = b if branches is None else ad.concat(branches, b, axis=0)
    return ad.add(x_agg, ad.conv(branches, params.aspp_merge))


def squeeze(x, params: SamParams) -> Var:
    """Compress two time steps to one; spatial dims preserved."""
    x = ad.as_var(x)
    if x.ndim != 4 or x.shape[1] != 2:
        raise ContractError(f"squeeze expects time dim 2, got {x.shape}")
    return ad.conv(x, params.w_squeeze)


def sam_forward(prev, latest, params: SamParams, pool: int = 2) -> Var:
    """Full aggregation step: (C,1,h,w) x (C,1,h,w) -> (C,1,h,w)."""
    return squeeze(enhance(extract(prev, latest, params, pool=pool), params),
                   params)
