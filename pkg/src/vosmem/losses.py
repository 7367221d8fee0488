"""Training objective for the constant-size bank.

Three terms: bootstrapped cross-entropy on the segmentation logits, a
guidance KL that pulls the constant-bank readout distribution toward
the (gradient-detached) growing-bank readout distribution, and a mask
consistency KL between embeddings of the clean first-frame mask and a
morphologically perturbed copy.  Raw features are made into
distributions by a channel-axis softmax at each spatial location.

``train_step`` wires the whole five-frame schedule together: the
growing bank segments frames 2 and 4, the constant bank segments
frames 3 and 5, the guidance term applies on frames 3 and 5 only, and
the consistency term is computed once from frame 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Var
from .encoders import (EncoderParams, Frame, KeyMap, ObjectMask, ValueMap,
                       encode_mask)
from .memory import (MemoryBank, MemorySlot, Origin, Pattern, RdeState,
                     assemble_bank, sam_update)
from .readout import DecoderParams, segment_frame
from .sam import SamParams
from .tensor import ContractError, DimensionError, DomainError


@dataclass(frozen=True)
class LossWeights:
    mu: float = 10.0         # guidance term weight
    gamma: float = 10.0      # mask consistency weight
    bootstrap_ratio: float = 1.0

    def __post_init__(self):
        if self.mu < 0 or self.gamma < 0:
            raise DomainError("loss weights must be nonnegative")
        if not 0.0 < self.bootstrap_ratio <= 1.0:
            raise DomainError("bootstrap ratio must lie in (0, 1]")


@dataclass
class TrainClip:
    frames: list   # 5 Frames
    gt_masks: list  # 5 ObjectMasks

    def __post_init__(self):
        if len(self.frames) != 5 or len(self.gt_masks) != 5:
            raise ContractError("a training clip holds exactly 5 frames")
        hw = self.frames[0].hw
        n = self.gt_masks[0].num_objects
        for f, m in zip(self.frames, self.gt_masks):
            if f.hw != hw or m.labels.shape != hw or m.num_objects != n:
                raise DimensionError("clip frames/masks are inconsistent")

    @property
    def num_objects(self):
        return self.gt_masks[0].num_objects


def bootstrapped_ce(class_logits, gt: ObjectMask, ratio: float = 1.0) -> Var:
    """Pixelwise softmax cross-entropy, averaged over the hardest pixels.

    ``class_logits`` is (num_objects+1, H, W) with channel 0 the
    background; ``ratio`` = 1 reduces to plain cross-entropy.
    """
    if not 0.0 < ratio <= 1.0:
        raise DomainError(f"bootstrap ratio {ratio} outside (0, 1]")
    class_logits = ad.as_var(class_logits)
    c, h, w = class_logits.shape
    if gt.labels.shape != (h, w) or gt.num_objects + 1 != c:
        raise DimensionError("logits do not match the ground-truth mask")
    onehot = np.zeros((c, h, w))
    np.put_along_axis(onehot, gt.labels[None], 1.0, axis=0)
    ls = ad.log_softmax(class_logits, axis=0)
    ce_map = ad.neg(ad.sum_axis(ad.mul(ls, ad.as_var(onehot)), 0))
    if ratio == 1.0:
        return ad.mean_all(ce_map)
    keep = math.ceil(ratio * h * w)
    order = np.argsort(-ce_map.value.ravel(), kind="stable")[:keep]
    mask = np.zeros(h * w)
    mask[order] = 1.0  # selection fixed at forward time
    picked = ad.mul(ad.reshape(ce_map, (h * w,)), ad.as_var(mask))
    return ad.scale(ad.sum_all(picked), 1.0 / keep)


def feature_distribution(f) -> Var:
    """Channel-axis softmax at each spatial location."""
    return ad.softmax(ad.as_var(f), axis=0)


def unbiased_guidance_loss(readouts_teacher: list, readouts_student: list) -> Var:
    """Sum over objects of KL(teacher dist || student dist).

    The teacher side is detached: gradients flow into the student
    readout only, so guidance cannot collapse the teacher.
    """
    if len(readouts_teacher) != len(readouts_student):
        raise DimensionError("object counts differ between banks")
    total = None
    for t, s in zip(readouts_teacher, readouts_student):
        t, s = ad.as_var(t), ad.as_var(s)
        if t.shape != s.shape:
            raise DimensionError("readout shapes differ between banks")
        term = ad.kl_divergence(feature_distribution(ad.detach(t)),
                                feature_distribution(s), axis=0)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ContractError("guidance loss needs at least one object")
    return total


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def perturb_mask(mask: ObjectMask, rng: np.random.Generator,
                 radius_max: int = 5) -> ObjectMask:
    """Randomly dilate or erode each object with a seeded disk element.

    Overlaps resolve in favour of the lower object id; vacated pixels
    become background.  ``radius_max`` = 0 is the identity hook.  An
    object may vanish entirely under erosion.
    """
    if radius_max == 0:
        return ObjectMask(mask.labels.copy(), mask.num_objects)
    new_labels = np.zeros_like(mask.labels)
    per_object = []
    for obj in range(1, mask.num_objects + 1):
        grow = rng.random() < 0.5
        radius = int(rng.integers(1, radius_max + 1))
        binary = mask.labels == obj
        op = ndimage.binary_dilation if grow else ndimage.binary_erosion
        per_object.append(op(binary, structure=_disk(radius)))
    for obj in range(mask.num_objects, 0, -1):  # low ids overwrite last
        new_labels[per_object[obj - 1]] = obj
    return ObjectMask(new_labels, mask.num_objects)


def mask_consistency_loss(frame1: Frame, gt_mask: ObjectMask,
                          perturbed: ObjectMask, enc: EncoderParams) -> Var:
    """KL between clean and perturbed first-frame embeddings.

    One key term plus one value term per object.  With a strictly
    target-agnostic key encoder the key term is identically zero; it is
    kept because the formula includes it.
    """
    if gt_mask.labels.shape != perturbed.labels.shape:
        raise DimensionError("masks must share dimensions")
    k_clean, v_clean = encode_mask(frame1, gt_mask, enc)
    k_pert, v_pert = encode_mask(frame1, perturbed, enc)
    total = ad.kl_divergence(feature_distribution(k_clean.k),
                             feature_distribution(k_pert.k), axis=0)
    for vc, vp in zip(v_clean.values, v_pert.values):
        total = ad.add(total, ad.kl_divergence(feature_distribution(vc),
                                               feature_distribution(vp),
                                               axis=0))
    return total


@dataclass
class FrameOutputs:
    """What one bank produced for one query frame."""

    class_logits: Var  # (num_objects+1, H, W); channel 0 = background at 0
    readouts: list     # per-object (cv, h, w) pre-decoder features


def stack_class_logits(per_object_logits: list) -> Var:
    """Prefix the fixed background-zero channel to per-object logit maps."""
    h, w = per_object_logits[0].shape
    out = ad.as_var(np.zeros((1, h, w)))
    for logit in per_object_logits:
        out = ad.concat(out, ad.reshape(logit, (1, h, w)), axis=0)
    return out


def frame_outputs(bank: MemoryBank, frame: Frame, enc: EncoderParams,
                  dec: DecoderParams, topk: int = 40) -> FrameOutputs:
    _, logits, readouts = segment_frame(bank, frame, enc, dec, topk=topk)
    return FrameOutputs(stack_class_logits(logits), readouts)


STM_FRAMES = (2, 4)  # 1-based schedule within the clip
SAM_FRAMES = (3, 5)


def total_loss(clip: TrainClip, stm_outputs: dict, sam_outputs: dict,
               mc: Var, weights: LossWeights):
    """Combined objective; returns the scalar plus a float breakdown.

    ``stm_outputs`` / ``sam_outputs`` map 1-based frame numbers (2..5)
    to :class:`FrameOutputs`; the growing bank's logits supervise
    frames 2 and 4, the constant bank's frames 3 and 5, and guidance
    compares readouts on frames 3 and 5.
    """
    for t in STM_FRAMES + SAM_FRAMES:
        if t not in stm_outputs:
            raise ContractError(f"missing growing-bank outputs for frame {t}")
    for t in SAM_FRAMES:
        if t not in sam_outputs:
            raise ContractError(f"missing constant-bank outputs for frame {t}")
    seg = None
    for t in STM_FRAMES:
        term = bootstrapped_ce(stm_outputs[t].class_logits,
                               clip.gt_masks[t - 1], weights.bootstrap_ratio)
        seg = term if seg is None else ad.add(seg, term)
    for t in SAM_FRAMES:
        term = bootstrapped_ce(sam_outputs[t].class_logits,
                               clip.gt_masks[t - 1], weights.bootstrap_ratio)
        seg = ad.add(seg, term)
    seg = ad.scale(seg, 0.5)

    guidance = None
    for t in SAM_FRAMES:
        term = unbiased_guidance_loss(stm_outputs[t].readouts,
                                      sam_outputs[t].readouts)
        guidance = term if guidance is None else ad.add(guidance, term)

    total = ad.add(seg, ad.add(ad.scale(guidance, weights.mu),
                               ad.scale(mc, weights.gamma)))
    parts = {"seg": seg.item(), "ug": guidance.item(), "mc": mc.item(),
             "total": total.item()}
    return total, parts


@dataclass
class AdamSlots:
    """First/second moment accumulators, one pair per parameter."""

    m: list
    v: list
    step: int = 0


@dataclass
class TrainState:
    """All trainable parameter groups plus optimizer slots."""

    enc: EncoderParams
    dec: DecoderParams
    key_sam: SamParams
    value_sam: SamParams
    opt: AdamSlots | None = None

    @classmethod
    def create(cls, seed: int, ck: int = 64, cv: int = 512,
               hidden: int = 32) -> "TrainState":
        return cls(EncoderParams.create(seed, ck=ck, cv=cv),
                   DecoderParams.create(seed + 1, cv=cv, hidden=hidden),
                   SamParams.create(seed + 2, channels=ck),
                   SamParams.create(seed + 3, channels=cv))

    def parameters(self) -> list:
        out = list(self.enc.tensors().values())
        out += list(self.dec.tensors().values())
        out += list(self.key_sam.tensors().values())
        out += list(self.value_sam.tensors().values())
        return out


def _clip_forward(clip: TrainClip, state: TrainState, weights: LossWeights,
                  rng: np.random.Generator, topk: int, pool: int,
                  radius_max: int, strategy: str):
    """One differentiable pass over the five-frame schedule."""
    slots = []
    for idx, (frame, gt) in enumerate(zip(clip.frames, clip.gt_masks), start=1):
        key, values = encode_mask(frame, gt, state.enc)
        origin = Origin.GT if idx == 1 else Origin.LATEST
        slots.append(MemorySlot(key, values, origin, idx))

    gt_slot = slots[0]
    rde = RdeState(KeyMap(gt_slot.key.k),
                   ValueMap(list(gt_slot.values.values)), last_update_frame=1)

    stm_outputs, sam_outputs = {}, {}
    for t in range(2, 6):
        latest = slots[t - 2]
        if latest.origin is not Origin.LATEST:  # frame 1 doubles as latest
            latest = MemorySlot(latest.key, latest.values, Origin.LATEST,
                                latest.frame_index)
        rde = sam_update(rde, latest, state.key_sam, state.value_sam, pool=pool)
        stm_bank = MemoryBank(Pattern.STM, slots[:t - 1], theta=1)
        frame = clip.frames[t - 1]
        stm_outputs[t] = frame_outputs(stm_bank, frame, state.enc, state.dec, topk)
        if t in SAM_FRAMES:
            sam_bank = assemble_bank(gt_slot, latest, rde, strategy)
            sam_outputs[t] = frame_outputs(sam_bank, frame, state.enc,
                                           state.dec, topk)

    perturbed = perturb_mask(clip.gt_masks[0], rng, radius_max=radius_max)
    mc = mask_consistency_loss(clip.frames[0], clip.gt_masks[0], perturbed,
                               state.enc)
    return total_loss(clip, stm_outputs, sam_outputs, mc, weights)


def train_step(clip: TrainClip, state: TrainState, weights: LossWeights,
               lr: float, rng: np.random.Generator, topk: int = 40,
               pool: int = 1, radius_max: int = 5,
               strategy: str = "2F & L & RDE",
               betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> dict:
    """One adaptive gradient-descent update of every parameter group.

    Plain SGD stalls at desk scale (the logit head needs thousands of
    steps to cross its plateau at practical learning rates), so updates
    use Adam-style per-coordinate normalization.  Returns the loss
    breakdown for the step; aborts on a non-finite loss rather than
    silently corrupting the parameters.
    """
    with ad.Tape():
        total, parts = _clip_forward(clip, state, weights, rng, topk, pool,
                                     radius_max, strategy)
        if not math.isfinite(parts["total"]):
            raise DomainError(f"non-finite training loss: {parts}")
        ad.backward(total)
    params = state.parameters()
    if state.opt is None:
        state.opt = AdamSlots([np.zeros_like(p.value) for p in params],
                              [np.zeros_like(p.value) for p in params])
    b1, b2 = betas
    state.opt.step += 1
    t = state.opt.step
    for p, m, v in zip(params, state.opt.m, state.opt.v):
        g = p.grad_or_zeros()
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
    return parts


def train_loop(clip: TrainClip, state: TrainState, weights: LossWeights,
               lr: float, steps: int, seed: int, **step_kwargs) -> list:
    """Run ``steps`` updates; returns one loss-breakdown row per step."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    history = []
    for step in range(1, steps + 1):
        parts = train_step(clip, state, weights, lr, rng, **step_kwargs)
        history.append({"step": step, **parts})
    return history


LOSS_CURVE_COLUMNS = ("step", "seg", "ug", "mc", "total")


def write_loss_curve(history: list, path) -> None:
    """Loss curve as CSV rows: step, L_Seg, L_UG, L_MC, total."""
    lines = [",".join(LOSS_CURVE_COLUMNS)]
    for row in history:
        lines.append(",".join(repr(float(row[c])) if c != "step"
                              else str(row[c]) for c in LOSS_CURVE_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
