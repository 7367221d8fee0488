"""Streaming benchmark harness.

Generates synthetic long videos (a short clip played forward and
backward, tiled R times, so every frame has an exact mask and the seams
stay smooth), streams them through a chosen memory discipline while
metering per-frame latency and bank footprint, and produces the
comparison and bank-composition ablation tables as CSV/JSON reports.
Only region similarity {IoU} is scored; contour accuracy needs boundary
machinery that is out of scope here and reports label the column
accordingly.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .config import EngineConfig
from .encoders import (EncoderParams, Frame, ObjectMask, encode_mask)
from .memory import (MemoryBank, MemorySlot, Origin, Pattern, RdeState,
                     assemble_bank, ema_blend_slot, parse_strategy, sam_update,
                     stm_append)
from .readout import DecoderParams, segment_frame
from .sam import SamParams
from .tensor import ConfigError, ContractError, DomainError

MAX_SYNTH_RETRIES = 32


# ---------------------------------------------------------------------------
# synthetic video generation

@dataclass
class SyntheticVideo:
    frames: list
    gt_masks: list
    repeat_factor: int  # 0 marks a raw (not yet palindromed) unit
    base_length: int
    seed: int = 0

    def __len__(self):
        return len(self.frames)

    @property
    def num_objects(self):
        return self.gt_masks[0].num_objects


def _textured_background(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    channels = []
    for _ in range(3):
        tex = np.zeros((h, w))
        for _ in range(4):
            fy, fx = rng.uniform(1, 6, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            tex += rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9)
        channels.append(0.15 + 0.5 * tex)
    return np.stack(channels)


@dataclass
class _Shape:
    kind: str  # disk | square
    size: int
    color: np.ndarray
    pos: np.ndarray  # float (y, x) center
    vel: np.ndarray  # <= 2 px/frame per axis

    def footprint(self, h, w):
        cy, cx = self.pos
        yy, xx = np.mgrid[0:h, 0:w]
        if self.kind == "disk":
            return (yy - cy) ** 2 + (xx - cx) ** 2 <= self.size ** 2
        return (np.abs(yy - cy) <= self.size) & (np.abs(xx - cx) <= self.size)

    def advance(self, h, w):
        self.pos = self.pos + self.vel
        for axis, bound in ((0, h - 1), (1, w - 1)):
            if self.pos[axis] < self.size:
                self.pos[axis] = 2 * self.size - self.pos[axis]
                self.vel[axis] = -self.vel[axis]
            elif self.pos[axis] > bound - self.size:
                self.pos[axis] = 2 * (bound - self.size) - self.pos[axis]
                self.vel[axis] = -self.vel[axis]


def _try_synth(seed, base_len, h, w, num_objects):
    rng = np.random.default_rng(np.random.PCG64(seed))
    background = _textured_background(rng, h, w)
    size_lo, size_hi = max(2, h // 12), max(3, h // 7)
    shapes = []
    for _ in range(num_objects):
        size = int(rng.integers(size_lo, size_hi + 1))
        pos = rng.uniform(size, [h - 1 - size, w - 1 - size])
        vel = rng.uniform(-2, 2, size=2)
        shapes.append(_Shape("disk" if rng.random() < 0.5 else "square",
                             size, rng.uniform(0.3, 1.0, size=3), pos, vel))
    frames, masks = [], []
    for t in range(base_len):
        pixels = background.copy()
        labels = np.zeros((h, w), dtype=np.int64)
        for obj in range(num_objects, 0, -1):  # low ids drawn last, on top
            fp = shapes[obj - 1].footprint(h, w)
            labels[fp] = obj
            pixels[:, fp] = shapes[obj - 1].color[:, None]
        for obj in range(1, num_objects + 1):
            if not (labels == obj).any():
                return None  # fully occluded object: caller reseeds
        frames.append(Frame(np.clip(pixels, 0.0, 1.0), index=t))
        masks.append(ObjectMask(labels, num_objects))
        for s in shapes:
            s.advance(h, w)
    return SyntheticVideo(frames, masks, repeat_factor=0,
                          base_length=base_len, seed=seed)


def synth_base_clip(seed: int, base_len: int, h: int, w: int,
                    num_objects: int) -> SyntheticVideo:
    """Rigid colored shapes drifting over a textured background.

    Motion is at most 2 px/frame with border reflection; masks are the
    exact rasterized footprints.  If any object ends up fully occluded
    the clip is regenerated with the next seed.
    """
    if h % 16 or w % 16:
        raise DomainError(f"frame dims {h}x{w} must be divisible by 16")
    for attempt in range(MAX_SYNTH_RETRIES):
        video = _try_synth(seed + attempt, base_len, h, w, num_objects)
        if video is not None:
            return video
    raise ContractError(f"could not synthesize a clip near seed {seed}")


def synth_long_video(unit: SyntheticVideo, repeat: int) -> SyntheticVideo:
    """Tile (unit forward + unit reversed) ``repeat`` times."""
    if repeat < 1:
        raise DomainError("repeat factor must be >= 1")
    if unit.repeat_factor != 0:
        raise ContractError("synth_long_video expects a raw unit")
    frames, masks = [], []
    for _ in range(repeat):
        for src in (unit.frames, unit.frames[::-1]):
            frames.extend(src)
        for src in (unit.gt_masks, unit.gt_masks[::-1]):
            masks.extend(src)
    frames = [Frame(f.pixels, index=i) for i, f in enumerate(frames)]
    return SyntheticVideo(frames, masks, repeat_factor=repeat,
                          base_length=unit.base_length, seed=unit.seed)


def save_video(path, video: SyntheticVideo):
    np.savez(path,
             frames=np.stack([f.pixels for f in video.frames]),
             masks=np.stack([m.labels for m in video.gt_masks]),
             meta=np.array([video.base_length, video.repeat_factor,
                            video.num_objects, video.seed], dtype=np.int64))


def load_video(path) -> SyntheticVideo:
    with np.load(path, allow_pickle=False) as data:
        frames = [Frame(p, index=i) for i, p in enumerate(data["frames"])]
        base_len, repeat, n_obj, seed = (int(x) for x in data["meta"])
        masks = [ObjectMask(m, n_obj) for m in data["masks"]]
    return SyntheticVideo(frames, masks, repeat_factor=repeat,
                          base_length=base_len, seed=seed)


# ---------------------------------------------------------------------------
# streaming runs

@dataclass
class FrameRecord:
    frame_index: int
    latency_s: float
    slots: int
    floats: int
    iou: list  # per object

    @property
    def iou_mean(self) -> float:
        return float(sum(self.iou) / len(self.iou))


@dataclass
class RunReport:
    pattern: str
    records: list = field(default_factory=list)

    def mean_latency_s(self) -> float:
        return float(np.mean([r.latency_s for r in self.records]))

    def peak_floats(self) -> int:
        return max(r.floats for r in self.records)

    def mean_iou(self) -> float:
        return float(np.mean([r.iou_mean for r in self.records]))


def mask_iou(pred: np.ndarray, gt: ObjectMask) -> list:
    """Per-object intersection over union; empty-vs-empty counts as 1."""
    out = []
    for obj in range(1, gt.num_objects + 1):
        p = pred == obj
        g = gt.labels == obj
        union = (p | g).sum()
        out.append(1.0 if union == 0 else float((p & g).sum() / union))
    return out


def _build_params(cfg: EngineConfig, pattern: Pattern):
    enc = EncoderParams.create(cfg.encoder_seed, ck=cfg.ck, cv=cfg.cv)
    dec = DecoderParams.create(cfg.decoder_seed, cv=cfg.cv,
                               hidden=cfg.decoder_hidden)
    key_sam = value_sam = None
    if pattern is Pattern.SAM:
        key_sam = SamParams.create(cfg.sam_seed, channels=cfg.ck,
                                   rates=cfg.aspp_rates)
        value_sam = SamParams.create(cfg.sam_seed + 1, channels=cfg.cv,
                                     rates=cfg.aspp_rates)
    return enc, dec, key_sam, value_sam


def run_stream(video: SyntheticVideo, pattern, cfg: EngineConfig | None = None,
               params=None, reps: int = 3,
               collect_masks: list | None = None) -> RunReport:
    """Stream a video through one memory discipline.

    Frame 0 seeds the bank from the ground-truth mask (its prediction
    is the ground truth by protocol); every later frame is segmented
    against the current bank, then the bank is updated on its cadence.
    Per-frame latency is the median of ``reps`` repetitions of the
    pure compute (encode + update + segment); scoring and bookkeeping
    are excluded from the timed region.  Pass ``collect_masks`` to
    receive every predicted label map.
    """
    cfg = cfg or EngineConfig()
    if isinstance(pattern, str):
        try:
            pattern = Pattern(pattern.lower())
        except ValueError:
            raise ConfigError(f"unknown memory pattern {pattern!r}") from None
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    parse_strategy(cfg.strategy)  # fail fast on a bad composition
    enc, dec, key_sam, value_sam = params or _build_params(cfg, pattern)
    theta, topk = cfg.theta, cfg.topk

    report = RunReport(pattern=pattern.value)
    frame0, gt0 = video.frames[0], video.gt_masks[0]

    start = time.perf_counter()
    key, values = encode_mask(frame0, gt0, enc)
    gt_slot = MemorySlot(key, values, Origin.GT, 0)
    if pattern is Pattern.STM:
        bank = stm_append(MemoryBank(Pattern.STM, [], theta=theta), gt_slot, 0)
    elif pattern is Pattern.EMA:
        blended = MemorySlot(gt_slot.key, gt_slot.values, Origin.HISTORICAL, 0)
        bank = MemoryBank(Pattern.EMA, [gt_slot, blended], theta=theta)
    else:
        rde = RdeState.from_slot(gt_slot)
        latest = MemorySlot(gt_slot.key, gt_slot.values, Origin.LATEST, 0)
        bank = assemble_bank(gt_slot, latest, rde, cfg.strategy, theta=theta)
    init_latency = time.perf_counter() - start

    prev_pred = gt0
    report.records.append(FrameRecord(0, init_latency, len(bank),
                                      bank.float_count(), mask_iou(gt0.labels, gt0)))
    if collect_masks is not None:
        collect_masks.append(gt0.labels.copy())

    # everything inside a step is pure, so repeating it for timing
    # cannot perturb the stream; state changes apply after the clock stops
    def stm_step(bank, t, frame, prev):
        pred, _, _ = segment_frame(bank, frame, enc, dec, topk=topk)
        if t % theta == 0:
            k, v = encode_mask(frame, pred, enc)
            bank = stm_append(bank, MemorySlot(k, v, Origin.HISTORICAL, t), t)
        return pred, bank, None

    def ema_step(bank, t, frame, prev):
        pred, _, _ = segment_frame(bank, frame, enc, dec, topk=topk)
        if t % theta == 0:
            qk, qv = encode_mask(frame, pred, enc)
            blended = ema_blend_slot(bank.slots[1], qk, qv, cfg.ema_lambda)
            bank = MemoryBank(Pattern.EMA, [bank.slots[0], blended],
                              theta=theta)
        return pred, bank, None

    def sam_step(rde_now, t, frame, prev):
        k, v = encode_mask(video.frames[t - 1], prev, enc)
        latest = MemorySlot(k, v, Origin.LATEST, t - 1)
        if t % theta == 0:
            rde_now = sam_update(rde_now, latest, key_sam, value_sam,
                                 pool=cfg.sam_pool)
        new_bank = assemble_bank(gt_slot, latest, rde_now, cfg.strategy,
                                 theta=theta)
        pred, _, _ = segment_frame(new_bank, frame, enc, dec, topk=topk)
        return pred, new_bank, rde_now

    for t in range(1, len(video)):
        frame, gt = video.frames[t], video.gt_masks[t]
        if pattern is Pattern.STM:
            step = lambda: stm_step(bank, t, frame, prev_pred)
        elif pattern is Pattern.EMA:
            step = lambda: ema_step(bank, t, frame, prev_pred)
        else:
            step = lambda: sam_step(rde, t, frame, prev_pred)

        times = []
        for _ in range(reps):
            tic = time.perf_counter()
            result = step()
            times.append(time.perf_counter() - tic)
        latency = statistics.median(times)

        prev_pred, bank, new_rde = result
        if new_rde is not None:
            rde = new_rde
        report.records.append(FrameRecord(t, latency, len(bank),
                                          bank.float_count(),
                                          mask_iou(prev_pred.labels, gt)))
        if collect_masks is not None:
            collect_masks.append(prev_pred.labels.copy())
    return report


# ---------------------------------------------------------------------------
# comparisons / ablations

@dataclass
class CompareRow:
    pattern: str
    repeat: int
    frames: int
    mean_latency_s: float
    peak_floats: int
    mean_iou: float


def compare_patterns(unit: SyntheticVideo, patterns,
                     repeats=(1, 10, 15, 20), cfg: EngineConfig | None = None,
                     reps: int = 3) -> list:
    """Scaling table: every pattern over every repeat factor."""
    if len(patterns) < 2:
        raise ConfigError("compare needs at least two patterns")
    cfg = cfg or EngineConfig()
    rows = []
    for name in patterns:
        pattern = Pattern(name.lower()) if isinstance(name, str) else name
        params = _build_params(cfg, pattern)
        for repeat in repeats:
            video = synth_long_video(unit, repeat)
            report = run_stream(video, pattern, cfg, params=params, reps=reps)
            rows.append(CompareRow(pattern.value, repeat, len(video),
                                   report.mean_latency_s(),
                                   report.peak_floats(), report.mean_iou()))
    return rows


@dataclass
class AblateRow:
    strategy: str
    slots: int
    mean_latency_s: float
    mean_iou: float


def ablate_strategies(video: SyntheticVideo, strategies,
                      cfg: EngineConfig | None = None, reps: int = 1) -> list:
    """Mean IoU per bank composition on the same video and seeds."""
    cfg = cfg or EngineConfig()
    for s in strategies:
        parse_strategy(s)  # reject unknown compositions before running
    params = _build_params(cfg, Pattern.SAM)
    rows = []
    for s in strategies:
        scfg = cfg.override({"memory.strategy": s})
        report = run_stream(video, Pattern.SAM, scfg, params=params, reps=reps)
        rows.append(AblateRow(s, len(parse_strategy(s)),
                              report.mean_latency_s(), report.mean_iou()))
    return rows


# ---------------------------------------------------------------------------
# report emission

RUN_COLUMNS = ("frame_index", "latency_s", "slots", "floats", "iou_mean")


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def emit_report(report: RunReport, fmt: str, path) -> None:
    """Write a per-frame report; identical report -> identical bytes."""
    fmt = fmt.lower()
    if fmt == "csv":
        lines = [",".join(RUN_COLUMNS)]
        for r in report.records:
            lines.append(",".join([str(r.frame_index), _fmt(r.latency_s),
                                   str(r.slots), str(r.floats),
                                   _fmt(r.iou_mean)]))
        text = "\n".join(lines) + "\n"
    elif fmt == "json":
        payload = {
            "pattern": report.pattern,
            "records": [{"frame_index": r.frame_index,
                         "latency_s": r.latency_s,
                         "slots": r.slots,
                         "floats": r.floats,
                         "iou_mean": r.iou_mean,
                         "iou": list(r.iou)} for r in report.records],
            "aggregates": {"mean_latency_s": report.mean_latency_s(),
                           "peak_floats": report.peak_floats(),
                           "mean_iou": report.mean_iou()},
        }
        text = json.dumps(payload, indent=2) + "\n"
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_report_json(path) -> RunReport:
    with open(path) as fh:
        payload = json.load(fh)
    report = RunReport(pattern=payload["pattern"])
    for r in payload["records"]:
        report.records.append(FrameRecord(r["frame_index"], r["latency_s"],
                                          r["slots"], r["floats"],
                                          list(r["iou"])))
    return report


def emit_rows(rows, columns, fmt: str, path) -> None:
    """Write a comparison/ablation table deterministically."""
    fmt = fmt.lower()
    if fmt == "csv":
        lines = [",".join(columns)]
        for row in rows:
            lines.append(",".join(_fmt(getattr(row, c)) for c in columns))
        text = "\n".join(lines) + "\n"
    elif fmt == "json":
        text = json.dumps([{c: getattr(r, c) for c in columns} for r in rows],
                          indent=2) + "\n"
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    with open(path, "w") as fh:
        fh.write(text)


COMPARE_COLUMNS = ("pattern", "repeat", "frames", "mean_latency_s",
                   "peak_floats", "mean_iou")
ABLATE_COLUMNS = ("strategy", "slots", "mean_latency_s", "mean_iou")
