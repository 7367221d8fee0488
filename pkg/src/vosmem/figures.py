"""Matplotlib renderings of run / comparison / ablation reports.

Every emitter writes a PNG next to the delimited report so a run
leaves both machine-readable and eyeball-readable artifacts.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_PATTERN_COLORS = {"stm": "tab:blue", "ema": "tab:green", "sam": "tab:red"}


def render_run(report, path) -> None:
    """Per-frame latency + IoU on top, bank footprint below."""
    idx = [r.frame_index for r in report.records]
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax0.plot(idx, [r.latency_s * 1e3 for r in report.records],
             color="tab:red", lw=1.0, label="latency")
    ax0.set_ylabel("latency (ms)", color="tab:red")
    twin = ax0.twinx()
    twin.plot(idx, [r.iou_mean for r in report.records],
              color="tab:blue", lw=1.0, ls="--", label="IoU")
    twin.set_ylabel("mean IoU", color="tab:blue")
    twin.set_ylim(-0.05, 1.05)
    ax0.set_title(f"{report.pattern} pattern stream")
    ax1.plot(idx, [r.floats for r in report.records], color="tab:gray", lw=1.2)
    ax1.set_ylabel("bank floats")
    ax1.set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_compare(rows, path) -> None:
    """IoU (solid, left) and FPS (dashed, right) against repeat factor."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    twin = ax.twinx()
    patterns = sorted({r.pattern for r in rows})
    for name in patterns:
        sub = sorted((r for r in rows if r.pattern == name),
                     key=lambda r: r.repeat)
        color = _PATTERN_COLORS.get(name, "tab:purple")
        xs = [r.repeat for r in sub]
        ax.plot(xs, [r.mean_iou for r in sub], color=color, marker="o",
                lw=1.5, label=f"{name} IoU")
        twin.plot(xs, [1.0 / max(r.mean_latency_s, 1e-12) for r in sub],
                  color=color, marker="s", lw=1.2, ls="--",
                  label=f"{name} FPS")
    ax.set_xlabel("repeat factor (video length multiplier)")
    ax.set_ylabel("mean IoU")
    twin.set_ylabel("frames / second")
    ax.set_ylim(-0.05, 1.05)
    handles0, labels0 = ax.get_legend_handles_labels()
    handles1, labels1 = twin.get_legend_handles_labels()
    ax.legend(handles0 + handles1, labels0 + labels1, fontsize=8,
              loc="center right")
    ax.set_title("memory discipline scaling on the synthetic long video")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_curve(history, path) -> None:
    """Per-step objective terms on a log scale."""
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [row["step"] for row in history]
    for name, color in (("total", "black"), ("seg", "tab:blue"),
                        ("ug", "tab:green"), ("mc", "tab:orange")):
        ax.plot(steps, [max(row[name], 1e-12) for row in history],
                color=color, lw=1.2, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title("toy training objective")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_ablation(rows, path) -> None:
    """Horizontal bars of mean IoU per bank composition."""
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(rows) + 1.5))
    names = [r.strategy for r in rows]
    ax.barh(range(len(rows)), [r.mean_iou for r in rows],
            color="tab:red", alpha=0.8)
    ax.set_yticks(range(len(rows)), names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("mean IoU")
    ax.set_xlim(0, 1.05)
    ax.set_title("bank composition ablation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
