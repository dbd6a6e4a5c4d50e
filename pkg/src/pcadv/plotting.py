"""Figures written next to the CLI's delimited reports.

Everything renders off-screen with the Agg backend and is saved to a file;
nothing here is needed by the library itself.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _smooth(values, window=10):
    out, acc = [], []
    for v in values:
        acc.append(v)
        if len(acc) > window:
            acc.pop(0)
        finite = [a for a in acc if math.isfinite(a)]
        out.append(sum(finite) / len(finite) if finite else float("nan"))
    return out


def training_curves(records, path, title=""):
    """Loss components on the left, batch ASR and aux accuracy on the right."""
    steps = [r.step for r in records]
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(9.0, 3.4))
        for name, label in (("l_dis", "L_dis"), ("l_obj", "L_obj"), ("l_out", "L_out"), ("l_ul", "L_UL"),
                            ("critic_loss", "critic")):
            ax_l.plot(steps, _smooth([getattr(r, name) for r in records]), label=label, lw=1)
        ax_l.set_xlabel("generator step")
        ax_l.set_ylabel("loss (10-step mean)")
        ax_l.legend(ncol=2)
        asr = [r.batch_asr for r in records]
        if any(math.isfinite(a) for a in asr):
            ax_r.plot(steps, _smooth(asr), label="batch ASR", lw=1)
        ax_r.plot(steps, _smooth([r.aux_accuracy for r in records]), label="aux accuracy", lw=1)
        ax_r.set_ylim(-0.02, 1.02)
        ax_r.set_xlabel("generator step")
        ax_r.legend()
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def attack_bars(report, path):
    labels = ["all"] + [str(c) for c in sorted(report.per_class)]
    asr = [report.asr] + [s / n for n, s, _ in (report.per_class[c] for c in sorted(report.per_class))]
    valid = [report.validity_filtered_asr] + [v / n for n, _, v in
                                              (report.per_class[c] for c in sorted(report.per_class))]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = range(len(labels))
        ax.bar([i - 0.2 for i in x], [100 * a for a in asr], width=0.4, label="ASR")
        ax.bar([i + 0.2 for i in x], [100 * v for v in valid], width=0.4, label="validity-filtered ASR")
        ax.set_xticks(list(x), labels)
        ax.set_xlabel("class")
        ax.set_ylabel("%")
        ax.set_ylim(0, 100)
        ax.set_title(f"victim {report.victim or '?'}, defense {report.defense}")
        ax.legend()
        return _save(fig, path)


def transfer_bars(reports: Sequence, original: str, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r.victim + (" (orig)" if r.victim == original else "") for r in reports]
        x = range(len(reports))
        ax.bar([i - 0.2 for i in x], [100 * r.asr for r in reports], width=0.4, label="ASR")
        ax.bar([i + 0.2 for i in x], [100 * r.validity_filtered_asr for r in reports], width=0.4,
               label="validity-filtered ASR")
        ax.set_xticks(list(x), names)
        ax.set_ylabel("%")
        ax.set_ylim(0, 100)
        ax.legend()
        return _save(fig, path)


def sweep_curve(rows: Sequence, path):
    """ASR and MMD-CD against lambda1 on a log axis."""
    lam = [r.lambda1 for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(lam, [100 * r.attack.asr for r in rows], "o-", label="ASR")
        ax.set_xscale("log" if all(v > 0 for v in lam) else "linear")
        ax.set_xlabel("lambda1")
        ax.set_ylabel("ASR (%)")
        ax.set_ylim(0, 100)
        ax2 = ax.twinx()
        ax2.plot(lam, [r.quality.mmd_cd for r in rows], "s--", color="tab:red", label="MMD-CD")
        ax2.set_ylabel("MMD-CD")
        ax2.grid(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="lower right")
        return _save(fig, path)


def cloud_grid(clouds, labels, path, max_clouds=8):
    """3D scatter of the first few clouds."""
    n = min(len(clouds), max_clouds)
    cols = min(n, 4)
    rows = max(1, math.ceil(n / cols))
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(2.2 * cols, 2.2 * rows))
        for i in range(n):
            ax = fig.add_subplot(rows, cols, i + 1, projection="3d")
            p = clouds[i]
            ax.scatter(p[:, 0], p[:, 1], p[:, 2], s=3)
            ax.set_title(f"y={int(labels[i])}")
            ax.set_axis_off()
        return _save(fig, path)
