"""Figures for comparison and sweep reports (written next to the CSV outputs)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "ddpg-manual": dict(color="tab:blue", ls="--"),
    "ddpg-paper_fixture": dict(color="tab:blue", ls="-"),
    "ddpg-llm_program": dict(color="tab:cyan", ls="-"),
    "td3-manual": dict(color="tab:red", ls="--"),
    "td3-paper_fixture": dict(color="tab:red", ls="-"),
    "td3-llm_program": dict(color="tab:orange", ls="-"),
}
# PNG metadata without the matplotlib version keeps re-runs byte-identical across installs
_META = {"Software": None}


def _smooth(y, k=10):
    if len(y) < k:
        return np.asarray(y)
    kernel = np.ones(k) / k
    head = np.cumsum(y[:k - 1]) / np.arange(1, k)
    return np.concatenate([head, np.convolve(y, kernel, mode="valid")])


def convergence_figure(report, path) -> Path:
    by_arm = defaultdict(list)
    for rec in report.records:
        by_arm[rec.arm].append(rec.energies())
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for arm in sorted(by_arm):
        curves = np.array(by_arm[arm])
        med = np.median(curves, axis=0)
        lo, hi = np.percentile(curves, [25, 75], axis=0)
        x = np.arange(1, curves.shape[1] + 1)
        style = STYLE.get(arm, {})
        ax.plot(x, _smooth(med), label=arm, **style)
        ax.fill_between(x, _smooth(lo), _smooth(hi), alpha=0.15, color=style.get("color"))
    ax.set_xlabel("Episode")
    ax.set_ylabel("Total system energy per episode (J)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return Path(path)


def packet_size_figure(report, path) -> Path:
    arms = sorted({r["arm"] for r in report.packet_table})
    sizes = sorted({r["packet_size"] for r in report.packet_table})
    width = 0.8 / max(len(arms), 1)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for j, arm in enumerate(arms):
        rows = {r["packet_size"]: r for r in report.packet_table if r["arm"] == arm}
        med = [rows[s]["median_final"] for s in sizes]
        err = [[rows[s]["median_final"] - rows[s]["q1_final"] for s in sizes],
               [rows[s]["q3_final"] - rows[s]["median_final"] for s in sizes]]
        x = np.arange(len(sizes)) + (j - (len(arms) - 1) / 2) * width
        ax.bar(x, med, width, yerr=err, capsize=2, label=arm,
               color=STYLE.get(arm, {}).get("color"), hatch="//" if arm.endswith("manual") else None,
               alpha=0.8)
    ax.set_xticks(np.arange(len(sizes)))
    ax.set_xticklabels([f"{s / 1e6:.1f}" for s in sizes])
    ax.set_xlabel("Packet size (Mbit)")
    ax.set_ylabel("Final-window energy (J)")
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return Path(path)


def render(report, out_dir) -> list[Path]:
    out = Path(out_dir)
    if report.packet_table:
        return [packet_size_figure(report, out / "packet_size.png")]
    return [convergence_figure(report, out / "convergence.png")]
