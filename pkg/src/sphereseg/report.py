"""Report writers: delimited tables plus matplotlib figures saved next to them."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def write_stress_tables(report, out_dir: str | Path, stem: str = "stress") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rot_path = out / f"{stem}_rotations.tsv"
    with rot_path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["index", "qw", "qx", "qy", "qz", "miou"])
        for i, r in enumerate(report.per_rotation):
            w.writerow([i, *(f"{q:.12g}" for q in r.quaternion), "" if r.miou is None else f"{r.miou:.6f}"])
    cls_path = out / f"{stem}_classes.tsv"
    with cls_path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["class", "base_iou", "so3_iou"])
        for c in sorted(set(report.base_per_class) | set(report.so3_per_class)):
            b = report.base_per_class.get(c)
            s = report.so3_per_class.get(c)
            w.writerow([c, "" if b is None else f"{b:.6f}", "" if s is None else f"{s:.6f}"])
    return [rot_path, cls_path]


def plot_stress(report, path: str | Path, title: str | None = None) -> Path:
    vals = [r.miou if r.miou is not None else 0.0 for r in report.per_rotation]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 2.8))
        ax.bar(range(len(vals)), vals, color="0.6", label="rotated")
        if report.base_miou is not None:
            ax.axhline(report.base_miou, color="C0", lw=1.5, label=f"base {report.base_miou:.1f}")
        if report.so3_miou is not None:
            ax.axhline(report.so3_miou, color="C3", lw=1.5, ls="--", label=f"SO(3) mean {report.so3_miou:.1f}")
        ax.set_xlabel("rotation")
        ax.set_ylabel("mIoU (%)")
        ax.set_ylim(0, 100)
        ax.legend(loc="upper right", frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, Path(path))


def plot_training(records: list[dict], path: str | Path) -> Path:
    ep = [r["epoch"] for r in records]
    with plt.rc_context(RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 2.6))
        a1.plot(ep, [r["seg_loss"] for r in records], label="seg")
        if any(r["eq_loss"] for r in records):
            a1.plot(ep, [r["eq_loss"] for r in records], label="eq")
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a1.set_yscale("log")
        a1.legend(frameon=False)
        val = [(r["epoch"], r["val_miou"]) for r in records if r.get("val_miou") is not None]
        if val:
            a2.plot(*zip(*val), marker="o", ms=2)
        a2.set_xlabel("epoch")
        a2.set_ylabel("val mIoU (%)")
        return _save(fig, Path(path))


def plot_ablation(rows: list[dict], path: str | Path) -> Path:
    """Grouped bars of base and SO(3) mIoU per variant (``name``, ``base``, ``so3``)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        x = range(len(rows))
        ax.bar([i - 0.2 for i in x], [r["base"] or 0 for r in rows], width=0.4, label="base")
        ax.bar([i + 0.2 for i in x], [r["so3"] or 0 for r in rows], width=0.4, label="SO(3)")
        ax.set_xticks(list(x), [r["name"] for r in rows])
        ax.set_ylabel("mIoU (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False)
        return _save(fig, Path(path))
