"""Report rendering: JSON + CSV tables + matplotlib figures.

Every CLI report path produces three artifacts with a shared stem: the
machine-readable JSON, a delimited CSV of the table rows, and a PNG figure.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def write_json(data, path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return p


def write_csv(rows, path, fieldnames=None):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        p.write_text("")
        return p
    fieldnames = fieldnames or list(rows[0].keys())
    with open(p, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return p


def _save(fig, path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return p


def _bar_chart(labels, series, title, ylabel, path, ylim=None):
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 2.0), 3.6))
    width = 0.8 / max(1, len(series))
    xs = range(len(labels))
    for k, (name, values) in enumerate(series):
        offset = (k - (len(series) - 1) / 2.0) * width
        ax.bar([x + offset for x in xs], values, width=width, label=name)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if ylim:
        ax.set_ylim(*ylim)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def render_filter_report(summary, json_path):
    """Filter stage report: JSON + CSV + keep-rate bars per category."""
    stem = Path(json_path).with_suffix("")
    write_json(summary, json_path)
    rows = []
    for cat, stats in sorted(summary["categories"].items()):
        rows.append({"category": cat, "total": stats["total"],
                     "kept": stats["kept"],
                     "keep_rate": f"{stats['keep_rate']:.4f}"})
    write_csv(rows, stem.with_suffix(".csv"))
    if rows:
        _bar_chart([r["category"] for r in rows],
                   [("keep rate", [float(r["keep_rate"]) for r in rows])],
                   "retention after similarity filtering", "keep rate",
                   stem.with_suffix(".png"), ylim=(0, 1.05))


def render_quality_report(report, json_path):
    """Visual-quality report: per-category IS and intra-cluster distance."""
    stem = Path(json_path).with_suffix("")
    write_json(report, json_path)
    cats = [c for c in report["per_category"]]
    rows = [{"category": c,
             "inception_score": f"{report['per_category'][c]['inception_score']:.4f}",
             "ic_lpips": f"{report['per_category'][c]['ic_lpips']:.4f}"}
            for c in cats]
    rows.append({"category": "OVERALL",
                 "inception_score": f"{report['mean']['inception_score']:.4f}",
                 "ic_lpips": f"{report['mean']['ic_lpips']:.4f}"})
    write_csv(rows, stem.with_suffix(".csv"))
    if cats:
        _bar_chart(cats,
                   [("IS", [report["per_category"][c]["inception_score"] for c in cats]),
                    ("IC-LPIPS", [report["per_category"][c]["ic_lpips"] for c in cats])],
                   "generated image quality", "score", stem.with_suffix(".png"))


def render_mask_eval_report(report, json_path):
    """Mask-quality report: per-category pixel AUROC of score maps."""
    stem = Path(json_path).with_suffix("")
    write_json(report, json_path)
    cats = [c for c in report["per_category"]]
    rows = [{"category": c,
             "pixel_auroc": f"{report['per_category'][c]['pixel_auroc']:.4f}"}
            for c in cats]
    rows.append({"category": "OVERALL",
                 "pixel_auroc": f"{report['mean']['pixel_auroc']:.4f}"})
    write_csv(rows, stem.with_suffix(".csv"))
    if cats:
        _bar_chart(cats,
                   [("pixel AUROC", [report["per_category"][c]["pixel_auroc"] for c in cats])],
                   "score-map quality vs reference masks", "pixel AUROC",
                   stem.with_suffix(".png"), ylim=(0, 1.05))


def render_downstream_report(report, json_path, loss_curves=None):
    """Downstream segmentation report plus optional loss-curve figure."""
    stem = Path(json_path).with_suffix("")
    write_json(report, json_path)
    cats = list(report["per_category"])
    rows = [{"category": c,
             "image_auroc": f"{report['per_category'][c]['image_auroc']:.4f}",
             "pixel_auroc": f"{report['per_category'][c]['pixel_auroc']:.4f}"}
            for c in cats]
    rows.append({"category": "OVERALL",
                 "image_auroc": f"{report['mean']['image_auroc']:.4f}",
                 "pixel_auroc": f"{report['mean']['pixel_auroc']:.4f}"})
    write_csv(rows, stem.with_suffix(".csv"))
    if cats:
        _bar_chart(cats,
                   [("image AUROC", [report["per_category"][c]["image_auroc"] for c in cats]),
                    ("pixel AUROC", [report["per_category"][c]["pixel_auroc"] for c in cats])],
                   "downstream segmentation", "AUROC",
                   stem.with_suffix(".png"), ylim=(0, 1.05))
    if loss_curves:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for cat, curve in sorted(loss_curves.items()):
            ax.plot(curve, label=cat)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.set_title("segmenter training loss")
        ax.legend(fontsize=8)
        fig.tight_layout()
        _save(fig, stem.parent / (stem.name + "_loss.png"))


def render_calibration_report(results, json_path, sweeps=None):
    """Calibration report: chosen thresholds and optional criterion sweeps."""
    stem = Path(json_path).with_suffix("")
    write_json({cat: res.to_dict() for cat, res in results.items()}, json_path)
    rows = [{"category": cat,
             "tau_star": f"{res.tau_star:.6f}",
             "criterion_value": f"{res.criterion_value:.4f}",
             "num_reference_masks": res.num_reference_masks}
            for cat, res in sorted(results.items())]
    write_csv(rows, stem.with_suffix(".csv"))
    if sweeps:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for cat, (taus, values) in sorted(sweeps.items()):
            ax.plot(taus, values, label=cat)
            ax.axvline(results[cat].tau_star, linestyle=":", linewidth=0.8)
        ax.set_xlabel("threshold")
        ax.set_ylabel("criterion")
        ax.set_title("threshold calibration")
        ax.legend(fontsize=8)
        fig.tight_layout()
        _save(fig, stem.with_suffix(".png"))


def render_ranking_report(ratings, json_path):
    """Study ranking report: JSON + CSV + mu/sigma error bars."""
    stem = Path(json_path).with_suffix("")
    data = [r.to_dict() for r in ratings]
    write_json(data, json_path)
    rows = [{"method": d["method"], "mu": f"{d['mu']:.4f}",
             "sigma": f"{d['sigma']:.4f}",
             "win_rate": ("" if d["win_rate"] is None else f"{d['win_rate']:.4f}"),
             "appearances": d["appearances"]} for d in data]
    write_csv(rows, stem.with_suffix(".csv"))
    if data:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        names = [d["method"] for d in data]
        mus = [d["mu"] for d in data]
        sigmas = [d["sigma"] for d in data]
        ax.errorbar(range(len(names)), mus, yerr=sigmas, fmt="o", capsize=4)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("skill (mu, bars: sigma)")
        ax.set_title("pairwise study ranking")
        fig.tight_layout()
        _save(fig, stem.with_suffix(".png"))
