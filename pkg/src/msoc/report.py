"""Report emission: accuracy tables, per-branch score histograms, embedding exports.

Every figure is written next to the delimited data it was drawn from, so
results can be checked without looking at pixels.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import TEST_CATEGORIES, Category  # noqa: E402
from .model import THRESHOLD  # noqa: E402

COLUMNS = [c.value for c in TEST_CATEGORIES]
COLUMN_TITLES = {"RAFV": "RAFV", "FAFV": "FAFV", "FARV": "FARV", "UNSYNCED": "Unsynced"}
BRANCH_TITLES = {"audio": "Audio", "visual": "Visual", "av": "Audio-visual"}
SCORE_RANGE = {"audio": (-1.0, 1.0), "visual": (-1.0, 1.0), "av": (0.0, 1.0)}

plt.rcParams.update({
    "figure.figsize": (4.0, 2.8),
    "font.size": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "savefig.dpi": 120,
})


def model_label(mode, visual_kind, use_oc=True) -> str:
    name = {"visual_resnet": "ResNet", "visual_scnet_stil": "SCNet-STIL"}.get(visual_kind, visual_kind)
    return f"{mode.upper()} ({name}{'' if use_oc else ', no OC'})"


def write_accuracy_table(rows, out_dir, stem="accuracy") -> tuple[Path, Path]:
    """``rows``: list of dicts with keys model, and per category mean/std/per_seed.

    Writes a CSV (one line per model x category) and a fixed-width text table
    shaped like the usual results table: models down, test sets across.
    """
    out_dir = Path(out_dir)
    csv_path, txt_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "category", "mean", "std", "per_seed"])
        for row in rows:
            for c in COLUMNS:
                if c in row["mean"]:
                    seeds = ";".join(f"{s}:{v:.2f}" for s, v in row["per_seed"][c].items())
                    w.writerow([row["model"], c, f"{row['mean'][c]:.2f}", f"{row['std'][c]:.2f}", seeds])
    width = max([len("Model")] + [len(r["model"]) for r in rows])
    lines = ["Model".ljust(width) + "".join(f"{COLUMN_TITLES[c]:>16}" for c in COLUMNS)]
    for row in rows:
        cells = [f"{row['mean'][c]:.2f} +- {row['std'][c]:.2f}" if c in row["mean"] else "-"
                 for c in COLUMNS]
        lines.append(row["model"].ljust(width) + "".join(f"{cell:>16}" for cell in cells))
    txt_path.write_text("\n".join(lines) + "\n")
    return csv_path, txt_path


def accuracy_rows(model_name, per_seed_accuracy) -> dict:
    """Build one table row from {seed: {category: accuracy}}."""
    from .train import aggregate
    row = {"model": model_name, "mean": {}, "std": {}, "per_seed": {}}
    seeds = sorted(per_seed_accuracy)
    for c in COLUMNS:
        if all(c in per_seed_accuracy[s] for s in seeds):
            vals = {s: per_seed_accuracy[s][c] for s in seeds}
            row["per_seed"][c] = vals
            row["mean"][c], row["std"][c] = aggregate(vals.values())
    return row


def branch_scores(outputs) -> dict[str, np.ndarray]:
    scores = {"av": outputs.av_real_prob}
    if outputs.audio_oc_score is not None:
        scores["audio"] = outputs.audio_oc_score
        scores["visual"] = outputs.visual_oc_score
    return scores


def score_histograms(outputs, records, out_dir, bins=40) -> list[dict]:
    """One histogram per (branch, test category) pair: reals vs that category's fakes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cats = np.array([r.category.value for r in records])
    real = cats == Category.RARV.value
    meta = []
    for branch, scores in branch_scores(outputs).items():
        lo, hi = SCORE_RANGE[branch]
        edges = np.linspace(lo, hi, bins + 1)
        for cat in COLUMNS:
            fake = cats == cat
            if not fake.any():
                continue
            real_counts, _ = np.histogram(np.clip(scores[real], lo, hi), edges)
            fake_counts, _ = np.histogram(np.clip(scores[fake], lo, hi), edges)
            stem = f"hist_{branch}_{cat}"
            with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin_left", "bin_right", "real", cat])
                for i in range(bins):
                    w.writerow([f"{edges[i]:.4f}", f"{edges[i + 1]:.4f}", int(real_counts[i]),
                                int(fake_counts[i])])
            fig, ax = plt.subplots()
            ax.hist(scores[real], edges, alpha=0.6, label="real (RARV)", color="tab:blue")
            ax.hist(scores[fake], edges, alpha=0.6, label=f"fake ({COLUMN_TITLES[cat]})", color="tab:orange")
            ax.axvline(THRESHOLD, color="red", linestyle="-", linewidth=1.2)
            ax.set_xlim(lo, hi)
            ax.set_xlabel("score (higher = more real)")
            ax.set_ylabel("count")
            ax.set_title(f"{BRANCH_TITLES[branch]} branch, {COLUMN_TITLES[cat]}")
            ax.legend(loc="upper left")
            fig.tight_layout()
            fig.savefig(out_dir / f"{stem}.png")
            plt.close(fig)
            meta.append({"branch": branch, "category": cat, "figure": f"{stem}.png", "data": f"{stem}.csv",
                         "threshold": THRESHOLD, "n_real": int(real.sum()), "n_fake": int(fake.sum())})
    (out_dir / "histograms.json").write_text(json.dumps(meta, indent=2))
    return meta


def export_embeddings(outputs, records, out_dir) -> tuple[Path, Path]:
    """Concatenated AV-branch embeddings per test sample, plus per-category centroids."""
    out_dir = Path(out_dir)
    emb = np.asarray(outputs.av_embedding, dtype=np.float64)
    emb_path, cen_path = out_dir / "av_embeddings.tsv", out_dir / "av_centroids.tsv"
    dims = [f"e{i}" for i in range(emb.shape[1])]
    with open(emb_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["sample_id", "category"] + dims)
        for r, row in zip(records, emb):
            w.writerow([r.sample_id, r.category.value] + [f"{x:.6g}" for x in row])
    cats = np.array([r.category.value for r in records])
    with open(cen_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["category", "count"] + dims)
        for cat in [Category.RARV.value] + COLUMNS:
            sel = cats == cat
            if sel.any():
                w.writerow([cat, int(sel.sum())] + [f"{x:.6g}" for x in emb[sel].mean(axis=0)])
    return emb_path, cen_path


def write_decisions(report, out_dir) -> Path:
    path = Path(out_dir) / "decisions.tsv"
    out = report.outputs
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["sample_id", "category", "av_label", "audio_score", "visual_score", "av_real_prob",
                    "audio_bin", "visual_bin", "fused_score", "verdict"])
        for i, r in enumerate(report.records):
            d = report.decisions[r.sample_id]
            a = "" if out.audio_oc_score is None else f"{out.audio_oc_score[i]:.6f}"
            v = "" if out.visual_oc_score is None else f"{out.visual_oc_score[i]:.6f}"
            if isinstance(d, int):
                w.writerow([r.sample_id, r.category.value, r.av_label, a, v,
                            f"{out.av_real_prob[i]:.6f}", "", "", "", d])
            else:
                w.writerow([r.sample_id, r.category.value, r.av_label, a, v, f"{d.av_real_prob:.6f}",
                            d.audio_bin, d.visual_bin, f"{d.fused_score:.6f}", d.verdict])
    return path


def write_text_report(path, title, report_rows, branch_auc=None) -> None:
    lines = [title, "=" * len(title), ""]
    for row in report_rows:
        lines.append(row["model"])
        for c in COLUMNS:
            if c in row["mean"]:
                lines.append(f"  {COLUMN_TITLES[c]:<9} {row['mean'][c]:6.2f} +- {row['std'][c]:.2f}")
    if branch_auc:
        lines += ["", "Branch AUC on pooled test split (own modality labels):"]
        lines += [f"  {k:<7} {v:.4f}" for k, v in branch_auc.items()]
    Path(path).write_text("\n".join(lines) + "\n")
