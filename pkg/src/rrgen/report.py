"""Report rendering: delimited tables plus matplotlib figures for evaluation,
plan runs, and the ablation suite."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import MetricsReport
from .schedule import AblationRow, RunRecord

GENERATION_COLUMNS = ("f1", "bleu", "rouge_l", "total")


def _style() -> None:
    plt.rcParams.update({
        "figure.dpi": 120,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.axisbelow": True,
        "font.size": 9,
    })


def write_metrics_csv(report: MetricsReport, path: str | Path) -> None:
    obj = report.to_json_obj()
    fields = list(GENERATION_COLUMNS)
    row = {k: f"{obj[k]:.4f}" for k in fields}
    for k, v in sorted(report.r_at.items()):
        fields.append(f"r_at_{k}")
        row[f"r_at_{k}"] = f"{v:.4f}"
    if report.mrr_at_5 is not None:
        fields.append("mrr_at_5")
        row["mrr_at_5"] = f"{report.mrr_at_5:.4f}"
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerow(row)


def plot_metrics(report: MetricsReport, path: str | Path) -> None:
    _style()
    has_ranking = bool(report.r_at)
    fig, axes = plt.subplots(1, 2 if has_ranking else 1, figsize=(8 if has_ranking else 4.5, 3.2))
    ax = axes[0] if has_ranking else axes
    names = ["F1", "BLEU", "ROUGE-L"]
    values = [report.f1, report.bleu, report.rouge_l]
    ax.bar(names, values, color=["#4878d0", "#ee854a", "#6acc64"])
    ax.set_ylim(0, 100)
    ax.set_ylabel("score")
    ax.set_title(f"generation (total {report.total:.2f})")
    if has_ranking:
        ax2 = axes[1]
        ks = sorted(report.r_at)
        ax2.plot(ks, [report.r_at[k] for k in ks], marker="o", label="recall@k")
        if report.mrr_at_5 is not None:
            ax2.axhline(report.mrr_at_5, color="#d65f5f", linestyle="--",
                        label=f"MRR@5 = {report.mrr_at_5:.2f}")
        ax2.set_xscale("log")
        ax2.set_xticks(ks, [str(k) for k in ks])
        ax2.set_ylim(0, 1.02)
        ax2.set_xlabel("k")
        ax2.set_title("retrieval")
        ax2.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", *GENERATION_COLUMNS])
        for row in rows:
            writer.writerow(
                [row.variant, f"{row.f1:.4f}", f"{row.bleu:.4f}",
                 f"{row.rouge_l:.4f}", f"{row.total:.4f}"]
            )


def plot_ablation(rows: Sequence[AblationRow], path: str | Path) -> None:
    _style()
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    variants = [r.variant for r in rows]
    x = range(len(rows))
    width = 0.27
    for offset, (name, key, color) in enumerate(
        (("F1", "f1", "#4878d0"), ("BLEU", "bleu", "#ee854a"), ("ROUGE-L", "rouge_l", "#6acc64"))
    ):
        ax.bar([i + (offset - 1) * width for i in x],
               [getattr(r, key) for r in rows], width, label=name, color=color)
    ax.set_xticks(list(x), variants, rotation=30, ha="right")
    ax.set_ylabel("score")
    ax.set_title("component metrics")
    ax.legend()
    ax2.bar(list(x), [r.total for r in rows], color="#956cb4")
    ax2.set_xticks(list(x), variants, rotation=30, ha="right")
    ax2.set_title("total")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_stage_metrics_csv(record: RunRecord, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["stage", *GENERATION_COLUMNS, "retrieval_r_at_1", "retrieval_mrr_at_5",
             "reranked_r_at_1", "reranked_mrr_at_5"]
        )
        for stage in record.stages:
            g = stage.metrics["generation"]
            ret = stage.metrics["retrieval"]
            rr = stage.metrics["reranked"]
            writer.writerow(
                [stage.name] + [f"{g[c]:.4f}" for c in GENERATION_COLUMNS]
                + [f"{ret['r_at_1']:.4f}", f"{ret['mrr_at_5']:.4f}",
                   f"{rr['r_at_1']:.4f}", f"{rr['mrr_at_5']:.4f}"]
            )


def plot_stage_metrics(record: RunRecord, path: str | Path) -> None:
    _style()
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    stages = [s.name for s in record.stages]
    x = range(len(stages))
    ax.plot(x, [s.metrics["generation"]["total"] for s in record.stages], marker="o")
    ax.set_xticks(list(x), stages, rotation=20, ha="right")
    ax.set_ylabel("total")
    ax.set_title(f"generation by stage ({record.variant})")
    ax2.plot(x, [s.metrics["retrieval"]["mrr_at_5"] for s in record.stages],
             marker="o", label="retrieval MRR@5")
    ax2.plot(x, [s.metrics["reranked"]["mrr_at_5"] for s in record.stages],
             marker="s", label="reranked MRR@5")
    ax2.set_xticks(list(x), stages, rotation=20, ha="right")
    ax2.set_ylim(0, 1.02)
    ax2.set_title("ranking by stage")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
