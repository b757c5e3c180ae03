"""Figure rendering for report paths.

Every figure written by the CLI has a CSV twin carrying the plotted
numbers, so downstream checks never parse images.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (6.0, 3.6)
DPI = 150


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _new_axes(xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_age_histogram(edges, counts, path, title="Age distribution") -> None:
    fig, ax = _new_axes("age (years)", "utterances", title)
    widths = [edges[i + 1] - edges[i] for i in range(len(counts))]
    ax.bar(edges[:-1], counts, width=widths, align="edge", edgecolor="black", alpha=0.75)
    _save(fig, path)


def save_split_age_histograms(edges, train_counts, test_counts, path) -> None:
    fig, ax = _new_axes("age (years)", "fraction of side", "Train/test age balance")
    centers = [(edges[i] + edges[i + 1]) / 2 for i in range(len(train_counts))]
    width = (edges[1] - edges[0]) * 0.4
    t_total = max(sum(train_counts), 1)
    x_total = max(sum(test_counts), 1)
    ax.bar([c - width / 2 for c in centers], [c / t_total for c in train_counts],
           width=width, label="train", edgecolor="black", alpha=0.75)
    ax.bar([c + width / 2 for c in centers], [c / x_total for c in test_counts],
           width=width, label="test", edgecolor="black", alpha=0.75)
    ax.legend()
    _save(fig, path)


def save_bar_counts(labels, counts, path, title, xlabel="class") -> None:
    fig, ax = _new_axes(xlabel, "speakers", title)
    ax.bar(range(len(labels)), counts, edgecolor="black", alpha=0.75)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    _save(fig, path)


def save_score_histogram(target_scores, nontarget_scores, threshold, path) -> None:
    fig, ax = _new_axes("cosine score", "trials", "Trial score distribution")
    ax.hist(nontarget_scores, bins=40, alpha=0.6, label="nontarget")
    ax.hist(target_scores, bins=40, alpha=0.6, label="target")
    ax.axvline(threshold, color="black", linestyle="--", label="EER threshold")
    ax.legend()
    _save(fig, path)


def save_der_bars(rec_ids, all_ders, unseen_ders, path) -> None:
    fig, ax = _new_axes("recording", "DER", "Per-recording diarization error")
    xs = range(len(rec_ids))
    width = 0.4
    ax.bar([x - width / 2 for x in xs], all_ders, width=width, label="all")
    if any(d is not None for d in unseen_ders):
        ax.bar([x + width / 2 for x in xs],
               [d if d is not None else 0.0 for d in unseen_ders],
               width=width, label="unseen")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(rec_ids, rotation=45, ha="right", fontsize=7)
    ax.legend()
    _save(fig, path)
