"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}
# no timestamps or version strings in the files, so reruns overwrite byte-identically
PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def training_curves(record, path):
    """Per-epoch ACC / ASR / train loss of one run."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.8))
        ep = [e.epoch for e in record.epochs]
        ax1.plot(ep, [100 * e.acc for e in record.epochs], label="ACC")
        ax1.plot(ep, [100 * e.asr for e in record.epochs], label="ASR")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("%")
        ax1.set_ylim(-2, 102)
        ax1.legend()
        ax2.plot(ep, [e.train_loss for e in record.epochs], color="k")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("train loss")
        fig.suptitle(f"{record.stage} ({record.pipeline})")
        return _save(fig, path)


def results_bars(rows: Sequence[Dict], path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 1.2 * len(rows)), 2.8))
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [r["acc_pct"] for r in rows], 0.4, label="ACC")
        ax.bar(x + 0.2, [r["asr_pct"] for r in rows], 0.4, label="ASR")
        ax.set_xticks(x, [r["defense"] for r in rows])
        ax.set_ylabel("%")
        ax.legend()
        return _save(fig, path)


def rho_sweep(rows: Sequence[Dict], path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        rho = [r["rho"] for r in rows]
        for key, label in (("acc_pct", "ACC"), ("asr_pct", "ASR"), ("der_pct", "DER")):
            ax.plot(rho, [r[key] for r in rows], marker="o", label=label)
        ax.set_xlabel(r"$\rho$")
        ax.set_ylabel("%")
        ax.legend()
        return _save(fig, path)


def neuron_panels(norm_before, norm_after, tac, grad_ft, grad_sam, layer: str, path):
    """Weight norms sorted by the baseline order, and first-batch gradient norms sorted by TAC."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(10, 2.8))
        order = np.argsort(norm_before)
        units = np.arange(len(order))
        ax1.bar(units, np.asarray(norm_before)[order], width=1.0, alpha=0.6, label="before")
        ax1.bar(units, np.asarray(norm_after)[order], width=1.0, alpha=0.6, label="after")
        ax1.set_xlabel(f"{layer} unit (by baseline norm)")
        ax1.set_ylabel("weight norm")
        ax1.legend()
        by_tac = np.argsort(tac)
        ax2.bar(units, np.asarray(grad_ft)[by_tac], width=1.0, color="C2", label="FT")
        ax2.bar(units, -np.asarray(grad_sam)[by_tac], width=1.0, color="C3", label="FT-SAM (negated)")
        ax2.set_xlabel("unit (by TAC)")
        ax2.set_ylabel("first-batch grad norm")
        ax2.legend()
        ax3.scatter(norm_before, tac, s=10)
        ax3.set_xlabel("weight norm")
        ax3.set_ylabel("TAC")
        return _save(fig, path)
