"""Defense metrics: ACC, ASR, DER, TAC profiles and weight-norm statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from .model import Model, NeuronNormProfile
from .poisoning import ALL_TO_ONE, ImageSet, PoisonPolicy


class EmptySplitError(ValueError):
    pass


@dataclass
class EvalReport:
    acc: float
    asr: float
    der: Optional[float] = None
    n_benign: int = 0
    n_poisoned: int = 0

    def __post_init__(self):
        for name in ("acc", "asr", "der"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TacProfile:
    layer: str
    values: np.ndarray
    n_pairs: int

    def __len__(self) -> int:
        return len(self.values)


def accuracy(model: Model, params, benign_eval: ImageSet) -> float:
    if len(benign_eval) == 0:
        raise EmptySplitError("accuracy of an empty split")
    preds = model.predict(params, benign_eval.images)
    return float(np.mean(preds == benign_eval.original_labels))


def attack_success_rate(model: Model, params, poisoned_eval: ImageSet,
                        policy: Optional[PoisonPolicy] = None) -> float:
    """Fraction of triggered samples predicted as their target label.

    Samples whose ground truth is already the all-to-one target are dropped
    when ``policy`` is given (``make_eval_sets`` has normally done so).
    """
    data = poisoned_eval
    if policy is not None and policy.mode == ALL_TO_ONE:
        data = data.subset(np.flatnonzero(data.original_labels != policy.target))
    if len(data) == 0:
        raise EmptySplitError("attack success rate of an empty split")
    preds = model.predict(params, data.images)
    return float(np.mean(preds == data.labels))


def der(baseline: EvalReport, defended: EvalReport) -> float:
    """``[max(0, dASR) - max(0, dACC) + 1] / 2`` with drops measured from the baseline."""
    d_asr = baseline.asr - defended.asr
    d_acc = baseline.acc - defended.acc
    return (max(0.0, d_asr) - max(0.0, d_acc) + 1) / 2


def evaluate(model: Model, params, eval_sets: Tuple[ImageSet, ImageSet],
             policy: Optional[PoisonPolicy] = None, baseline: Optional[EvalReport] = None) -> EvalReport:
    benign, poisoned = eval_sets
    report = EvalReport(
        acc=accuracy(model, params, benign),
        asr=attack_success_rate(model, params, poisoned, policy),
        n_benign=len(benign),
        n_poisoned=len(poisoned),
    )
    if baseline is not None:
        report.der = der(baseline, report)
    return report


def tac_profile(model: Model, params, layer: str, benign: np.ndarray, poisoned: np.ndarray,
                batch_size: int = 256) -> TacProfile:
    """Per-unit mean over pairs of ``||a_k(x_poisoned) - a_k(x_benign)||_2``.

    ``a_k`` is the post-activation output of unit ``k`` (its spatial map for
    a conv layer, a scalar for a linear one).
    """
    benign = np.asarray(benign)
    poisoned = np.asarray(poisoned)
    if benign.shape != poisoned.shape or len(benign) == 0:
        raise ValueError(f"unpaired inputs: {benign.shape} vs {poisoned.shape}")
    total = None
    for i in range(0, len(benign), batch_size):
        _, a = model.forward(params, benign[i : i + batch_size], capture=layer)
        _, b = model.forward(params, poisoned[i : i + batch_size], capture=layer)
        diff = (b.astype(np.float64) - a).reshape(a.shape[0], a.shape[1], -1)
        part = np.sqrt((diff ** 2).sum(axis=2)).sum(axis=0)
        total = part if total is None else total + part
    return TacProfile(layer, total / len(benign), len(benign))


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 3:
        raise ValueError("need two equal-length vectors with at least 3 entries")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("rank correlation is undefined for a constant vector")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float(np.dot(ra, rb) / np.sqrt(np.dot(ra, ra) * np.dot(rb, rb)))


def norm_tac_correlation(norms: NeuronNormProfile, tac: TacProfile) -> float:
    """Spearman coefficient (average ranks for ties) between weight norm and TAC."""
    return spearman(norms.norms, tac.values)


def norm_histogram(norms, bins: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    """Equal-width histogram over ``[0, max]``; returns ``(counts, edges)``."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    values = np.asarray(getattr(norms, "norms", norms), dtype=np.float64)
    top = float(values.max()) if values.size else 0.0
    return np.histogram(values, bins=bins, range=(0.0, top if top > 0 else 1.0))
