"""Attack training and the FT / FT-SAM / FT-L2 fine-tuning pipelines."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import EvalReport, evaluate
from .model import Model, ParamSet
from .optim import OptimizerState, SamConfig, SgdConfig, sam_step, sgd_step
from .poisoning import ImageSet, PoisonPolicy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    sgd: SgdConfig = SgdConfig()
    sam: Optional[SamConfig] = None
    gamma: Optional[float] = None
    snapshot_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sam is not None and self.gamma is not None:
            raise ValueError("a plan selects at most one of SAM and the L2 penalty")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    @property
    def pipeline(self) -> str:
        if self.sam is not None:
            return "ft-sam"
        if self.gamma is not None:
            return "ft-l2"
        return "ft"

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["sam"] is not None:
            d["sam"]["exclude"] = list(d["sam"]["exclude"])
        return d


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    acc: float
    asr: float
    test_loss: float
    seconds: float


@dataclass
class RunRecord:
    stage: str
    pipeline: str
    plan: dict
    start_digest: Optional[str] = None
    final_digest: Optional[str] = None
    epochs: List[EpochStats] = field(default_factory=list)
    final: Optional[EvalReport] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = False) -> dict:
        """JSON-ready dict; wall times are left out unless ``timings``."""
        epochs = [asdict(e) for e in self.epochs]
        if not timings:
            for e in epochs:
                e.pop("seconds")
        return {
            "stage": self.stage,
            "pipeline": self.pipeline,
            "plan": self.plan,
            "start_digest": self.start_digest,
            "final_digest": self.final_digest,
            "epochs": epochs,
            "final": self.final.to_dict() if self.final else None,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        epochs = [EpochStats(**{"seconds": 0.0, **e}) for e in d.get("epochs", [])]
        final = EvalReport(**d["final"]) if d.get("final") else None
        return cls(d["stage"], d["pipeline"], d["plan"], d.get("start_digest"), d.get("final_digest"),
                   epochs, final, d.get("extra", {}))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def run_training(
    model: Model,
    params: ParamSet,
    train: ImageSet,
    eval_sets: Tuple[ImageSet, ImageSet],
    plan: TrainPlan,
    policy: Optional[PoisonPolicy] = None,
    stage: str = "train",
    on_snapshot: Optional[Callable[[int, ParamSet], None]] = None,
) -> Tuple[ParamSet, RunRecord]:
    """Mini-batch training with a fresh (zero) momentum state.

    The batch order of every epoch comes from ``plan.seed``; the step rule is
    picked by ``plan.pipeline``. No early stopping.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(plan.seed)
    state = OptimizerState.zeros_like(params)
    record = RunRecord(stage, plan.pipeline, plan.to_dict(), start_digest=params.digest())
    x_all, y_all = train.images, train.labels
    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        losses, weights = [], []
        for idx in _batches(len(train), plan.batch_size, rng):
            batch = (x_all[idx], y_all[idx])
            if plan.sam is not None:
                params, loss = sam_step(model, params, batch, plan.sgd, plan.sam, state)
            else:
                params, loss = sgd_step(model, params, batch, plan.sgd, state, gamma=plan.gamma or 0.0)
            losses.append(loss)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        train_acc = float(np.mean(model.predict(params, x_all) == y_all))
        report = evaluate(model, params, eval_sets, policy)
        test_loss = model.loss(params, eval_sets[0].images, eval_sets[0].original_labels)
        stats = EpochStats(epoch, train_loss, train_acc, report.acc, report.asr, test_loss,
                           time.perf_counter() - t0)
        record.epochs.append(stats)
        log.info("%s epoch %d: loss %.4f acc %.4f asr %.4f", stage, epoch, train_loss, report.acc, report.asr)
        if on_snapshot is not None and plan.snapshot_every and epoch % plan.snapshot_every == 0:
            on_snapshot(epoch, params)
    record.final = report
    record.final_digest = params.digest()
    return params, record


def train_backdoored(model: Model, params: ParamSet, poisoned_train: ImageSet,
                     eval_sets: Tuple[ImageSet, ImageSet], plan: TrainPlan,
                     policy: Optional[PoisonPolicy] = None, **kw) -> Tuple[ParamSet, RunRecord]:
    """Train from ``params`` (usually a fresh init) on the poisoned training set."""
    if plan.pipeline != "ft":
        raise ValueError("attack training uses plain SGD")
    return run_training(model, params, poisoned_train, eval_sets, plan, policy, stage="attack", **kw)


def finetune(model: Model, params: ParamSet, benign_subset: ImageSet,
             eval_sets: Tuple[ImageSet, ImageSet], plan: TrainPlan,
             policy: Optional[PoisonPolicy] = None, baseline: Optional[EvalReport] = None,
             **kw) -> Tuple[ParamSet, RunRecord]:
    """Fine-tune a backdoored model on clean data with the plan's pipeline.

    FT uses plain momentum SGD, FT-SAM the sharpness-aware step, FT-L2 SGD on
    the L2-penalised objective. ``baseline`` (the backdoored model's report)
    adds DER to the final report.
    """
    if len(benign_subset) == 0:
        raise ValueError("empty benign subset")
    if benign_subset.poisoned.any():
        raise ValueError(f"benign subset holds {int(benign_subset.poisoned.sum())} poisoned images")
    params, record = run_training(model, params, benign_subset, eval_sets, plan, policy,
                                  stage="defend", **kw)
    if baseline is not None:
        record.final = evaluate(model, params, eval_sets, policy, baseline=baseline)
    return params, record


def sweep_rho(model: Model, params: ParamSet, benign_subset: ImageSet,
              eval_sets: Tuple[ImageSet, ImageSet], plan: TrainPlan, rho_list: Sequence[float],
              policy: Optional[PoisonPolicy] = None,
              baseline: Optional[EvalReport] = None) -> List[RunRecord]:
    """Independent FT-SAM runs from the same checkpoint and seeds, one per rho."""
    if not len(rho_list):
        raise ValueError("empty rho list")
    sam = plan.sam or SamConfig()
    records = []
    for rho in rho_list:
        p = replace(plan, sam=replace(sam, rho=float(rho)), gamma=None)
        _, rec = finetune(model, params, benign_subset, eval_sets, p, policy, baseline)
        rec.extra["rho"] = float(rho)
        records.append(rec)
    return records
