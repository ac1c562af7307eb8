"""Attack -> defend -> evaluate stages with persisted, digest-stamped artifacts.

Output tree under ``<out>``::

    config.lock
    attack/       model.ckpt record.json metrics.csv timing.csv manifest.json curves.png [trigger_pattern.npy]
    defend-<p>/   model.ckpt record.json metrics.csv timing.csv curves.png
    eval/         results.csv results.json results.png
    sweep/        results.csv records.json rho.png
    diagnose/     neurons.csv summary.json neurons.png

Wall-clock times live only in ``timing.csv`` so every other file is
reproducible byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import plotting
from .config import ConfigError, ExperimentConfig, derive_seed
from .defense import RunRecord, TrainPlan, finetune, sweep_rho, train_backdoored
from .metrics import (
    EvalReport,
    evaluate,
    norm_tac_correlation,
    tac_profile,
)
from .model import Model, ModelSpec, build, file_digest, load_checkpoint, neuron_weight_norms, reference_spec, save_checkpoint
from .optim import SamConfig, SgdConfig, adaptive_mask, sam_perturbation
from .poisoning import (
    BlendTrigger,
    ImageSet,
    PatchTrigger,
    PoisonPolicy,
    SinusoidTrigger,
    blend_pattern,
    load_idx,
    make_eval_sets,
    poison_dataset,
    split_benign_subset,
    synth_dataset,
)

log = logging.getLogger(__name__)

PIPELINES = ("ft", "ft-sam", "ft-l2")
METRIC_COLUMNS = ["epoch", "split", "acc", "asr", "loss"]
RESULT_COLUMNS = ["attack", "defense", "acc_pct", "asr_pct", "der_pct"]
NEURON_COLUMNS = ["layer", "unit", "norm_before", "norm_after", "tac", "grad_norm_ft", "grad_norm_ftsam"]


class StageError(RuntimeError):
    pass


# -- experiment context --------------------------------------------------------


@dataclass
class Experiment:
    """Everything a stage needs, rebuilt deterministically from the config."""

    cfg: ExperimentConfig
    out: Path
    spec: ModelSpec
    model: Model
    clean_train: ImageSet
    test: ImageSet
    trigger: object
    policy: PoisonPolicy

    @property
    def digest(self) -> str:
        return self.cfg.digest()

    def seed(self, label: str) -> int:
        return derive_seed(self.cfg.seed, label)

    @property
    def eval_sets(self) -> Tuple[ImageSet, ImageSet]:
        if not hasattr(self, "_eval_sets"):
            self._eval_sets = make_eval_sets(self.test, self.trigger, self.policy)
        return self._eval_sets

    def benign_subset(self) -> ImageSet:
        return split_benign_subset(self.clean_train, self.cfg.defense.benign_fraction, self.seed("benign-subset"))

    def attack_plan(self) -> TrainPlan:
        return _plan(self.cfg.attack.train, self.seed("attack-shuffle"))

    def defense_plan(self, pipeline: str, rho: Optional[float] = None, gamma: Optional[float] = None) -> TrainPlan:
        d = self.cfg.defense
        plan = _plan(d.train, self.seed("defense-shuffle"))
        if pipeline == "ft-sam":
            return replace(plan, sam=SamConfig(rho, d.adaptive, tuple(d.exclude)))
        if pipeline == "ft-l2":
            return replace(plan, gamma=gamma)
        return plan

    @property
    def attack_dir(self) -> Path:
        return self.out / "attack"


def _plan(p, seed: int) -> TrainPlan:
    return TrainPlan(
        epochs=p.epochs,
        batch_size=p.batch_size,
        seed=seed,
        sgd=SgdConfig(p.learning_rate, p.momentum, p.weight_decay),
        snapshot_every=p.snapshot_every,
    )


def load_data(cfg: ExperimentConfig) -> Tuple[ImageSet, ImageSet]:
    d = cfg.dataset
    if d.source == "synthetic":
        train = synth_dataset(d.classes, d.train_per_class, derive_seed(cfg.seed, "data-train"), d.image_size, d.noise)
        test = synth_dataset(d.classes, d.test_per_class, derive_seed(cfg.seed, "data-test"), d.image_size, d.noise)
        return train, test
    for name in ("train_images", "train_labels", "test_images", "test_labels"):
        if not Path(getattr(d, name)).exists():
            raise ConfigError(f"dataset.{name}: file {getattr(d, name)} does not exist", f"dataset.{name}")
    train = load_idx(d.train_images, d.train_labels)
    test = load_idx(d.test_images, d.test_labels)
    if d.limit_train:
        train = train.subset(np.arange(min(d.limit_train, len(train))))
    if d.limit_test:
        test = test.subset(np.arange(min(d.limit_test, len(test))))
    return train, test


def make_trigger(cfg: ExperimentConfig, image_shape):
    t = cfg.attack.trigger
    if t.kind == "patch":
        return PatchTrigger(t.size, t.value)
    if t.kind == "blend":
        seed = t.pattern_seed if t.pattern_seed is not None else derive_seed(cfg.seed, "blend-pattern")
        return BlendTrigger(blend_pattern(image_shape, seed), t.alpha, seed)
    return SinusoidTrigger(t.delta, t.frequency)


def open_experiment(cfg: ExperimentConfig, out) -> Experiment:
    out = Path(out or cfg.output or "runs/default")
    train, test = load_data(cfg)
    num_classes = cfg.dataset.classes if cfg.dataset.source == "synthetic" else max(train.num_classes, test.num_classes)
    if cfg.attack.target >= num_classes:
        raise ConfigError(f"attack.target {cfg.attack.target} outside [0, {num_classes})", "attack.target")
    spec = reference_spec(cfg.model, train.image_shape, num_classes)
    policy = PoisonPolicy(cfg.attack.ratio, cfg.attack.mode, num_classes, cfg.attack.target,
                          derive_seed(cfg.seed, "poison"))
    return Experiment(cfg, out, spec, Model(spec), train, test, make_trigger(cfg, train.image_shape), policy)


# -- file helpers ----------------------------------------------------------------


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _write_json(path: Path, obj) -> Path:
    return _write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict]) -> Path:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return _write_text(path, buf.getvalue())


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_lock(exp: Experiment) -> None:
    lock = exp.out / "config.lock"
    if lock.exists():
        locked = json.loads(lock.read_text()).get("digest")
        if locked != exp.digest:
            raise ConfigError(
                f"{lock} was written for config {locked[:12]}, current config is {exp.digest[:12]}; use a fresh --out",
                "config",
            )
    _write_text(lock, exp.cfg.lock_text())


def check_lock(exp: Experiment) -> None:
    lock = exp.out / "config.lock"
    if not lock.exists():
        raise StageError(f"{lock} missing; run the attack stage first")
    locked = json.loads(lock.read_text()).get("digest")
    if locked != exp.digest:
        raise ConfigError(f"config digest {exp.digest[:12]} does not match {lock} ({locked[:12]})", "config")


def write_run(dirpath: Path, record: RunRecord, exp: Experiment, figures: bool) -> None:
    record.extra["config_digest"] = exp.digest
    _write_json(dirpath / "record.json", record.to_dict())
    rows, timing = [], []
    for e in record.epochs:
        rows.append({"epoch": e.epoch, "split": "train", "acc": e.train_acc, "asr": None, "loss": e.train_loss})
        rows.append({"epoch": e.epoch, "split": "test", "acc": e.acc, "asr": e.asr, "loss": e.test_loss})
        timing.append({"epoch": e.epoch, "seconds": e.seconds})
    _write_csv(dirpath / "metrics.csv", METRIC_COLUMNS, rows)
    _write_csv(dirpath / "timing.csv", ["epoch", "seconds"], timing)
    if figures:
        plotting.training_curves(record, dirpath / "curves.png")


def read_record(dirpath: Path) -> RunRecord:
    return RunRecord.from_dict(json.loads((dirpath / "record.json").read_text()))


def attack_name(cfg: ExperimentConfig) -> str:
    name = cfg.attack.name
    if cfg.attack.trigger.kind == "patch" and name.lower() == "badnets":
        return f"BadNets-{'A2O' if cfg.attack.mode == 'all-to-one' else 'A2A'}"
    return name


# -- stages --------------------------------------------------------------------------


def cmd_attack(cfg: ExperimentConfig, out=None, figures: bool = True) -> Dict:
    """Poison, train the backdoored model, persist checkpoint + manifest + record."""
    exp = open_experiment(cfg, out)
    write_lock(exp)
    poisoned = poison_dataset(exp.clean_train, exp.trigger, exp.policy)
    params = build(exp.spec, exp.seed("init"))
    snap_dir = exp.attack_dir / "snapshots"

    def snapshot(epoch, p):
        save_checkpoint(p, snap_dir / f"epoch{epoch:03d}.ckpt", exp.spec,
                        {"config_digest": exp.digest, "stage": "attack", "epoch": epoch})

    params, record = train_backdoored(exp.model, params, poisoned, exp.eval_sets, exp.attack_plan(), exp.policy,
                                      on_snapshot=snapshot)
    lineage = {"config_digest": exp.digest, "seed": exp.cfg.seed, "stage": "attack", "parent": None}
    ckpt_digest = save_checkpoint(params, exp.attack_dir / "model.ckpt", exp.spec, lineage)
    record.extra["checkpoint_digest"] = ckpt_digest
    write_run(exp.attack_dir, record, exp, figures)
    manifest = {
        "config_digest": exp.digest,
        "source": exp.cfg.dataset.model_dump(mode="json"),
        "trigger": exp.trigger.describe(),
        "policy": exp.policy.describe(),
        "selection": "uniform without replacement",
        "n_train": len(poisoned),
        "poisoned_indices": sorted(int(i) for i in poisoned.source_index[poisoned.poisoned]),
        "n_test_benign": len(exp.eval_sets[0]),
        "n_test_poisoned": len(exp.eval_sets[1]),
    }
    if isinstance(exp.trigger, BlendTrigger):
        np.save(exp.attack_dir / "trigger_pattern.npy", exp.trigger.pattern)
        manifest["trigger_pattern"] = "trigger_pattern.npy"
    _write_json(exp.attack_dir / "manifest.json", manifest)
    return {"checkpoint": str(exp.attack_dir / "model.ckpt"), "checkpoint_digest": ckpt_digest,
            "acc": record.final.acc, "asr": record.final.asr}


def _resolve_pipeline(exp: Experiment, pipeline: str, rho: Optional[float], gamma: Optional[float]):
    if pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {pipeline!r}; choose from {', '.join(PIPELINES)}", "pipeline")
    rho = rho if rho is not None else exp.cfg.defense.rho
    gamma = gamma if gamma is not None else exp.cfg.defense.gamma
    if pipeline == "ft-sam" and rho is None:
        raise ConfigError("pipeline ft-sam needs a perturbation radius: set defense.rho or pass --rho", "defense.rho")
    if pipeline == "ft-l2" and gamma is None:
        raise ConfigError("pipeline ft-l2 needs defense.gamma or --gamma", "defense.gamma")
    if pipeline != "ft-sam" and rho is not None:
        log.warning("pipeline %s ignores rho=%s", pipeline, rho)
    if pipeline != "ft-l2" and gamma is not None:
        log.warning("pipeline %s ignores gamma=%s", pipeline, gamma)
    return exp.defense_plan(pipeline, rho=rho, gamma=gamma)


def _load_attacked(exp: Experiment, checkpoint=None):
    path = Path(checkpoint) if checkpoint else exp.attack_dir / "model.ckpt"
    if not path.exists():
        raise StageError(f"checkpoint {path} not found; run the attack stage first")
    return path, load_checkpoint(path, exp.spec)


def cmd_defend(cfg: ExperimentConfig, out=None, pipeline: str = "ft-sam", checkpoint=None,
               rho: Optional[float] = None, gamma: Optional[float] = None, figures: bool = True,
               name: Optional[str] = None) -> Dict:
    """Fine-tune the attacked checkpoint on the benign subset with one pipeline.

    Artifacts go to ``<out>/defend-<pipeline>`` unless ``name`` picks another
    subdirectory (e.g. two FT-L2 runs with different gamma).
    """
    exp = open_experiment(cfg, out)
    check_lock(exp)
    plan = _resolve_pipeline(exp, pipeline, rho, gamma)
    dirpath = exp.out / (name or f"defend-{pipeline}")
    if dirpath.resolve().parent != exp.out.resolve():
        raise ConfigError(f"run name {name!r} must be a plain directory name", "name")
    path, params = _load_attacked(exp, checkpoint)
    start = file_digest(path)
    baseline = evaluate(exp.model, params, exp.eval_sets, exp.policy)
    params, record = finetune(exp.model, params, exp.benign_subset(), exp.eval_sets, plan, exp.policy, baseline)
    record.start_digest = start
    lineage = {"config_digest": exp.digest, "seed": exp.cfg.seed, "stage": f"defend-{pipeline}", "parent": start}
    ckpt_digest = save_checkpoint(params, dirpath / "model.ckpt", exp.spec, lineage)
    record.extra.update({"checkpoint_digest": ckpt_digest, "baseline": baseline.to_dict()})
    write_run(dirpath, record, exp, figures)
    return {"checkpoint": str(dirpath / "model.ckpt"), "checkpoint_digest": ckpt_digest,
            "start_digest": start, "acc": record.final.acc, "asr": record.final.asr, "der": record.final.der}


def result_row(attack: str, defense: str, report: EvalReport) -> Dict:
    return {
        "attack": attack,
        "defense": defense,
        "acc_pct": round(100 * report.acc, 2),
        "asr_pct": round(100 * report.asr, 2),
        "der_pct": None if report.der is None else round(100 * report.der, 2),
    }


def format_table(rows: Sequence[Dict]) -> str:
    """Aligned text table; cells follow the ACC/ASR/DER convention."""
    header = ["attack", "defense", "ACC", "ASR", "DER", "ACC/ASR/DER"]
    body = []
    for r in rows:
        d = "-" if r["der_pct"] is None else f"{r['der_pct']:.2f}"
        cell = f"{r['acc_pct']:.2f}/{r['asr_pct']:.2f}" + ("" if r["der_pct"] is None else f"/{d}")
        body.append([r["attack"], r["defense"], f"{r['acc_pct']:.2f}", f"{r['asr_pct']:.2f}", d, cell])
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
    return "\n".join(lines)


def _defense_label(path: Path) -> str:
    rec = path.parent / "record.json"
    if rec.exists():
        p = json.loads(rec.read_text())
        if p.get("stage") == "attack":
            return "Backdoored"
        return {"ft": "FT", "ft-sam": "FT-SAM", "ft-l2": "FT-L2"}.get(p.get("pipeline"), p.get("pipeline"))
    return path.stem


def cmd_eval(cfg: ExperimentConfig, out=None, checkpoints: Sequence = (), baseline=None,
             figures: bool = True) -> List[Dict]:
    """Score the baseline and defended checkpoints; the baseline row carries no DER."""
    exp = open_experiment(cfg, out)
    base_path = Path(baseline) if baseline else exp.attack_dir / "model.ckpt"
    if not base_path.exists():
        raise StageError(f"baseline checkpoint {base_path} not found")
    paths = [Path(c) for c in checkpoints] or sorted(exp.out.glob("defend-*/model.ckpt"))
    base_report = evaluate(exp.model, load_checkpoint(base_path, exp.spec), exp.eval_sets, exp.policy)
    name = attack_name(exp.cfg)
    rows = [result_row(name, "Backdoored", base_report)]
    for p in paths:
        report = evaluate(exp.model, load_checkpoint(p, exp.spec), exp.eval_sets, exp.policy, baseline=base_report)
        rows.append(result_row(name, _defense_label(p), report))
    _write_csv(exp.out / "eval" / "results.csv", RESULT_COLUMNS, rows)
    _write_json(exp.out / "eval" / "results.json", {"config_digest": exp.digest, "rows": rows})
    if figures:
        plotting.results_bars(rows, exp.out / "eval" / "results.png")
    return rows


def read_results_json(path) -> List[Dict]:
    return json.loads(Path(path).read_text())["rows"]


def cmd_sweep(cfg: ExperimentConfig, out=None, rho_list: Optional[Sequence[float]] = None, checkpoint=None,
              figures: bool = True) -> List[Dict]:
    """FT-SAM once per rho from the same attacked checkpoint."""
    exp = open_experiment(cfg, out)
    check_lock(exp)
    rho_list = list(rho_list if rho_list is not None else exp.cfg.defense.rho_list)
    if not rho_list:
        raise ConfigError("empty rho list", "defense.rho_list")
    path, params = _load_attacked(exp, checkpoint)
    start = file_digest(path)
    baseline = evaluate(exp.model, params, exp.eval_sets, exp.policy)
    plan = exp.defense_plan("ft-sam", rho=rho_list[0])
    records = sweep_rho(exp.model, params, exp.benign_subset(), exp.eval_sets, plan, rho_list, exp.policy, baseline)
    rows = []
    for rec in records:
        rec.start_digest = start
        rec.extra["config_digest"] = exp.digest
        rows.append({"rho": rec.extra["rho"], "acc_pct": round(100 * rec.final.acc, 2),
                     "asr_pct": round(100 * rec.final.asr, 2), "der_pct": round(100 * rec.final.der, 2),
                     "start_digest": start, "final_digest": rec.final_digest})
    d = exp.out / "sweep"
    _write_csv(d / "results.csv", ["rho", "acc_pct", "asr_pct", "der_pct", "start_digest", "final_digest"], rows)
    _write_json(d / "records.json", [r.to_dict() for r in records])
    if figures:
        plotting.rho_sweep(rows, d / "rho.png")
    return rows


def unit_grad_norms(grads, layer: str) -> np.ndarray:
    g = np.asarray(grads[f"{layer}.weight"], dtype=np.float64)
    return np.sqrt((g.reshape(g.shape[0], -1) ** 2).sum(axis=1))


def first_batch_grad_norms(exp: Experiment, params, layer: str, rho: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-unit gradient norms on the first fine-tuning batch: at ``w`` (FT) and at ``w + eps`` (FT-SAM)."""
    benign = exp.benign_subset()
    plan = exp.defense_plan("ft")
    idx = np.random.default_rng(plan.seed).permutation(len(benign))[: plan.batch_size]
    x, y = benign.images[idx], benign.labels[idx]
    _, g = exp.model.loss_and_grad(params, x, y)
    sam = SamConfig(rho, exp.cfg.defense.adaptive, tuple(exp.cfg.defense.exclude))
    eps = params.with_flat(sam_perturbation(params.flat(), g.flat(), sam, adaptive_mask(params, sam.exclude)))
    _, g_sam = exp.model.loss_and_grad(params.map(lambda n, w: w + eps[n]), x, y)
    return unit_grad_norms(g, layer), unit_grad_norms(g_sam, layer)


def default_layer(spec: ModelSpec) -> str:
    convs = [l.name for l in spec.layers if l.kind == "conv"]
    return convs[-1] if convs else spec.param_layers()[-2 if len(spec.param_layers()) > 1 else -1]


def cmd_diagnose(cfg: ExperimentConfig, out=None, baseline=None, checkpoint=None, layer: Optional[str] = None,
                 rho: Optional[float] = None, figures: bool = True) -> Dict:
    """Per-unit weight norms before/after, TAC on the baseline, first-batch gradient norms."""
    exp = open_experiment(cfg, out)
    base_path = Path(baseline) if baseline else exp.attack_dir / "model.ckpt"
    def_path = Path(checkpoint) if checkpoint else exp.out / "defend-ft-sam" / "model.ckpt"
    for p in (base_path, def_path):
        if not p.exists():
            raise StageError(f"checkpoint {p} not found")
    before = load_checkpoint(base_path, exp.spec)
    after = load_checkpoint(def_path, exp.spec)
    layer = layer or exp.cfg.diagnose.layer or default_layer(exp.spec)
    if layer not in exp.spec.param_layers():
        raise ConfigError(f"layer {layer!r} is not a conv/linear layer of {exp.spec.name} "
                          f"({', '.join(exp.spec.param_layers())})", "layer")
    rho = rho if rho is not None else exp.cfg.defense.rho
    if rho is None:
        raise ConfigError("diagnose needs defense.rho (or --rho) for the FT-SAM gradient column", "defense.rho")
    n_before = neuron_weight_norms(before, layer)
    n_after = neuron_weight_norms(after, layer)
    benign = exp.eval_sets[0].images[: exp.cfg.diagnose.tac_pairs]
    tac = tac_profile(exp.model, before, layer, benign, exp.trigger.apply(benign))
    g_ft, g_sam = first_batch_grad_norms(exp, before, layer, rho)
    rows = [
        {"layer": layer, "unit": k, "norm_before": n_before.norms[k], "norm_after": n_after.norms[k],
         "tac": tac.values[k], "grad_norm_ft": g_ft[k], "grad_norm_ftsam": g_sam[k]}
        for k in range(len(n_before))
    ]
    d = exp.out / "diagnose"
    _write_csv(d / "neurons.csv", NEURON_COLUMNS, rows)
    try:
        rank_corr = norm_tac_correlation(n_before, tac)
    except ValueError:
        rank_corr = None
    summary = {
        "config_digest": exp.digest,
        "layer": layer,
        "units": len(rows),
        "tac_pairs": tac.n_pairs,
        "spearman_norm_tac": rank_corr,
        "mean_norm_before": float(n_before.norms.mean()),
        "mean_norm_after": float(n_after.norms.mean()),
        "baseline_digest": file_digest(base_path),
        "defended_digest": file_digest(def_path),
    }
    _write_json(d / "summary.json", summary)
    if figures:
        plotting.neuron_panels(n_before.norms, n_after.norms, tac.values, g_ft, g_sam, layer, d / "neurons.png")
    return summary
