"""Acceptance gate: nine criteria, each reported as one PASS/FAIL line.

The end-to-end criteria (5 to 9) share session fixtures so every training run
happens once. Run ``pytest tests/test_acceptance.py -v`` and read the
"acceptance criteria" section of the terminal summary.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from ftsam import autodiff as ad
from ftsam import harness
from ftsam.config import load_config, parse_config
from ftsam.metrics import EvalReport, der
from ftsam.model import Model, build, load_checkpoint, reference_spec
from ftsam.optim import SamConfig, sam_perturbation

from conftest import layer_gradcheck, record_criterion, rel_err, with_input_grad

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
BLENDED = Path(__file__).resolve().parents[1] / "configs" / "desk-blended.yaml"

# (backdoored ACC, ASR) -> (defended ACC, ASR, reference DER), all in percent
TABLE_CELLS = [
    ((91.82, 93.79), (92.21, 1.63, 96.08)),
    ((91.82, 93.79), (90.29, 1.70, 95.28)),
    ((91.82, 93.79), (48.84, 16.57, 67.12)),
    ((91.89, 74.42), (91.07, 1.16, 86.22)),
    ((91.89, 74.42), (44.39, 40.65, 43.14)),
    ((93.44, 97.71), (92.48, 82.22, 57.26)),
    ((93.44, 97.71), (92.57, 8.32, 94.26)),
    ((93.44, 97.71), (88.82, 95.10, 49.00)),
    ((93.44, 97.71), (74.31, 0.10, 89.24)),
    ((93.44, 97.71), (92.44, 4.91, 95.90)),
]


def _pct(x):
    return f"{100 * x:.2f}%"


# -- criterion 1 ------------------------------------------------------------------


def test_criterion_1_der_exactness():
    rng = np.random.default_rng(2024)
    chosen = rng.choice(len(TABLE_CELLS), size=6, replace=False)
    worst = 0.0
    for i in chosen:
        (a0, s0), (a1, s1, expected) = TABLE_CELLS[i]
        value = 100 * der(EvalReport(a0 / 100, s0 / 100), EvalReport(a1 / 100, s1 / 100))
        worst = max(worst, abs(value - expected))
    ok = worst <= 0.005 + 1e-9
    record_criterion(1, ok, f"{len(chosen)} reference cells, max |DER - expected| = {worst:.4f} pp (tol 0.005)")
    assert ok


# -- criterion 2 ------------------------------------------------------------------


def test_criterion_2_closed_form_perturbation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    n_dirs, max_dim = 100_000, 512
    # prefixes of i.i.d. Gaussian rows are i.i.d. Gaussian, so one pool serves every dimension
    pool = rng.standard_normal((n_dirs, max_dim))
    radii = rng.random(n_dirs)
    prefix_sq = np.cumsum(pool ** 2, axis=1)
    worst_tight, worst_gap, n_tight = 0.0, -np.inf, 0
    for _ in range(1000):
        d = int(rng.integers(2, max_dim + 1))
        w = rng.standard_normal(d) * np.exp(rng.uniform(-3, 1))
        g = rng.standard_normal(d) * np.exp(rng.uniform(-3, 1))
        rho = float(np.exp(rng.uniform(np.log(0.01), np.log(10))))
        eps = sam_perturbation(w, g, SamConfig(rho, adaptive=True))
        tg = np.abs(w) * g
        if np.linalg.norm(tg) > 0:
            worst_tight = max(worst_tight, abs(np.linalg.norm(eps / np.abs(w)) - rho) / rho)
            n_tight += 1
        # feasible eps' = T u with ||u|| <= rho; its linear gain is u . (T g)
        u_gain = pool[:, :d] @ tg / np.sqrt(prefix_sq[:, d - 1])
        best = float(np.max(rho * radii * u_gain))
        worst_gap = max(worst_gap, best - float(eps @ g))
    elapsed = time.perf_counter() - t0
    ok = worst_tight <= 1e-5 and worst_gap <= 1e-6 and elapsed < 60
    record_criterion(2, ok, f"1000 triples, max rel |‖T⁻¹ε‖-ρ|/ρ = {worst_tight:.2e}, "
                            f"max(ε'ᵀg - εᵀg) over 1e5 directions = {worst_gap:.2e}, {elapsed:.1f}s")
    assert ok


# -- criterion 3 ------------------------------------------------------------------


def _full_model_gradcheck(n_coords=800):
    spec = reference_spec("small-cnn", (1, 8, 8), 4)
    model, params = Model(spec), build(spec, 21)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 1, 8, 8))
    y = rng.integers(0, 4, 4)
    _, grads = model.loss_and_grad(params, x.astype(np.float32), y)
    names = params.names()
    sizes = np.array([params[n].size for n in names], dtype=float)
    coords = []
    for _ in range(n_coords):
        n = names[rng.choice(len(names), p=np.sqrt(sizes) / np.sqrt(sizes).sum())]
        coords.append((n, int(rng.integers(params[n].size))))
    fd = ad.finite_difference_gradient(lambda p: ad.softmax_cross_entropy(model.forward(p, x), y),
                                       params.as_dict(), coords=coords,
                                       pattern_fn=lambda p: model.activation_pattern(p, x))
    smooth = [(n, i) for n, i in coords if np.isfinite(fd[n].reshape(-1)[i])]
    errs = [float(rel_err(grads[n].reshape(-1)[i], fd[n].reshape(-1)[i])) for n, i in smooth]
    return len(smooth), max(errs)


def _ce_gradcheck(rng, n=100, c=10):
    labels = rng.integers(0, c, n)
    z = rng.standard_normal((n, c))
    tape = ad.Tape()
    tape.push("input", lambda g: (None, {"z": g}))
    ad.softmax_cross_entropy(z.astype(np.float32), labels, tape)
    grads = ad.backward(tape)
    coords = [("z", int(i)) for i in rng.choice(z.size, 500, replace=False)]
    fd = ad.finite_difference_gradient(lambda p: ad.softmax_cross_entropy(p["z"], labels), {"z": z}, coords=coords)
    return max(float(rel_err(grads["z"].reshape(-1)[i], fd["z"].reshape(-1)[i])) for _, i in coords)


def test_criterion_3_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    errs = {
        "linear": layer_gradcheck(
            with_input_grad(lambda p, t: ad.linear_forward(p["x"], p["W"], p["b"], t, ("W", "b"))),
            {"x": rng.standard_normal((8, 20)), "W": rng.standard_normal((16, 20)), "b": rng.standard_normal(16)},
            ["x", "W", "b"], rng),
        "conv2d": layer_gradcheck(
            with_input_grad(lambda p, t: ad.conv2d_forward(p["x"], p["K"], p["b"], 1, 1, t, ("K", "b"))),
            {"x": rng.standard_normal((2, 3, 8, 8)), "K": rng.standard_normal((4, 3, 3, 3)),
             "b": rng.standard_normal(4)},
            ["x", "K", "b"], rng),
        "relu": layer_gradcheck(with_input_grad(lambda p, t: ad.relu(p["x"], t)),
                                {"x": rng.standard_normal((10, 100))}, ["x"], rng),
        "maxpool": layer_gradcheck(with_input_grad(lambda p, t: ad.maxpool2x2(p["x"], t)),
                                   {"x": rng.standard_normal((4, 4, 8, 8))}, ["x"], rng),
        "cross-entropy": _ce_gradcheck(rng),
    }
    n_smooth, errs["small-cnn"] = _full_model_gradcheck()
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-3 and n_smooth >= 500 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record_criterion(3, ok, f"max rel err per check: {detail}; small-cnn on {n_smooth} smooth coords; {elapsed:.0f}s")
    assert ok


# -- end-to-end fixtures --------------------------------------------------------------


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    cfg = load_config(DESK)
    out = tmp_path_factory.mktemp("desk")
    attack, t_attack = _timed(harness.cmd_attack, cfg, out, figures=False)
    return {"cfg": cfg, "out": out, "attack": attack, "t_attack": t_attack}


@pytest.fixture(scope="session")
def desk_ftsam(desk):
    return _timed(harness.cmd_defend, desk["cfg"], desk["out"], "ft-sam", figures=False)


@pytest.fixture(scope="session")
def desk_ft(desk):
    return _timed(harness.cmd_defend, desk["cfg"], desk["out"], "ft", figures=False)


def _baseline(desk):
    rec = harness.read_record(desk["out"] / "attack")
    return rec.final


def test_criterion_5_attack_validity(desk):
    cfg = desk["cfg"]
    a = desk["attack"]
    ok = (a["asr"] >= 0.95 and a["acc"] >= 0.95 and cfg.attack.train.epochs <= 20 and desk["t_attack"] <= 600
          and cfg.attack.ratio == 0.1 and cfg.attack.mode == "all-to-one" and cfg.attack.trigger.kind == "patch")
    record_criterion(5, ok, f"BadNets-A2O 10% on {cfg.dataset.source} data: ASR {_pct(a['asr'])}, ACC {_pct(a['acc'])} "
                            f"after {cfg.attack.train.epochs} epochs, {desk['t_attack']:.0f}s")
    assert ok


@pytest.fixture(scope="session")
def blended(tmp_path_factory):
    cfg = load_config(BLENDED)
    out = tmp_path_factory.mktemp("blended")
    attack = harness.cmd_attack(cfg, out, figures=False)
    ft, t_ft = _timed(harness.cmd_defend, cfg, out, "ft", figures=False)
    sam, t_sam = _timed(harness.cmd_defend, cfg, out, "ft-sam", figures=False)
    return attack, ft, sam, max(t_ft, t_sam)


def test_criterion_6_defense_trend(desk, desk_ftsam, blended):
    base = _baseline(desk)
    (sam, t_sam) = desk_ftsam
    drop = base.acc - sam["acc"]
    ok_a = sam["asr"] <= 0.05 and drop <= 0.02 and t_sam <= 900
    b_attack, b_ft, b_sam, b_time = blended
    ok_b = b_sam["asr"] <= b_ft["asr"] and b_sam["asr"] <= 0.10 and b_time <= 900
    record_criterion(6, ok_a and ok_b,
                     f"(a) BadNets FT-SAM ASR {_pct(sam['asr'])}, ACC drop {_pct(drop)}, {t_sam:.0f}s; "
                     f"(b) Blended ASR {_pct(b_attack['asr'])} -> FT {_pct(b_ft['asr'])}, FT-SAM {_pct(b_sam['asr'])}")
    assert ok_a and ok_b


def test_criterion_7_norm_diagnostics(desk, desk_ft, desk_ftsam):
    cfg, out = desk["cfg"], desk["out"]
    t0 = time.perf_counter()
    sam_summary = harness.cmd_diagnose(cfg, out, figures=False)
    ft_summary = harness.cmd_diagnose(cfg, out, checkpoint=out / "defend-ft" / "model.ckpt", figures=False)
    elapsed = time.perf_counter() - t0
    before = sam_summary["mean_norm_before"]
    d_sam = sam_summary["mean_norm_after"] - before
    d_ft = ft_summary["mean_norm_after"] - before
    rho = sam_summary["spearman_norm_tac"]
    ok = rho is not None and rho > 0 and d_sam < 0 and abs(d_ft) < abs(d_sam) and elapsed <= 300
    record_criterion(7, ok, f"{sam_summary['layer']}: Spearman(norm, TAC) {rho:+.3f}; mean norm change "
                            f"FT-SAM {d_sam / before:+.2%}, FT {d_ft / before:+.2%}")
    assert ok


def test_criterion_8_l2_ablation(desk):
    cfg, out = desk["cfg"], desk["out"]
    base = _baseline(desk)
    t0 = time.perf_counter()
    small = harness.cmd_defend(cfg, out, "ft-l2", gamma=0.01, figures=False, name="defend-ft-l2-0.01")
    large = harness.cmd_defend(cfg, out, "ft-l2", gamma=0.1, figures=False, name="defend-ft-l2-0.1")
    elapsed = time.perf_counter() - t0
    ok = small["asr"] < base.asr and large["acc"] < 0.3 and elapsed <= 900
    record_criterion(8, ok, f"gamma=0.01: ASR {_pct(base.asr)} -> {_pct(small['asr'])}; "
                            f"gamma=0.1: ACC {_pct(base.acc)} -> {_pct(large['acc'])}; {elapsed:.0f}s")
    assert ok


# -- criteria 4 and 9: reduced-epoch reruns --------------------------------------------


def _reduced_config():
    d = load_config(DESK).to_dict()
    d["attack"]["train"]["epochs"] = 3
    d["defense"]["train"]["epochs"] = 3
    return parse_config(d)


def _pipeline_run(cfg, out):
    harness.cmd_attack(cfg, out, figures=False)
    harness.cmd_defend(cfg, out, "ft", figures=False)
    harness.cmd_defend(cfg, out, "ft-sam", figures=False)
    harness.cmd_defend(cfg, out, "ft-sam", rho=0.0, figures=False, name="defend-ft-sam-rho0")
    harness.cmd_defend(cfg, out, "ft-l2", figures=False)
    harness.cmd_eval(cfg, out, figures=False)


@pytest.fixture(scope="session")
def reruns(tmp_path_factory):
    cfg = _reduced_config()
    first, second = tmp_path_factory.mktemp("run-a"), tmp_path_factory.mktemp("run-b")
    _, elapsed = _timed(_pipeline_run, cfg, first)
    _pipeline_run(cfg, second)
    return cfg, first, second, elapsed


def test_criterion_4_rho_zero_is_ft(reruns):
    cfg, first, _, _ = reruns
    spec = reference_spec(cfg.model, (1, cfg.dataset.image_size, cfg.dataset.image_size), cfg.dataset.classes)
    ft = load_checkpoint(first / "defend-ft" / "model.ckpt", spec)
    sam0 = load_checkpoint(first / "defend-ft-sam-rho0" / "model.ckpt", spec)
    same_metrics = (first / "defend-ft" / "metrics.csv").read_bytes() == \
        (first / "defend-ft-sam-rho0" / "metrics.csv").read_bytes()
    ok = ft.bit_equal(sam0) and same_metrics
    record_criterion(4, ok, f"FT vs FT-SAM(rho=0), {cfg.defense.train.epochs} epochs: tensors bit-identical "
                            f"{ft.bit_equal(sam0)}, metrics.csv identical {same_metrics}")
    assert ok


def test_criterion_9_determinism(reruns):
    _, first, second, elapsed = reruns
    # timing.csv holds wall-clock seconds and is the one file allowed to differ
    files = sorted(p.relative_to(first) for p in first.rglob("*")
                   if p.suffix in (".ckpt", ".csv", ".json", ".lock") and p.name != "timing.csv")
    differing = [str(f) for f in files if (first / f).read_bytes() != (second / f).read_bytes()]
    n_ckpt = sum(1 for f in files if f.suffix == ".ckpt")
    ok = not differing and n_ckpt >= 5
    record_criterion(9, ok, f"{len(files)} artifacts ({n_ckpt} checkpoints) compared across two runs, "
                            f"{len(differing)} differ {differing[:3]} (timing.csv excluded); one run {elapsed:.0f}s")
    assert ok
