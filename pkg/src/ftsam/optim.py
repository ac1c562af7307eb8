"""SGD with momentum and the adaptive sharpness-aware step used for FT-SAM."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .autodiff import DTYPE, NonFiniteError
from .model import Model, ParamSet


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass(frozen=True)
class SamConfig:
    """Perturbation radius and scaling.

    ``adaptive=True`` scales each coordinate by ``|w_i|``; ``False`` uses the
    identity. Parameters whose names match a pattern in ``exclude`` always
    use identity scaling.
    """

    rho: float = 1.0
    adaptive: bool = True
    exclude: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        object.__setattr__(self, "exclude", tuple(self.exclude))


@dataclass
class OptimizerState:
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "OptimizerState":
        return cls({n: np.zeros_like(v) for n, v in params.items()})


def sam_perturbation(w: np.ndarray, g: np.ndarray, cfg: SamConfig,
                     adaptive_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Maximiser of the linearised loss over ``||T^-1 eps||_2 <= rho``.

    ``eps = rho * T^2 g / ||T g||`` with ``T = diag(|w|)`` (adaptive) or the
    identity, and a single norm over the whole vector. Zero denominator gives
    ``eps = 0``. ``adaptive_mask`` marks the coordinates that get ``|w_i|``
    scaling; the rest use 1.
    """
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ValueError(f"w{w.shape} and g{g.shape} differ")
    if cfg.adaptive:
        t = np.abs(w)
        if adaptive_mask is not None:
            t = np.where(adaptive_mask, t, 1.0)
    else:
        t = np.ones_like(w)
    tg = t * g
    scale = np.max(np.abs(tg)) if tg.size else 0.0
    if cfg.rho == 0 or scale == 0 or not np.isfinite(scale):
        return np.zeros_like(w)
    # normalise by the largest entry first so tiny gradients do not underflow when squared
    unit = tg / scale
    return cfg.rho * t * (unit / np.sqrt(np.dot(unit, unit)))


def adaptive_mask(params: ParamSet, exclude: Sequence[str]) -> Optional[np.ndarray]:
    if not exclude:
        return None
    return np.concatenate([
        np.full(v.size, not any(fnmatch.fnmatch(n, pat) for pat in exclude)) for n, v in params.items()
    ])


def _check_finite(loss: float, grads: ParamSet, where: str) -> None:
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad or not np.isfinite(loss):
        raise NonFiniteError(f"{where}: loss={loss}, non-finite gradients in {bad or 'none'}")


def l2_regularized_gradient(model: Model, params: ParamSet, batch, gamma: float) -> Tuple[float, ParamSet]:
    """Loss and gradient of ``L(w) + gamma * ||w||^2``, i.e. ``grad L + 2 gamma w``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    x, y = batch
    loss, grads = model.loss_and_grad(params, x, y)
    if gamma:
        g2 = DTYPE(2 * gamma)
        grads = grads.map(lambda n, g: g + g2 * params[n])
        loss += gamma * float(sum(np.dot(v.ravel().astype(np.float64), v.ravel()) for _, v in params.items()))
    return loss, grads


def _momentum_update(params: ParamSet, grads: ParamSet, sgd: SgdConfig, state: OptimizerState) -> ParamSet:
    lr, mu, wd = DTYPE(sgd.learning_rate), DTYPE(sgd.momentum), DTYPE(sgd.weight_decay)
    out = {}
    for n, w in params.items():
        d = grads[n] + wd * w if sgd.weight_decay else grads[n]
        v = state.momentum.get(n)
        v = d.copy() if v is None else mu * v + d
        state.momentum[n] = v
        out[n] = w - lr * v
    state.steps += 1
    return ParamSet(out)


def sgd_step(model: Model, params: ParamSet, batch, sgd: SgdConfig, state: OptimizerState,
             gamma: float = 0.0) -> Tuple[ParamSet, float]:
    """One momentum-SGD step; ``gamma > 0`` adds the L2 penalty to the gradient.

    Mutates ``state`` and returns ``(new_params, loss)``.
    """
    if gamma:
        loss, grads = l2_regularized_gradient(model, params, batch, gamma)
    else:
        loss, grads = model.loss_and_grad(params, *batch)
    _check_finite(loss, grads, "sgd step")
    return _momentum_update(params, grads, sgd, state), loss


def sam_step(model: Model, params: ParamSet, batch, sgd: SgdConfig, sam: SamConfig,
             state: OptimizerState) -> Tuple[ParamSet, float]:
    """Ascend to ``w + eps`` on the batch, then descend from ``w`` with the gradient found there.

    Weight decay acts on the unperturbed weights. Mutates ``state`` and
    returns ``(new_params, loss at w)``.
    """
    x, y = batch
    loss, g1 = model.loss_and_grad(params, x, y)
    _check_finite(loss, g1, "sam ascent")
    eps = params.with_flat(sam_perturbation(params.flat(), g1.flat(), sam, adaptive_mask(params, sam.exclude)))
    perturbed = params.map(lambda n, w: w + eps[n])
    loss2, g2 = model.loss_and_grad(perturbed, x, y)
    _check_finite(loss2, g2, "sam descent")
    return _momentum_update(params, g2, sgd, state), loss
