"""Dense float32 layer primitives with a tape for reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` objects. Every primitive takes an optional
:class:`Tape`; when one is given, the primitive appends a closure that maps
the gradient of its output to the gradient of its input (plus any parameter
gradients). :func:`backward` replays the tape in reverse and consumes it.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], Dict[str, np.ndarray]]]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a loss or gradient."""


class TapeConsumedError(RuntimeError):
    pass


class Tape:
    """Ordered record of executed primitives (one forward pass)."""

    def __init__(self) -> None:
        self._ops: List[Tuple[str, BackwardFn]] = []
        self.consumed = False

    def push(self, name: str, fn: BackwardFn) -> None:
        if self.consumed:
            raise TapeConsumedError("cannot record onto a consumed tape")
        self._ops.append((name, fn))

    @property
    def op_names(self) -> List[str]:
        return [name for name, _ in self._ops]

    def __len__(self) -> int:
        return len(self._ops)


def backward(tape: Tape, loss_grad: float = 1.0) -> Dict[str, np.ndarray]:
    """Run the tape in reverse, starting from d(loss) = ``loss_grad``.

    Returns parameter gradients keyed by parameter name. The tape can only be
    replayed once.
    """
    if tape.consumed:
        raise TapeConsumedError("backward already ran on this tape")
    tape.consumed = True
    grad: Optional[np.ndarray] = np.asarray(loss_grad, dtype=DTYPE)
    grads: Dict[str, np.ndarray] = {}
    for _, fn in reversed(tape._ops):
        grad, pgrads = fn(grad)
        for name, g in pgrads.items():
            grads[name] = grads[name] + g if name in grads else g
    tape._ops.clear()
    return grads


def linear_forward(
    x: np.ndarray,
    W: np.ndarray,
    b: np.ndarray,
    tape: Optional[Tape] = None,
    names: Tuple[str, str] = ("weight", "bias"),
) -> np.ndarray:
    """``out[n, o] = sum_i x[n, i] * W[o, i] + b[o]``."""
    if x.ndim != 2 or W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[1] != W.shape[1]:
        raise ShapeError(f"linear: x{x.shape} W{W.shape} b{b.shape} do not compose")
    out = x @ W.T + b
    if tape is not None:
        wname, bname = names

        def fn(g):
            return g @ W, {wname: g.T @ x, bname: g.sum(axis=0)}

        tape.push("linear", fn)
    return out


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if k > size + 2 * pad or span % stride:
        raise ShapeError(
            f"conv: input {size}, kernel {k}, stride {stride}, pad {pad} gives a non-integral output size"
        )
    return span // stride + 1


def conv2d_forward(
    x: np.ndarray,
    K: np.ndarray,
    b: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    tape: Optional[Tape] = None,
    names: Tuple[str, str] = ("weight", "bias"),
) -> np.ndarray:
    """Direct 2-D cross-correlation with zero padding.

    The sum runs over kernel offsets; each offset contributes one
    (batch*pixels, Cin) x (Cin, Cout) product.
    """
    if x.ndim != 4 or K.ndim != 4 or K.shape[1] != x.shape[1] or K.shape[2] != K.shape[3]:
        raise ShapeError(f"conv: x{x.shape} K{K.shape} do not compose")
    if b.shape != (K.shape[0],):
        raise ShapeError(f"conv: bias {b.shape} for {K.shape[0]} output channels")
    B, C, H, W = x.shape
    O, _, k, _ = K.shape
    Ho = conv_output_size(H, k, stride, pad)
    Wo = conv_output_size(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x

    def window(p, q):
        return xp[:, :, p : p + stride * (Ho - 1) + 1 : stride, q : q + stride * (Wo - 1) + 1 : stride]

    acc = np.zeros((B * Ho * Wo, O), dtype=np.result_type(x, K))
    for p in range(k):
        for q in range(k):
            cols = window(p, q).transpose(0, 2, 3, 1).reshape(-1, C)
            acc += cols @ K[:, :, p, q].T
    out = acc.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2) + b[None, :, None, None]

    if tape is not None:
        wname, bname = names

        def fn(g):
            gt = g.transpose(0, 2, 3, 1).reshape(-1, O)
            dK = np.empty_like(K)
            dxp = np.zeros_like(xp)
            for p in range(k):
                for q in range(k):
                    cols = window(p, q).transpose(0, 2, 3, 1).reshape(-1, C)
                    dK[:, :, p, q] = gt.T @ cols
                    dcols = (gt @ K[:, :, p, q]).reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
                    dxp[:, :, p : p + stride * (Ho - 1) + 1 : stride, q : q + stride * (Wo - 1) + 1 : stride] += dcols
            dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
            return dx, {wname: dK, bname: g.sum(axis=(0, 2, 3))}

        tape.push("conv2d", fn)
    return np.ascontiguousarray(out)


def relu(x: np.ndarray, tape: Optional[Tape] = None) -> np.ndarray:
    out = np.maximum(x, 0).astype(x.dtype, copy=False)
    if tape is not None:
        mask = x > 0
        tape.push("relu", lambda g: (g * mask, {}))
    return out


def _pool_windows(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)


def pool_argmax(x: np.ndarray) -> np.ndarray:
    """Index (0..3) of the winning element in every 2x2 window."""
    return _pool_windows(x).argmax(axis=-1)


def maxpool2x2(x: np.ndarray, tape: Optional[Tape] = None) -> np.ndarray:
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first maximum."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    B, C, H, W = x.shape
    win = _pool_windows(x)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if tape is not None:

        def fn(g):
            dwin = np.zeros(win.shape, dtype=g.dtype)
            np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
            return dx, {}

        tape.push("maxpool2x2", fn)
    return out


def flatten(x: np.ndarray, tape: Optional[Tape] = None) -> np.ndarray:
    shape = x.shape
    out = x.reshape(shape[0], -1)
    if tape is not None:
        tape.push("flatten", lambda g: (g.reshape(shape), {}))
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, labels: Sequence[int], tape: Optional[Tape] = None
) -> float:
    """Batch-mean cross-entropy; records gradient ``(softmax - onehot) / B``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels {labels.shape} for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsum - z[rows, labels]))
    if not np.isfinite(loss):
        raise NonFiniteError(f"cross-entropy is {loss}")
    if tape is not None:

        def fn(g):
            d = softmax(logits)
            d[rows, labels] -= 1
            return d * (g / B), {}

        tape.push("softmax_cross_entropy", fn)
    return loss


def finite_difference_gradient(
    loss_fn: Callable[[Dict[str, np.ndarray]], float],
    params: Dict[str, np.ndarray],
    h: float = 1e-3,
    coords: Optional[Sequence[Tuple[str, int]]] = None,
    dtype=np.float64,
    pattern_fn: Optional[Callable[[Dict[str, np.ndarray]], bytes]] = None,
) -> Dict[str, np.ndarray]:
    """Central differences ``(L(w + h e_i) - L(w - h e_i)) / 2h``.

    ``loss_fn`` receives a dict of arrays in ``dtype``; float64 keeps the
    rounding floor far below the truncation error at ``h=1e-3``. When
    ``coords`` is given only those (name, flat index) entries are filled and
    the rest of the result is NaN.

    ``pattern_fn`` returns a fingerprint of the piecewise-linear regime (ReLU
    signs, pooling winners). Coordinates whose stencil crosses a kink, i.e.
    whose fingerprint differs at ``w + h e_i`` and ``w - h e_i``, are NaN.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = {n: np.array(v, dtype=dtype) for n, v in params.items()}
    if coords is None:
        coords = [(n, i) for n, v in work.items() for i in range(v.size)]
        out = {n: np.zeros(v.shape, dtype=dtype) for n, v in work.items()}
    else:
        out = {n: np.full(v.shape, np.nan, dtype=dtype) for n, v in work.items()}
    for name, i in coords:
        flat = work[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(work)
        kink_up = pattern_fn(work) if pattern_fn else None
        flat[i] = orig - h
        down = loss_fn(work)
        kinked = pattern_fn is not None and pattern_fn(work) != kink_up
        flat[i] = orig
        out[name].reshape(-1)[i] = np.nan if kinked else (up - down) / (2 * h)
    return out
