import numpy as np
import pytest

from ftsam import autodiff as ad
from ftsam.autodiff import Tape
from ftsam.model import Model, build, reference_spec

F32 = np.float32


def naive_conv(x, K, b, stride=1, pad=0):
    B, C, H, W = x.shape
    O, _, k, _ = K.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    s = float(b[o])
                    for c in range(C):
                        for p in range(k):
                            for q in range(k):
                                s += xp[n, c, i * stride + p, j * stride + q] * K[o, c, p, q]
                    out[n, o, i, j] = s
    return out


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    return np.where(denom == 0, 0.0, np.abs(a - b) / np.where(denom == 0, 1, denom))


def layer_gradcheck(forward, inputs, names, rng, n_coords=500):
    """Backward vs central differences for a scalar loss sum(out * R)."""
    out = forward({k: v.astype(F32) for k, v in inputs.items()}, None)
    R = rng.standard_normal(out.shape)

    def loss(p):
        return float(np.sum(forward(p, None) * R))

    tape = Tape()
    out = forward({k: v.astype(F32) for k, v in inputs.items()}, tape)
    # seed the reverse pass with dL/dout = R
    tape.push("seed", lambda g: (R.astype(F32), {}))
    grads = ad.backward(tape)
    coords = []
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        coords.append((name, int(rng.integers(inputs[name].size))))
    fd = ad.finite_difference_gradient(loss, inputs, h=1e-3, coords=coords)
    errs = [rel_err(grads[n].reshape(-1)[i], fd[n].reshape(-1)[i]) for n, i in coords]
    return max(errs)


def with_input_grad(fn):
    """Wrap a primitive so the gradient reaching its input is reported as 'x'."""

    def forward(p, tape):
        if tape is not None:
            tape.push("input", lambda g: (None, {"x": g}))
        return fn(p, tape)

    return forward


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cnn():
    spec = reference_spec("small-cnn", (1, 8, 8), 4)
    return Model(spec), build(spec, 0)


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
