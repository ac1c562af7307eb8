"""Reference architectures, parameter sets, and the checkpoint file format."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, ShapeError, Tape

MAGIC = b"FTSM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | linear | relu | pool | flatten
    name: str = ""
    out: int = 0
    kernel: int = 0
    pad: int = 0
    stride: int = 1


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        self.shapes()  # raises on an incomposable stack

    def shapes(self) -> Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        """Map each parametrised layer name to (weight shape, output shape)."""
        shape: Tuple[int, ...] = tuple(self.input_shape)
        out: Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]] = {}
        for layer in self.layers:
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"{layer.name}: conv needs a CxHxW input, got {shape}")
                c, h, w = shape
                ho = ad.conv_output_size(h, layer.kernel, layer.stride, layer.pad)
                wo = ad.conv_output_size(w, layer.kernel, layer.stride, layer.pad)
                wshape = (layer.out, c, layer.kernel, layer.kernel)
                shape = (layer.out, ho, wo)
                out[layer.name] = (wshape, shape)
            elif layer.kind == "linear":
                if len(shape) != 1:
                    raise ShapeError(f"{layer.name}: linear needs a flat input, got {shape}")
                wshape = (layer.out, shape[0])
                shape = (layer.out,)
                out[layer.name] = (wshape, shape)
            elif layer.kind == "pool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ShapeError(f"pool needs even spatial dims, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind != "relu":
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        if shape != (self.num_classes,):
            raise ShapeError(f"{self.name}: final output {shape} is not {self.num_classes} logits")
        return out

    def param_layers(self) -> List[str]:
        return [l.name for l in self.layers if l.kind in ("conv", "linear")]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": [asdict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def reference_spec(name: str, input_shape=(1, 16, 16), num_classes: int = 10) -> ModelSpec:
    """``small-cnn`` or ``mlp``."""
    input_shape = tuple(int(s) for s in input_shape)
    if name == "small-cnn":
        layers = (
            LayerSpec("conv", "conv1", out=16, kernel=3, pad=1),
            LayerSpec("relu"),
            LayerSpec("pool"),
            LayerSpec("conv", "conv2", out=32, kernel=3, pad=1),
            LayerSpec("relu"),
            LayerSpec("pool"),
            LayerSpec("flatten"),
            LayerSpec("linear", "fc", out=num_classes),
        )
    elif name == "mlp":
        layers = (
            LayerSpec("flatten"),
            LayerSpec("linear", "fc1", out=256),
            LayerSpec("relu"),
            LayerSpec("linear", "fc2", out=num_classes),
        )
    else:
        raise ValueError(f"unknown architecture {name!r} (expected 'small-cnn' or 'mlp')")
    return ModelSpec(name, layers, input_shape, num_classes)


class ParamSet:
    """Named float32 tensors in fixed declaration order.

    The iteration order defines the flattened vector used by the optimizers.
    """

    def __init__(self, tensors: Dict[str, np.ndarray]):
        self._t = {n: np.ascontiguousarray(v, dtype=DTYPE) for n, v in tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def __contains__(self, name) -> bool:
        return name in self._t

    def names(self) -> List[str]:
        return list(self._t)

    def items(self):
        return self._t.items()

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self._t)

    @property
    def size(self) -> int:
        return sum(v.size for v in self._t.values())

    def copy(self) -> "ParamSet":
        return ParamSet({n: v.copy() for n, v in self._t.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self._t.values()])

    def with_flat(self, vec: np.ndarray) -> "ParamSet":
        if vec.size != self.size:
            raise ShapeError(f"flat vector of {vec.size} for {self.size} parameters")
        out, i = {}, 0
        for n, v in self._t.items():
            out[n] = np.asarray(vec[i : i + v.size], dtype=DTYPE).reshape(v.shape)
            i += v.size
        return ParamSet(out)

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet({n: fn(n, v) for n, v in self._t.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, v in self._t.items():
            h.update(n.encode())
            h.update(np.asarray(v.shape, dtype="<u4").tobytes())
            h.update(v.astype("<f4").tobytes())
        return h.hexdigest()

    def bit_equal(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes() for n in self
        )

    def __repr__(self) -> str:
        shapes = ", ".join(f"{n}{tuple(v.shape)}" for n, v in self._t.items())
        return f"ParamSet({shapes})"


def build(spec: ModelSpec, seed: int) -> ParamSet:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (wshape, _) in spec.shapes().items():
        fan_in = int(np.prod(wshape[1:]))
        tensors[f"{name}.weight"] = rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)
        tensors[f"{name}.bias"] = np.zeros(wshape[0])
    return ParamSet(tensors)


class Model:
    """Executable form of a :class:`ModelSpec`.

    ``hooks`` are called with ``"forward"`` / ``"backward"`` events, which is
    how pass counts are instrumented.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.hooks: List[Callable[[str], None]] = []

    def _emit(self, event: str) -> None:
        for hook in self.hooks:
            hook(event)

    def forward(
        self,
        params,
        x: np.ndarray,
        tape: Optional[Tape] = None,
        capture: Optional[str] = None,
    ):
        """Logits for a batch ``x``.

        With ``capture=<layer>``, returns ``(logits, activation)`` where the
        activation is the layer output after its ReLU, if one follows.
        """
        self._emit("forward")
        h = x
        captured = None
        layers = self.spec.layers
        for i, layer in enumerate(layers):
            if layer.kind == "conv":
                h = ad.conv2d_forward(
                    h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"],
                    layer.stride, layer.pad, tape, (f"{layer.name}.weight", f"{layer.name}.bias"),
                )
            elif layer.kind == "linear":
                h = ad.linear_forward(
                    h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"],
                    tape, (f"{layer.name}.weight", f"{layer.name}.bias"),
                )
            elif layer.kind == "relu":
                h = ad.relu(h, tape)
            elif layer.kind == "pool":
                h = ad.maxpool2x2(h, tape)
            elif layer.kind == "flatten":
                h = ad.flatten(h, tape)
            if capture is not None:
                if layer.name == capture:
                    captured = h
                    if i + 1 < len(layers) and layers[i + 1].kind == "relu":
                        captured = np.maximum(h, 0)
        if capture is not None:
            if captured is None:
                raise KeyError(f"no layer named {capture!r}")
            return h, captured
        return h

    def activation_pattern(self, params, x: np.ndarray) -> bytes:
        """Packed ReLU signs and pooling winners; constant within one linear piece."""
        parts = []
        h = x
        for layer in self.spec.layers:
            if layer.kind == "conv":
                h = ad.conv2d_forward(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"],
                                      layer.stride, layer.pad)
            elif layer.kind == "linear":
                h = ad.linear_forward(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
            elif layer.kind == "relu":
                parts.append(np.packbits(h > 0).tobytes())
                h = ad.relu(h)
            elif layer.kind == "pool":
                parts.append(ad.pool_argmax(h).astype(np.uint8).tobytes())
                h = ad.maxpool2x2(h)
            elif layer.kind == "flatten":
                h = ad.flatten(h)
        return b"".join(parts)

    def loss(self, params, x: np.ndarray, y: np.ndarray) -> float:
        return ad.softmax_cross_entropy(self.forward(params, x), y)

    def loss_and_grad(self, params, x: np.ndarray, y: np.ndarray) -> Tuple[float, ParamSet]:
        tape = Tape()
        loss = ad.softmax_cross_entropy(self.forward(params, x, tape), y, tape)
        self._emit("backward")
        grads = ad.backward(tape)
        names = params.names() if isinstance(params, ParamSet) else list(params)
        return loss, ParamSet({n: grads[n] for n in names})

    def predict(self, params, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        preds = [self.forward(params, x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


@dataclass
class NeuronNormProfile:
    layer: str
    norms: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.norms)


def neuron_weight_norms(params: ParamSet, layer: str) -> NeuronNormProfile:
    """L2 norm of each output unit's incoming weights (bias excluded)."""
    key = f"{layer}.weight"
    if key not in params:
        raise KeyError(f"no conv/linear layer named {layer!r}")
    w = params[key].astype(np.float64)
    return NeuronNormProfile(layer, np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1)))


# -- checkpoints ---------------------------------------------------------------


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ParamSet
    spec_digest: str
    lineage: dict


def checkpoint_bytes(params: ParamSet, spec: ModelSpec, lineage: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(bytes.fromhex(spec.digest()))
    meta = json.dumps(lineage or {}, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(params)))
    for name, v in params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", v.ndim))
        buf.write(struct.pack(f"<{v.ndim}I", *v.shape))
        buf.write(v.astype("<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(params: ParamSet, path, spec: ModelSpec, lineage: Optional[dict] = None) -> str:
    """Write a checkpoint; returns the sha256 of the file bytes."""
    data = checkpoint_bytes(params, spec, lineage)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes, not an FTSM checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    spec_digest = r.take(32).hex()
    (meta_len,) = r.unpack("<I")
    try:
        lineage = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable lineage block") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(DTYPE).reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return Checkpoint(ParamSet(tensors), spec_digest, lineage)


def load_checkpoint(path, spec: Optional[ModelSpec] = None) -> ParamSet:
    ckpt = read_checkpoint(path)
    if spec is not None:
        if ckpt.spec_digest != spec.digest():
            raise DigestMismatchError(
                f"{path}: checkpoint was written for a different model spec "
                f"({ckpt.spec_digest[:12]} != {spec.digest()[:12]})"
            )
        expected = {f"{n}.{k}": s for n, (ws, _) in spec.shapes().items() for k, s in (("weight", ws), ("bias", ws[:1]))}
        got = {n: tuple(v.shape) for n, v in ckpt.params.items()}
        if got != expected:
            raise DigestMismatchError(f"{path}: tensor table does not match {spec.name}")
    return ckpt.params
