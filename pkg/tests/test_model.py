import numpy as np
import pytest

from ftsam.autodiff import ShapeError
from ftsam.model import (
    CheckpointFormatError,
    CheckpointVersionError,
    DigestMismatchError,
    LayerSpec,
    Model,
    ModelSpec,
    ParamSet,
    build,
    checkpoint_bytes,
    file_digest,
    load_checkpoint,
    neuron_weight_norms,
    read_checkpoint,
    reference_spec,
    save_checkpoint,
)


def test_build_is_deterministic():
    spec = reference_spec("small-cnn")
    assert build(spec, 3).bit_equal(build(spec, 3))
    assert not build(spec, 3).bit_equal(build(spec, 4))


def test_he_init_statistics():
    spec = ModelSpec("wide", (LayerSpec("linear", "fc", 10_000),), (8,), 10_000)
    w = build(spec, 0)["fc.weight"]
    assert w.size >= 10_000
    assert abs(w.std() - 0.5) < 0.1
    assert np.all(build(spec, 0)["fc.bias"] == 0)


def test_reference_shapes_compose():
    shapes = reference_spec("small-cnn", (1, 28, 28), 10).shapes()
    assert shapes["conv2"][1] == (32, 14, 14)
    assert shapes["fc"][1] == (10,)
    assert reference_spec("mlp").shapes()["fc2"][1] == (10,)


def test_bad_composition_rejected():
    with pytest.raises(ShapeError):
        ModelSpec("odd", (LayerSpec("pool", "pool1"), LayerSpec("flatten", "flat"), LayerSpec("linear", "fc", 2)),
                  (1, 5, 5), 2).shapes()
    with pytest.raises(ValueError):
        reference_spec("resnet")


def test_param_order_survives_flatten():
    p = build(reference_spec("small-cnn", (1, 8, 8), 4), 0)
    assert p.with_flat(p.flat()).bit_equal(p)
    assert p.names() == ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc.weight", "fc.bias"]


def test_neuron_norm_examples():
    p = ParamSet({"c.weight": np.ones((1, 1, 3, 3)), "c.bias": np.zeros(1)})
    assert neuron_weight_norms(p, "c").norms[0] == pytest.approx(3.0)
    z = ParamSet({"c.weight": np.zeros((4, 2, 3, 3)), "c.bias": np.ones(4)})
    np.testing.assert_array_equal(neuron_weight_norms(z, "c").norms, 0)


def test_neuron_norms_match_flatten_oracle():
    p = build(reference_spec("small-cnn"), 9)
    prof = neuron_weight_norms(p, "conv2")
    w = p["conv2.weight"].astype(np.float64)
    oracle = [np.sqrt(sum(float(v) ** 2 for v in w[k].ravel())) for k in range(w.shape[0])]
    assert len(prof) == 32
    np.testing.assert_allclose(prof.norms, oracle, atol=1e-6)
    with pytest.raises(KeyError):
        neuron_weight_norms(p, "pool1")


def test_capture_returns_post_relu_activation(small_cnn, rng):
    model, params = small_cnn
    x = rng.standard_normal((3, 1, 8, 8)).astype(np.float32)
    logits, act = model.forward(params, x, capture="conv2")
    assert act.shape == (3, 32, 4, 4)
    assert act.min() >= 0
    np.testing.assert_array_equal(logits, model.forward(params, x))


def test_checkpoint_round_trip(tmp_path):
    spec = reference_spec("small-cnn")
    p = build(spec, 1)
    digest = save_checkpoint(p, tmp_path / "m.ckpt", spec, {"stage": "unit"})
    assert digest == file_digest(tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", spec)
    assert back.bit_equal(p)
    assert back.names() == p.names()
    assert read_checkpoint(tmp_path / "m.ckpt").lineage == {"stage": "unit"}
    assert checkpoint_bytes(p, spec, {"stage": "unit"}) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    spec = reference_spec("mlp")
    path = tmp_path / "m.ckpt"
    save_checkpoint(build(spec, 0), path, spec)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_other_spec(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build(reference_spec("mlp"), 0), path, reference_spec("mlp"))
    with pytest.raises(DigestMismatchError):
        load_checkpoint(path, reference_spec("small-cnn"))


def test_checkpoint_rejects_truncation_and_trailing_bytes(tmp_path):
    spec = reference_spec("mlp")
    path = tmp_path / "m.ckpt"
    save_checkpoint(build(spec, 0), path, spec)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_rejects_future_version(tmp_path):
    spec = reference_spec("mlp")
    path = tmp_path / "m.ckpt"
    save_checkpoint(build(spec, 0), path, spec)
    data = bytearray(path.read_bytes())
    data[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_model_hooks_see_passes(small_cnn, rng):
    model, params = small_cnn
    events = []
    model.hooks.append(events.append)
    model.loss_and_grad(params, rng.standard_normal((2, 1, 8, 8)).astype(np.float32), np.array([0, 1]))
    assert events == ["forward", "backward"]
    assert isinstance(model, Model)
