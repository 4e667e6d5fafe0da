import numpy as np
import pytest

from thinner.errors import GraphError
from thinner.graph import (
    INPUT,
    LayerSpec,
    ModelGraph,
    backward,
    consumers,
    forward,
    infer_shapes,
    validate_model,
)

from conftest import make_residual_net, make_toy_net, make_two_conv_net, randomize_params
from oracles import finite_difference, relative_error


def test_layerspec_validation():
    with pytest.raises(GraphError, match="kind"):
        LayerSpec("x", "dropout", (INPUT,))
    with pytest.raises(GraphError, match="reserved"):
        LayerSpec(INPUT, "relu", (INPUT,))
    with pytest.raises(GraphError, match="inputs"):
        LayerSpec("j", "add_junction", ("a",))
    with pytest.raises(GraphError, match="stride"):
        LayerSpec("c", "conv", (INPUT,))


def test_duplicate_ids_rejected():
    net = make_two_conv_net()
    layers = list(net.layers)
    layers[1] = LayerSpec("conv_a", "relu", ("conv_a",))
    with pytest.raises(GraphError, match="duplicate"):
        validate_model(ModelGraph(layers, net.blobs, net.input_shape, net.class_count))


def test_multiple_outputs_rejected():
    net = make_two_conv_net()
    dangling = LayerSpec("relu_extra", "relu", ("conv_a",))
    bad = ModelGraph(list(net.layers) + [dangling], net.blobs, net.input_shape, net.class_count)
    with pytest.raises(GraphError, match="single output"):
        validate_model(bad)


def test_use_before_definition_rejected():
    net = make_two_conv_net()
    layers = list(reversed(net.layers))
    with pytest.raises(GraphError, match="before"):
        infer_shapes(ModelGraph(layers, net.blobs, net.input_shape, net.class_count))


def test_shape_inference_matches_forward():
    for net in (make_toy_net(), make_two_conv_net(), make_residual_net()):
        shapes = infer_shapes(net)
        x = np.random.default_rng(0).standard_normal((2,) + net.input_shape).astype(np.float32)
        _, captured = forward(net, x, capture=[spec.id for spec in net.layers])
        for spec in net.layers:
            assert captured[spec.id].shape == (2,) + shapes[spec.id], spec.id


def test_forward_input_shape_checked():
    net = make_two_conv_net()
    with pytest.raises(GraphError, match="input"):
        forward(net, np.zeros((1, 4, 8, 8), np.float32))


def test_add_junction_shape_constraint():
    net = make_residual_net()
    # shrink the projection's output channels so the junction mismatches
    blobs = {lid: dict(entry) for lid, entry in net.blobs.items()}
    blobs["blk_proj"] = {
        "weights": blobs["blk_proj"]["weights"][:7],
        "bias": blobs["blk_proj"]["bias"][:7],
    }
    blobs["blk_projbn"] = {
        "scale": blobs["blk_projbn"]["scale"][:7],
        "shift": blobs["blk_projbn"]["shift"][:7],
    }
    broken = ModelGraph(list(net.layers), blobs, net.input_shape, net.class_count)
    with pytest.raises(GraphError, match="blk_add"):
        infer_shapes(broken)


def test_consumers_table():
    net = make_residual_net()
    table = consumers(net)
    assert sorted(table["stem_relu"]) == ["blk_conv1", "blk_proj"]
    assert table["blk_add"] == ["blk_relu"]
    assert table[net.output_id()] == []


def test_forward_deterministic_and_pure():
    net = make_toy_net(seed=3)
    x = np.random.default_rng(1).standard_normal((4,) + net.input_shape).astype(np.float32)
    x0 = x.copy()
    out1, _ = forward(net, x)
    out2, _ = forward(net, x)
    assert np.array_equal(out1, out2)
    assert np.array_equal(x, x0)


def test_transform_hook_applies():
    net = make_two_conv_net()
    x = np.random.default_rng(2).standard_normal((1,) + net.input_shape).astype(np.float32)

    def zero_first_channel(layer_id, arr):
        if layer_id == "relu_a":
            arr = arr.copy()
            arr[:, 0] = 0.0
        return arr

    out_masked, _ = forward(net, x, transform=zero_first_channel)
    out_plain, _ = forward(net, x)
    assert not np.array_equal(out_masked, out_plain)


class TestWholeNetGradients:
    def _check_net(self, net, seed, tol=1e-4):
        net = randomize_params(net, seed + 1)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2,) + net.input_shape)
        out, _ = forward(net, x)
        proj = rng.standard_normal(out.shape)

        def fn():
            y, _ = forward(net, x)
            return float(np.sum(y * proj))

        param_grads, dx = backward(net, x, proj)
        for lid, entry in net.blobs.items():
            for name, arr in entry.items():
                fd = finite_difference(fn, arr)
                err = relative_error(param_grads[lid][name], fd)
                assert err < tol, f"{lid}/{name}: {err}"
        assert relative_error(dx, finite_difference(fn, x)) < tol

    def test_three_layer_toy_net(self):
        self._check_net(make_toy_net(seed=4, widths=(4, 5, 5), shape=(2, 8, 8), classes=3), seed=40)

    def test_residual_net(self):
        self._check_net(make_residual_net(cin=2, width=3, seed=5, hw=4, classes=3), seed=41)


def test_backward_shape_mismatch():
    net = make_two_conv_net()
    x = np.zeros((1,) + net.input_shape, np.float32)
    with pytest.raises(GraphError, match="gradient"):
        backward(net, x, np.zeros((1, 2, 2, 2), np.float32))
