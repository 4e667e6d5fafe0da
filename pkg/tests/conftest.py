import numpy as np
import pytest

from thinner.graph import ModelGraph
from thinner.model_io import _Builder, build_resnet50, build_vgg16, generate_synthetic

FIXTURE_SHAPE = (3, 12, 12)
FIXTURE_CLASSES = 4
FIXTURE_SEED = 11


def make_toy_net(classes=FIXTURE_CLASSES, seed=0, widths=(12, 16, 16), shape=FIXTURE_SHAPE):
    """3-conv classifier used throughout: conv/relu/pool x2, conv/relu, gap, fc."""
    b = _Builder(shape, classes, seed)
    b.conv("conv1", shape[0], widths[0], 3, pad=1)
    b.relu("relu1")
    b.pool("pool1", 2, 2)
    b.conv("conv2", widths[0], widths[1], 3, pad=1)
    b.relu("relu2")
    b.pool("pool2", 2, 2)
    b.conv("conv3", widths[1], widths[2], 3, pad=1)
    b.relu("relu3")
    b.gap("gap")
    b.fc("fc", widths[2], classes)
    return b.build()


def make_two_conv_net(cin=3, mid=8, seed=0, hw=8, classes=None, k=3):
    """Minimal conv->relu->conv chain with one pruning site."""
    classes = classes or mid
    b = _Builder((cin, hw, hw), classes, seed)
    b.conv("conv_a", cin, mid, k, pad=k // 2)
    b.relu("relu_a")
    b.conv("conv_b", mid, classes, k, pad=k // 2)
    return b.build()


def make_residual_net(cin=3, width=8, seed=0, hw=8, classes=4):
    """One bottleneck-style block (3 convs + projection shortcut) + head."""
    b = _Builder((cin, hw, hw), classes, seed)
    b.conv("stem", cin, width, 3, pad=1)
    b.relu("stem_relu")
    entry = b.last
    b.conv("blk_conv1", width, width, 1, src=entry)
    b.bn("blk_bn1", width)
    b.relu("blk_relu1")
    b.conv("blk_conv2", width, width, 3, pad=1)
    b.bn("blk_bn2", width)
    b.relu("blk_relu2")
    b.conv("blk_conv3", width, width * 2, 1)
    main = b.bn("blk_bn3", width * 2)
    b.conv("blk_proj", width, width * 2, 1, src=entry, tags=("projection",))
    shortcut = b.bn("blk_projbn", width * 2)
    b.add_junction("blk_add", main, shortcut)
    b.relu("blk_relu")
    b.gap("gap")
    b.fc("fc", width * 2, classes)
    return b.build()


def to_float64(model: ModelGraph) -> ModelGraph:
    """Float64 twin of a model, for tight finite-difference checks."""
    blobs = {
        lid: {name: arr.astype(np.float64) for name, arr in entry.items()}
        for lid, entry in model.blobs.items()
    }
    return ModelGraph(list(model.layers), blobs, model.input_shape, model.class_count)


def randomize_params(model: ModelGraph, seed) -> ModelGraph:
    """Float64 twin with every blob resampled, biases and shifts included.

    Zero biases and shifts make cascaded exact-zero activations likely,
    which parks ReLUs on their kink and breaks finite-difference checks.
    """
    rng = np.random.default_rng(seed)
    blobs = {}
    for lid, entry in model.blobs.items():
        blobs[lid] = {}
        for name, arr in entry.items():
            fan_in = int(np.prod(arr.shape[1:])) if arr.ndim > 1 else 1
            std = 1.0 / np.sqrt(fan_in) if arr.ndim > 1 else 0.3
            blobs[lid][name] = std * rng.standard_normal(arr.shape)
    return ModelGraph(list(model.layers), blobs, model.input_shape, model.class_count)


@pytest.fixture(scope="session")
def fixture_dataset():
    return generate_synthetic(FIXTURE_CLASSES, 50, FIXTURE_SHAPE, seed=FIXTURE_SEED)


@pytest.fixture(scope="session")
def trained_fixture(fixture_dataset):
    """The 4-class baseline: toy net trained to high accuracy."""
    from thinner.finetune import TrainConfig, evaluate, train

    net = make_toy_net(seed=0)
    model, history = train(
        net,
        fixture_dataset,
        TrainConfig(epochs=30, lr=1e-2, batch_size=32, momentum=0.9, weight_decay=1e-4, seed=5),
    )
    accuracy, _ = evaluate(model, fixture_dataset)
    assert accuracy >= 0.95, f"fixture baseline only reached {accuracy:.3f}"
    return model


@pytest.fixture(scope="session")
def vgg16_full():
    return build_vgg16(1000, seed=0)


@pytest.fixture(scope="session")
def resnet50_full():
    return build_resnet50(1000, seed=0)
