import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thinner import model_io
from thinner.errors import DatasetFormatError, ModelFormatError
from thinner.graph import named_params
from thinner.metrics import count_params

from conftest import make_toy_net, make_two_conv_net


def params_equal(a, b) -> bool:
    pa = {(lid, name): arr for lid, name, arr in named_params(a)}
    pb = {(lid, name): arr for lid, name, arr in named_params(b)}
    if pa.keys() != pb.keys():
        return False
    return all(np.array_equal(pa[k], pb[k]) for k in pa)


class TestModelRoundTrip:
    def test_two_layer_bit_equality(self, tmp_path):
        net = make_two_conv_net(seed=5)
        model_io.save_model(net, tmp_path / "m.json")
        loaded = model_io.load_model(tmp_path / "m.json")
        assert params_equal(net, loaded)
        assert [s.id for s in loaded.layers] == [s.id for s in net.layers]
        assert loaded.input_shape == net.input_shape
        assert loaded.class_count == net.class_count

    def test_specs_survive(self, tmp_path):
        from conftest import make_residual_net

        net = make_residual_net()
        model_io.save_model(net, tmp_path / "m.json")
        loaded = model_io.load_model(tmp_path / "m.json")
        assert loaded.layer("blk_proj").tags == ("projection",)
        assert loaded.layer("blk_add").inputs == net.layer("blk_add").inputs
        assert loaded.layer("blk_conv2").pad == 1

    def test_declared_length_mismatch_names_blob(self, tmp_path):
        net = make_two_conv_net()
        model_io.save_model(net, tmp_path / "m.json")
        manifest = json.loads((tmp_path / "m.json").read_text())
        manifest["blobs"][0]["nbytes"] -= 8  # declare 2 floats fewer than the shape
        (tmp_path / "m.json").write_text(json.dumps(manifest))
        with pytest.raises(ModelFormatError, match=manifest["blobs"][0]["layer"]):
            model_io.load_model(tmp_path / "m.json")

    def test_corrupt_bytes_names_blob(self, tmp_path):
        net = make_two_conv_net()
        model_io.save_model(net, tmp_path / "m.json")
        raw = bytearray((tmp_path / "m.bin").read_bytes())
        raw[4] ^= 0xFF
        (tmp_path / "m.bin").write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError, match="checksum"):
            model_io.load_model(tmp_path / "m.json")

    def test_region_beyond_file(self, tmp_path):
        net = make_two_conv_net()
        model_io.save_model(net, tmp_path / "m.json")
        raw = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "m.bin").write_bytes(raw[:-16])
        with pytest.raises(ModelFormatError, match="beyond"):
            model_io.load_model(tmp_path / "m.json")

    def test_float64_blobs_rejected(self, tmp_path):
        from conftest import to_float64

        net = to_float64(make_two_conv_net())
        with pytest.raises(ModelFormatError, match="float32"):
            model_io.save_model(net, tmp_path / "m.json")

    def test_vgg16_round_trip_param_total(self, tmp_path, vgg16_full):
        model_io.save_model(vgg16_full, tmp_path / "vgg.json")
        loaded = model_io.load_model(tmp_path / "vgg.json")
        assert count_params(loaded).total_params == 138_357_544
        assert np.array_equal(
            loaded.blobs["conv3_2"]["weights"], vgg16_full.blobs["conv3_2"]["weights"]
        )
        assert np.array_equal(loaded.blobs["fc8"]["bias"], vgg16_full.blobs["fc8"]["bias"])


class TestBuilders:
    def test_vgg16_total(self, vgg16_full):
        assert count_params(vgg16_full).total_params == pytest.approx(138.34e6, rel=5e-3)

    def test_resnet50_total(self, resnet50_full):
        assert count_params(resnet50_full).total_params == pytest.approx(25.56e6, rel=5e-3)

    def test_class_count_changes_only_final_layer(self):
        small = model_io.build_vgg16_gap(2, seed=0)
        large = model_io.build_vgg16_gap(1000, seed=0)
        for (lid_a, name_a, arr_a), (lid_b, name_b, arr_b) in zip(
            named_params(small), named_params(large)
        ):
            assert (lid_a, name_a) == (lid_b, name_b)
            if lid_a == "fc":
                assert arr_a.shape != arr_b.shape
            else:
                assert arr_a.shape == arr_b.shape

    def test_vgg16_class_count_param_delta(self):
        # only fc8 differs: 4096*k + k parameters
        small = model_io.build_vgg16(2, seed=1)
        delta = 138_357_544 - count_params(small).total_params
        assert delta == 4096 * 998 + 998

    def test_bad_class_count(self):
        with pytest.raises(ValueError):
            model_io.build_vgg16(1)


class TestDatasets:
    def test_round_trip(self, tmp_path):
        ds = model_io.generate_synthetic(3, 4, (2, 5, 5), seed=9)
        model_io.save_dataset(ds, tmp_path / "d.thds")
        loaded = model_io.load_dataset(tmp_path / "d.thds")
        assert np.array_equal(loaded.images, ds.images)
        assert np.array_equal(loaded.labels, ds.labels)
        assert loaded.class_count == 3

    def test_generate_deterministic(self):
        a = model_io.generate_synthetic(4, 5, (3, 6, 6), seed=42)
        b = model_io.generate_synthetic(4, 5, (3, 6, 6), seed=42)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        c = model_io.generate_synthetic(4, 5, (3, 6, 6), seed=43)
        assert not np.array_equal(a.images, c.images)

    def test_label_out_of_range(self, tmp_path):
        ds = model_io.generate_synthetic(4, 2, (1, 3, 3), seed=0)
        model_io.save_dataset(ds, tmp_path / "d.thds")
        with pytest.raises(DatasetFormatError, match="label"):
            model_io.load_dataset(tmp_path / "d.thds", expected_classes=3)

    def test_truncated_file(self, tmp_path):
        ds = model_io.generate_synthetic(2, 2, (1, 3, 3), seed=1)
        model_io.save_dataset(ds, tmp_path / "d.thds")
        raw = (tmp_path / "d.thds").read_bytes()
        (tmp_path / "d.thds").write_bytes(raw[:-5])
        with pytest.raises(DatasetFormatError, match="bytes"):
            model_io.load_dataset(tmp_path / "d.thds")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "d.thds").write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DatasetFormatError, match="magic"):
            model_io.load_dataset(tmp_path / "d.thds")

    def test_header_layout(self, tmp_path):
        # magic, version, N, C, H, W as little-endian u32
        ds = model_io.generate_synthetic(2, 3, (2, 4, 5), seed=2)
        model_io.save_dataset(ds, tmp_path / "d.thds")
        raw = (tmp_path / "d.thds").read_bytes()
        assert raw[:4] == b"THDS"
        header = np.frombuffer(raw, dtype="<u4", count=5, offset=4)
        assert list(header) == [1, 6, 2, 4, 5]
        assert len(raw) == 24 + 6 * 2 * 4 * 5 * 4 + 6 * 4

    @given(
        n=st.integers(1, 6),
        c=st.integers(1, 3),
        hw=st.integers(1, 4),
        classes=st.integers(2, 5),
        seed=st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=20, deadline=None)
    def test_round_trip_hypothesis(self, tmp_path_factory, n, c, hw, classes, seed):
        rng = np.random.default_rng(seed)
        images = rng.standard_normal((n, c, hw, hw)).astype(np.float32)
        labels = rng.integers(0, classes, size=n)
        ds = model_io.Dataset(images, labels, classes)
        path = tmp_path_factory.mktemp("ds") / "d.thds"
        model_io.save_dataset(ds, path)
        loaded = model_io.load_dataset(path, expected_classes=classes)
        assert np.array_equal(loaded.images, ds.images)
        assert np.array_equal(loaded.labels, ds.labels)


def test_fixture_trains_to_baseline(trained_fixture, fixture_dataset):
    from thinner.finetune import evaluate

    accuracy, loss = evaluate(trained_fixture, fixture_dataset)
    assert accuracy >= 0.95
    assert loss < 1.0
