import numpy as np
import pytest

from thinner import sampling
from thinner.errors import SamplingError, SelectionError, SiteError
from thinner.graph import forward
from thinner.model_io import _Builder, generate_synthetic
from thinner.sampling import SampleSet, collect_samples, find_site, prunable_sites, reconstruction_error

from conftest import make_residual_net, make_toy_net, make_two_conv_net


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(3, 10, (3, 8, 8), seed=2)


def hand_samples():
    return SampleSet(
        responses=np.array([[1.0, 2.0, 3.0], [0.0, 1.0, 1.0]]),
        targets=np.array([6.0, 2.0]),
        site=sampling.PruneSite("a", "b"),
        seed=0,
    )


class TestFindSite:
    def test_vgg_style_path_through_pool(self):
        net = make_toy_net()
        site = find_site(net, "conv1")
        assert site.next_layer == "conv2"
        assert site.path == ("relu1", "pool1")
        assert site.window_source == "pool1"

    def test_residual_paths(self):
        net = make_residual_net()
        site = find_site(net, "blk_conv1")
        assert site.next_layer == "blk_conv2"
        assert site.path == ("blk_bn1", "blk_relu1")

    def test_no_downstream_conv(self):
        net = make_toy_net()
        with pytest.raises(SiteError, match="conv3"):
            find_site(net, "conv3")

    def test_fan_out_rejected(self):
        net = make_residual_net()
        with pytest.raises(SiteError, match="consumers"):
            find_site(net, "stem")

    def test_non_conv_rejected(self):
        net = make_toy_net()
        with pytest.raises(SiteError, match="not conv"):
            find_site(net, "relu1")

    def test_prunable_sites_skips_projection_and_tails(self):
        net = make_residual_net()
        layers = [s.layer for s in prunable_sites(net)]
        assert layers == ["blk_conv1", "blk_conv2"]

    def test_prunable_sites_plain_chain(self):
        net = make_toy_net()
        layers = [s.layer for s in prunable_sites(net)]
        assert layers == ["conv1", "conv2"]


class TestCollect:
    def test_zero_kernel_gives_zero_rows(self, small_data):
        net = make_two_conv_net(cin=3, mid=6, seed=1)
        net.blobs["conv_b"]["weights"][:] = 0.0
        net.blobs["conv_b"]["bias"][:] = 0.0
        samples = collect_samples(net, small_data, find_site(net, "conv_a"), images=3,
                                  locations_per_image=5, seed=4)
        assert np.all(samples.responses == 0)
        assert np.all(samples.targets == 0)

    def test_identity_one_by_one_kernel(self, small_data):
        # single 1x1 filter with weight 1 on channel 2: column 2 carries the
        # post-relu activation at each sampled location, all else is zero
        b = _Builder((3, 8, 8), 1, seed=3)
        b.conv("conv_a", 3, 4, 3, pad=1)
        b.relu("relu_a")
        b.conv("conv_b", 4, 1, 1)
        net = b.build()
        net.blobs["conv_b"]["weights"][:] = 0.0
        net.blobs["conv_b"]["weights"][0, 2, 0, 0] = 1.0
        net.blobs["conv_b"]["bias"][0] = 0.25
        site = find_site(net, "conv_a")
        samples = collect_samples(net, small_data, site, images=2, locations_per_image=6, seed=7)
        other = np.delete(samples.responses, 2, axis=1)
        assert np.all(other == 0)
        assert np.abs(samples.responses[:, 2] - samples.targets).max() < 1e-5
        assert np.all(samples.responses[:, 2] >= 0)  # post-relu values

    def test_row_sum_identity(self, small_data):
        net = make_two_conv_net(cin=3, mid=8, seed=6)
        samples = collect_samples(net, small_data, find_site(net, "conv_a"), images=5,
                                  locations_per_image=10, seed=8)
        gap = np.abs(samples.responses.sum(axis=1) - samples.targets)
        assert gap.max() < 1e-4

    def test_row_count(self, small_data):
        net = make_two_conv_net(cin=3, mid=8, seed=6)
        samples = collect_samples(net, small_data, find_site(net, "conv_a"), images=4,
                                  locations_per_image=7, seed=8)
        assert samples.num_rows == 28
        assert samples.num_channels == 8

    def test_deterministic(self, small_data):
        net = make_two_conv_net(cin=3, mid=8, seed=6)
        site = find_site(net, "conv_a")
        a = collect_samples(net, small_data, site, images=5, locations_per_image=5, seed=13)
        b = collect_samples(net, small_data, site, images=5, locations_per_image=5, seed=13)
        assert np.array_equal(a.responses, b.responses)
        assert np.array_equal(a.targets, b.targets)
        c = collect_samples(net, small_data, site, images=5, locations_per_image=5, seed=14)
        assert not np.array_equal(a.responses, c.responses)

    def test_channel_independence(self, small_data):
        # zeroing one filter of the pruned layer zeroes exactly that column
        net = make_two_conv_net(cin=3, mid=8, seed=6)
        site = find_site(net, "conv_a")
        base = collect_samples(net, small_data, site, images=4, locations_per_image=6, seed=5)
        zeroed = net.copy_params()
        zeroed.blobs["conv_a"]["weights"][3] = 0.0
        zeroed.blobs["conv_a"]["bias"][3] = 0.0
        mod = collect_samples(zeroed, small_data, site, images=4, locations_per_image=6, seed=5)
        assert np.all(mod.responses[:, 3] == 0)
        keep = [c for c in range(8) if c != 3]
        assert np.array_equal(mod.responses[:, keep], base.responses[:, keep])

    def test_single_channel_site_rejected(self, small_data):
        b = _Builder((3, 8, 8), 2, seed=0)
        b.conv("conv_a", 3, 1, 3, pad=1)
        b.relu("relu_a")
        b.conv("conv_b", 1, 2, 3, pad=1)
        net = b.build()
        with pytest.raises(SamplingError, match="single input channel"):
            collect_samples(net, small_data, find_site(net, "conv_a"))

    def test_too_few_images(self, small_data):
        net = make_two_conv_net(cin=3, mid=8, seed=6)
        with pytest.raises(SamplingError, match="images"):
            collect_samples(net, small_data, find_site(net, "conv_a"), images=31)

    def test_too_many_locations(self, small_data):
        net = make_two_conv_net(cin=3, mid=4, seed=6, classes=2, hw=8)
        with pytest.raises(SamplingError, match="locations"):
            collect_samples(net, small_data, find_site(net, "conv_a"), images=1,
                            locations_per_image=2 * 8 * 8 + 1)

    def test_pooled_window_site(self, small_data):
        # window comes from the pooled activation when a pool is on the path
        net = make_toy_net(seed=2, shape=(3, 8, 8))
        site = find_site(net, "conv1")
        samples = collect_samples(net, small_data, site, images=3, locations_per_image=8, seed=1)
        assert np.abs(samples.responses.sum(axis=1) - samples.targets).max() < 1e-4


class TestReconstructionError:
    def test_keep_all_is_zero(self, small_data):
        net = make_two_conv_net(cin=3, mid=8, seed=6)
        samples = collect_samples(net, small_data, find_site(net, "conv_a"), images=5,
                                  locations_per_image=10, seed=8)
        err = reconstruction_error(samples, range(8))
        assert err < 1e-6 * max(1.0, float(np.sum(samples.targets**2)))

    def test_empty_keep(self):
        samples = hand_samples()
        assert reconstruction_error(samples, []) == pytest.approx(36.0 + 4.0)

    def test_hand_example(self):
        samples = hand_samples()
        # keep channels {0, 2}: (6 - 4)^2 + (2 - 1)^2 = 5
        assert reconstruction_error(samples, [0, 2]) == pytest.approx(5.0)

    def test_weighted(self):
        samples = hand_samples()
        err = reconstruction_error(samples, [0, 2], weights=[2.0, 1.0])
        assert err == pytest.approx((6 - 5.0) ** 2 + (2 - 1.0) ** 2)

    def test_bad_weights_length(self):
        with pytest.raises(SelectionError, match="weights"):
            reconstruction_error(hand_samples(), [0, 2], weights=[1.0])

    def test_out_of_range_channels(self):
        with pytest.raises(SelectionError, match="range"):
            reconstruction_error(hand_samples(), [0, 5])

    def test_duality_on_collected_samples(self, small_data):
        net = make_two_conv_net(cin=3, mid=8, seed=9)
        samples = collect_samples(net, small_data, find_site(net, "conv_a"), images=5,
                                  locations_per_image=10, seed=3)
        rng = np.random.default_rng(0)
        for _ in range(25):
            mask = rng.random(8) < rng.random()
            kept = [i for i in range(8) if mask[i]]
            removed = [i for i in range(8) if not mask[i]]
            lhs = reconstruction_error(samples, kept)
            rhs = float(np.sum(samples.responses[:, removed].sum(axis=1) ** 2)) if removed else 0.0
            assert lhs == pytest.approx(rhs, rel=1e-5, abs=1e-9)


def test_csv_export(tmp_path):
    samples = hand_samples()
    samples.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().strip().splitlines()
    assert lines[0] == "c0,c1,c2,yhat"
    assert len(lines) == 3
    first = [float(v) for v in lines[1].split(",")]
    assert first == [1.0, 2.0, 3.0, 6.0]
