"""
Tests for the deraining network, ablation modes and padding.
"""

import numpy as np
import pytest

from guidederain.data import make_pair
from guidederain.gradcheck import gradient_check
from guidederain.loss import LossWeights, compute_losses
from guidederain.network import (
    AblationMode,
    ContractError,
    DerainNetwork,
    ModelConfig,
    crop_back,
    model_forward,
    pad_to_valid,
)
from guidederain.tensor import InvalidArgumentError, Tensor, l1_loss


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def image(shape, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, shape).astype(np.float32))


def tiny(topology="m4", **kwargs):
    """Depth-1, 4-channel network for fast tests."""
    ablation = AblationMode(
        topology=topology,
        no_dilated_streams=kwargs.pop("no_dilated_streams", False),
        no_physical_loss=kwargs.pop("no_physical_loss", False),
    )
    values = dict(base_channels=4, encoder_depth=1, msrb_per_level=1)
    values.update(kwargs)
    return DerainNetwork(ModelConfig(ablation=ablation, **values))


class TestAblationMode:
    @pytest.mark.parametrize("topology,rain,free,guide", [
        ("m1", True, False, False),
        ("m2", False, True, False),
        ("m3", False, True, True),
        ("m4", True, True, True),
    ])
    def test_sub_networks(self, topology, rain, free, guide):
        mode = AblationMode(topology)
        assert (mode.has_rain_net, mode.has_free_net, mode.has_guide) == (rain, free, guide)

    def test_guide_channels(self):
        assert AblationMode("m4").guide_in_channels == 6
        assert AblationMode("m3").guide_in_channels == 3
        with pytest.raises(ContractError):
            AblationMode("m2").guide_in_channels

    def test_topology_is_case_insensitive(self):
        assert AblationMode("M4").topology == "m4"

    def test_unknown_topology(self):
        with pytest.raises(InvalidArgumentError):
            AblationMode("m5")

    def test_labels(self):
        assert AblationMode("m4").label == "M4"
        assert AblationMode("m4", no_dilated_streams=True).label == "R1"
        assert AblationMode("m4", no_physical_loss=True).label == "R2"
        assert AblationMode("m2", no_physical_loss=True).label == "M2+no-physical-loss"


class TestModelConfig:
    def test_spatial_multiple(self):
        assert ModelConfig().spatial_multiple == 16
        assert ModelConfig(use_multiscale=False).spatial_multiple == 4
        assert ModelConfig(encoder_depth=1).spatial_multiple == 4

    def test_dict_round_trip(self):
        config = ModelConfig(base_channels=8, pooling="max", ablation=AblationMode("m3", no_physical_loss=True))
        assert ModelConfig.from_dict(config.to_dict()) == config

    def test_invalid_depth(self):
        with pytest.raises(InvalidArgumentError):
            ModelConfig(encoder_depth=0)


class TestPadding:
    def test_valid_size_untouched(self):
        x = image((1, 3, 16, 32))
        padded, record = pad_to_valid(x, 16)
        assert padded is x
        assert crop_back(padded, record) is x

    def test_odd_size_padded_to_multiple(self):
        x = image((1, 3, 33, 47))
        padded, record = pad_to_valid(x, 16)
        assert padded.shape == (1, 3, 48, 48)
        assert np.array_equal(padded.data[:, :, :33, :47], x.data)
        assert np.array_equal(crop_back(padded, record).data, x.data)


class TestSubnet:
    def test_output_shape_default_architecture(self):
        network = DerainNetwork(ModelConfig(base_channels=8))
        params = network.init_params(seed=0).constants()
        out = network.subnet_forward(image((1, 3, 32, 32)), params, "free")
        assert out.shape == (1, 3, 32, 32)

    def test_zero_tail_gives_zero_output(self):
        network = DerainNetwork(ModelConfig(base_channels=4, encoder_depth=2))
        store = network.init_params(seed=1)
        store.zero("rain.tail")
        out = network.subnet_forward(image((1, 3, 8, 8)), store.constants(), "rain")
        assert np.all(out.data == 0)

    def test_wrong_channel_count(self):
        network = tiny()
        with pytest.raises(InvalidArgumentError, match="image tensor"):
            network.forward(Tensor(np.zeros((1, 4, 8, 8))), network.init_params(0).constants())

    def test_invalid_size_asks_for_padding(self):
        network = tiny()
        with pytest.raises(InvalidArgumentError, match="pad_to_valid"):
            network.forward(image((1, 3, 6, 8)), network.init_params(0).constants())

    def test_two_level_gradient_check(self):
        network = DerainNetwork(ModelConfig(base_channels=2, encoder_depth=2, ablation=AblationMode("m2")))
        store = network.init_params(seed=2, dtype=np.float64)
        o = Tensor(np.random.default_rng(3).uniform(0, 1, (1, 3, 8, 8)))
        target = Tensor(rand((1, 3, 8, 8), 4) * 5)

        def fn(t):
            return l1_loss(network.subnet_forward(o, t, "free"), target)

        result = gradient_check(fn, dict(store.items()), limit=16)
        assert result.passed(1e-4), result


class TestForward:
    def test_m1_zero_rain_head_is_identity(self):
        network = tiny("m1")
        store = network.init_params(seed=0)
        store.zero("rain.tail")
        o = image((1, 3, 8, 8))
        outputs = network.forward(o, store.constants())
        assert np.array_equal(outputs.final.data, o.data)
        assert outputs.free_hat is None and outputs.guide_hat is None

    def test_m2_outputs(self):
        network = tiny("m2")
        outputs = network.forward(image((1, 3, 8, 8)), network.init_params(0).constants())
        assert outputs.rain_hat is None and outputs.guide_hat is None
        assert outputs.final is outputs.free_hat

    def test_m4_produces_all_outputs(self):
        network = tiny("m4")
        o = image((2, 3, 8, 8))
        outputs = network.forward(o, network.init_params(0).constants())
        assert set(outputs.present()) == {"rain_hat", "free_hat", "guide_hat", "final"}
        for t in outputs.present().values():
            assert t.shape == o.shape
        assert outputs.final is outputs.guide_hat

    def test_guide_input_channels(self):
        o = image((1, 3, 8, 8))
        m4, m3 = tiny("m4"), tiny("m3")
        rain = Tensor(np.zeros(o.shape))
        assert m4.guide_input(rain, o).shape[1] == 6
        assert m3.guide_input(None, o).shape[1] == 3

    def test_guide_absent_in_m2(self):
        network = tiny("m2")
        with pytest.raises(ContractError):
            network.guide_forward(None, image((1, 3, 8, 8)), network.init_params(0).constants())

    def test_zero_guide_tail_gives_zero_output(self):
        network = tiny("m4")
        store = network.init_params(seed=0)
        store.zero("guide.tail")
        outputs = network.forward(image((1, 3, 8, 8)), store.constants())
        assert np.all(outputs.guide_hat.data == 0)

    def test_r1_and_r3_shapes_agree(self):
        o = image((1, 3, 8, 8))
        r1 = tiny("m4", no_dilated_streams=True)
        r3 = tiny("m4")
        out1 = r1.forward(o, r1.init_params(0).constants())
        out3 = r3.forward(o, r3.init_params(0).constants())
        assert out1.final.shape == out3.final.shape
        assert "guide.streams.stream_d2.weight" not in r1.init_params(0)
        assert "guide.streams.stream_d2.weight" in r3.init_params(0)

    @pytest.mark.parametrize("topology", ["m1", "m2", "m3", "m4"])
    @pytest.mark.parametrize("size", [(4, 4), (8, 12), (16, 8)])
    def test_shape_preserved_in_every_mode(self, topology, size):
        network = tiny(topology)
        o = image((1, 3) + size)
        outputs = network.forward(o, network.init_params(0).constants())
        assert all(t.shape == o.shape for t in outputs.present().values())

    def test_parameter_counts_ordered(self):
        counts = {t: tiny(t).parameter_count() for t in ("m2", "m3", "m4")}
        assert counts["m4"] > counts["m3"] > counts["m2"]

    def test_initialization_is_deterministic(self):
        a = tiny().init_params(seed=5)
        b = tiny().init_params(seed=5)
        assert a.names() == b.names()
        assert all(np.array_equal(a[n], b[n]) for n in a)
        c = tiny().init_params(seed=6)
        assert not np.array_equal(a["rain.head.weight"], c["rain.head.weight"])

    def test_forward_is_deterministic(self):
        network = tiny()
        params = network.init_params(3).constants()
        o = image((1, 3, 8, 8))
        assert np.array_equal(network.forward(o, params).final.data, network.forward(o, params).final.data)

    def test_model_forward_matches_method(self):
        network = tiny()
        params = network.init_params(0).constants()
        o = image((1, 3, 4, 4))
        assert np.array_equal(
            model_forward(o, params, network.config).final.data,
            network.forward(o, params).final.data,
        )

    def test_infer_restores_odd_size(self):
        network = DerainNetwork(ModelConfig(base_channels=4, encoder_depth=3))
        o = image((1, 3, 33, 47))
        outputs = network.infer(o, network.init_params(0))
        for t in outputs.present().values():
            assert t.shape == (1, 3, 33, 47)


@pytest.mark.parametrize("seed", [9, 11, 13, 15, 17])
def test_full_miniature_model_gradient_check(seed):
    """Subnets, MSRB, guide head and the weighted total loss, end to end."""
    network = DerainNetwork(ModelConfig(base_channels=2, encoder_depth=1))
    store = network.init_params(seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    b = rng.uniform(0, 1, (1, 3, 4, 4))
    o = np.clip(b + rng.uniform(0, 0.5, b.shape), 0, 1)
    pair = make_pair(o, b)
    pair.o, pair.b, pair.r = (Tensor(t.data.astype(np.float64)) for t in (pair.o, pair.b, pair.r))
    weights = LossWeights()

    def fn(t):
        outputs = network.forward(pair.o, t)
        return compute_losses(outputs, pair, weights, network.mode).total_tensor

    result = gradient_check(fn, dict(store.items()), seed=seed, limit=12)
    assert result.passed(1e-4), result
