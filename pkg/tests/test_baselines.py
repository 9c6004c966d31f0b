"""
BI baseline and the single-basis DCNN variant
"""
import torch

from fmnet.models import NetworkConfig
from fmnet.networks.baselines import bi_baseline, dcnn_variant_config, kernels_for
from fmnet.networks.network import build_network, count_parameters, spectral_upsample


def test_bi_matches_spectral_upsampling_bitwise():
    rgb = torch.rand(3, 9, 9, generator=torch.Generator().manual_seed(0))
    assert torch.equal(bi_baseline(rgb, 31), spectral_upsample(rgb, 31))


def test_bi_of_constant_rgb_is_constant():
    out = bi_baseline(torch.full((3, 5, 5), 0.25), 8)
    assert torch.equal(out, torch.full((8, 5, 5), 0.25))


def test_dcnn_variant_has_one_basis_and_no_mixing():
    config = dcnn_variant_config()
    assert config.n == 1
    assert config.kernels == [3]
    assert not config.mix_enabled
    default = NetworkConfig()
    assert (config.p, config.m, config.c, config.bands) == (default.p, default.m, default.c, default.bands)


def test_dcnn_variant_keeps_base_topology():
    config = dcnn_variant_config(NetworkConfig(p=2, c=8, bands=6, fusion_enabled=False))
    assert (config.p, config.c, config.bands, config.fusion_enabled) == (2, 8, 6, False)


def test_dcnn_parameter_count_matches_a_hand_counted_stack():
    config = dcnn_variant_config()
    net = build_network(config, seed=0)

    def conv(i, o):
        return i * o * 9 + o

    c, b, m = 64, 31, 2
    block = lambda i, o: conv(i, c) + conv(c, c) * (m - 1) + conv(c, o)
    expected = conv(b, c) + 2 * block(c, c) + block(2 * c, c) + block(c, b)
    assert count_parameters(net) == expected
    assert count_parameters(net) <= 2 * expected


def test_kernel_rule():
    assert kernels_for(1) == [3]
    assert kernels_for(3) == [3, 7, 11]
    assert kernels_for(4) == [3, 5, 7, 9]
