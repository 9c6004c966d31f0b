"""
Conv blocks, basis and mixing functions, FM blocks and their gradients
"""
import numpy as np
import pytest
import torch
from torch import nn

from conftest import naive_conv2d, naive_softmax, to_numpy
from fmnet.models import ConvBlockSpec, FmBlockSpec
from fmnet.networks.core_blocks import (
    BasisFunction,
    ConvBlock,
    FMBlock,
    GradientTape,
    MixingFunction,
    basis_function_forward,
    conv_block_forward,
    fm_block_forward,
    initialize_parameters,
    mixing_function_forward,
    parameter_set,
)
from fmnet.utils.errors import ConfigurationError, UsageError


def _random_params(module, seed, scale=0.5):
    generator = torch.Generator().manual_seed(seed)
    return {
        name: torch.randn(p.shape, generator=generator, dtype=torch.float64) * scale
        for name, p in module.named_parameters()
    }


def _block(spec, seed=0):
    block = FMBlock(spec).double()
    initialize_parameters(block, seed)
    return block


# ---------------------------------------------------------------------------
# Conv block
# ---------------------------------------------------------------------------

def test_one_by_one_identity_kernel_returns_input():
    spec = ConvBlockSpec(in_channels=1, out_channels=1, kernel_size=1, apply_relu=False)
    x = torch.randn(1, 5, 5, dtype=torch.float64)
    params = {"conv.weight": torch.ones(1, 1, 1, 1, dtype=torch.float64), "conv.bias": torch.zeros(1, dtype=torch.float64)}
    assert torch.equal(conv_block_forward(x, spec, params), x)


@pytest.mark.parametrize("apply_relu", [False, True])
def test_conv_block_matches_direct_summation(rng, apply_relu):
    spec = ConvBlockSpec(in_channels=4, out_channels=3, kernel_size=3, apply_relu=apply_relu)
    x = rng.standard_normal((4, 5, 5))
    weight = rng.standard_normal((3, 4, 3, 3))
    bias = rng.standard_normal(3)
    params = {"conv.weight": torch.from_numpy(weight), "conv.bias": torch.from_numpy(bias)}

    out = conv_block_forward(torch.from_numpy(x), spec, params).numpy()
    expected = naive_conv2d(x, weight, bias)
    if apply_relu:
        expected = np.maximum(expected, 0.0)
    np.testing.assert_allclose(out, expected, atol=1e-10, rtol=0)


def test_conv_block_output_is_non_negative_with_relu():
    block = ConvBlock(ConvBlockSpec(in_channels=2, out_channels=3, kernel_size=3)).double()
    initialize_parameters(block, 3)
    out = block(torch.randn(2, 2, 6, 6, dtype=torch.float64))
    assert out.min() >= 0
    assert out.shape == (2, 3, 6, 6)


def test_even_kernel_is_rejected():
    with pytest.raises(ValueError):
        ConvBlockSpec(in_channels=1, out_channels=1, kernel_size=4)


def test_channel_mismatch_raises_configuration_error():
    block = ConvBlock(ConvBlockSpec(in_channels=3, out_channels=2, kernel_size=3))
    with pytest.raises(ConfigurationError):
        block(torch.zeros(1, 4, 5, 5))


def test_missing_parameter_is_reported():
    spec = ConvBlockSpec(in_channels=1, out_channels=1, kernel_size=3)
    with pytest.raises(ConfigurationError, match="conv.bias"):
        conv_block_forward(torch.zeros(1, 4, 4), spec, {"conv.weight": torch.zeros(1, 1, 3, 3)})


# ---------------------------------------------------------------------------
# Basis function
# ---------------------------------------------------------------------------

def test_basis_with_one_block_is_a_conv_block():
    basis = BasisFunction(3, 3, 5, m=1).double()
    params = _random_params(basis, 1)
    x = torch.randn(3, 7, 7, dtype=torch.float64)
    spec = ConvBlockSpec(in_channels=3, out_channels=3, kernel_size=5)
    conv_params = {"conv.weight": params["layers.0.conv.weight"], "conv.bias": params["layers.0.conv.bias"]}
    assert torch.equal(basis_function_forward(x, 5, 1, params), conv_block_forward(x, spec, conv_params))


def test_basis_with_zero_parameters_is_zero():
    basis = BasisFunction(2, 2, 3, m=2).double()
    params = {name: torch.zeros_like(p) for name, p in basis.named_parameters()}
    out = basis_function_forward(torch.randn(2, 6, 6, dtype=torch.float64), 3, 2, params)
    assert torch.count_nonzero(out) == 0


def test_basis_with_two_blocks_composes_conv_blocks():
    basis = BasisFunction(3, 3, 3, m=2).double()
    params = _random_params(basis, 2)
    x = torch.randn(3, 6, 6, dtype=torch.float64)
    spec = ConvBlockSpec(in_channels=3, out_channels=3, kernel_size=3)

    first = conv_block_forward(x, spec, {"conv.weight": params["layers.0.conv.weight"], "conv.bias": params["layers.0.conv.bias"]})
    second = conv_block_forward(first, spec, {"conv.weight": params["layers.1.conv.weight"], "conv.bias": params["layers.1.conv.bias"]})
    assert torch.equal(basis_function_forward(x, 3, 2, params), second)


def test_basis_needs_at_least_one_block():
    with pytest.raises(ConfigurationError):
        basis_function_forward(torch.zeros(2, 4, 4), 3, 0, {})


# ---------------------------------------------------------------------------
# Mixing function
# ---------------------------------------------------------------------------

def _mixing_params(c, n, m, project_bias):
    mixing = MixingFunction(c, n, m).double()
    params = _random_params(mixing, 5)
    params["project.conv.weight"] = torch.zeros_like(params["project.conv.weight"])
    params["project.conv.bias"] = torch.tensor(project_bias, dtype=torch.float64)
    return params


def test_equal_logits_give_uniform_weights():
    params = _mixing_params(3, 4, 2, [0.7] * 4)
    weights = mixing_function_forward(torch.randn(3, 5, 5, dtype=torch.float64), 2, 4, params)
    np.testing.assert_allclose(weights.numpy(), 0.25, atol=1e-15)


def test_single_basis_weights_are_one():
    params = _mixing_params(3, 1, 2, [-3.0])
    weights = mixing_function_forward(torch.randn(3, 5, 5, dtype=torch.float64), 2, 1, params)
    assert torch.equal(weights, torch.ones(1, 5, 5, dtype=torch.float64))


def test_softmax_of_two_zero_zero_logits():
    params = _mixing_params(2, 3, 1, [2.0, 0.0, 0.0])
    weights = mixing_function_forward(torch.randn(2, 4, 4, dtype=torch.float64), 1, 3, params)
    np.testing.assert_allclose(weights[:, 1, 2].numpy(), [0.78699, 0.10650, 0.10650], atol=1e-5)


def test_mixing_matches_softmax_oracle(rng):
    mixing = MixingFunction(2, 3, 1).double()
    params = _random_params(mixing, 9)
    x = rng.standard_normal((2, 5, 5))
    p = to_numpy(params)
    logits = naive_conv2d(x, p["project.conv.weight"], p["project.conv.bias"])
    weights = mixing_function_forward(torch.from_numpy(x), 1, 3, params)
    np.testing.assert_allclose(weights.numpy(), naive_softmax(logits), atol=1e-12, rtol=0)


def test_mixing_needs_at_least_one_basis():
    with pytest.raises(ConfigurationError):
        mixing_function_forward(torch.zeros(2, 4, 4), 1, 0, {})


def test_large_logits_do_not_overflow():
    params = _mixing_params(2, 2, 1, [1e4, -1e4])
    weights = mixing_function_forward(torch.randn(2, 3, 3, dtype=torch.float64), 1, 2, params)
    assert torch.isfinite(weights).all()
    assert torch.equal(weights[0], torch.ones(3, 3, dtype=torch.float64))


# ---------------------------------------------------------------------------
# FM block
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("vertex", [0, 1, 2])
def test_one_hot_weights_select_one_basis(vertex):
    spec = FmBlockSpec(n=3, m=2, c=3, kernels=[3, 5, 7], out_channels=3)
    block = _block(spec)
    with torch.no_grad():
        block.mixing.project.conv.weight.zero_()
        bias = torch.zeros(3, dtype=torch.float64)
        bias[vertex] = 1000.0
        block.mixing.project.conv.bias.copy_(bias)

    x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    with torch.no_grad():
        out, weights = block(x)
        expected = block.bases[vertex](block.entry(x))
    assert torch.equal(weights[:, vertex], torch.ones(1, 8, 8, dtype=torch.float64))
    assert torch.equal(out, expected)


def test_identical_bases_give_their_common_output():
    spec = FmBlockSpec(n=2, m=2, c=3, kernels=[3, 3], out_channels=3)
    block = _block(spec, seed=4)
    block.bases[1].load_state_dict(block.bases[0].state_dict())
    x = torch.randn(1, 3, 6, 6, dtype=torch.float64)
    with torch.no_grad():
        out, _ = block(x)
        common = block.bases[0](block.entry(x))
    np.testing.assert_allclose(out.numpy(), common.numpy(), atol=1e-12, rtol=0)


def test_fm_block_matches_brute_force_mixture(rng):
    spec = FmBlockSpec(n=2, m=1, c=2, kernels=[3, 5], out_channels=2)
    block = FMBlock(spec).double()
    params = _random_params(block, 11)
    p = to_numpy(params)
    x = rng.standard_normal((2, 4, 4))

    entry = np.maximum(naive_conv2d(x, p["entry.conv.weight"], p["entry.conv.bias"]), 0.0)
    bases = [
        np.maximum(naive_conv2d(entry, p[f"bases.{i}.layers.0.conv.weight"], p[f"bases.{i}.layers.0.conv.bias"]), 0.0)
        for i in range(2)
    ]
    weights = naive_softmax(naive_conv2d(entry, p["mixing.project.conv.weight"], p["mixing.project.conv.bias"]))
    expected = np.zeros_like(bases[0])
    for i in range(2):
        for ch in range(2):
            expected[ch] += bases[i][ch] * weights[i]

    out, w = fm_block_forward(torch.from_numpy(x), spec, params)
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-10, rtol=0)
    np.testing.assert_allclose(w.numpy(), weights, atol=1e-10, rtol=0)


def test_functional_and_module_forward_agree():
    spec = FmBlockSpec(n=3, m=2, c=4, kernels=[3, 7, 11], out_channels=4)
    block = _block(spec, seed=8)
    x = torch.randn(2, 4, 12, 12, dtype=torch.float64)
    with torch.no_grad():
        direct = block(x)
        functional = fm_block_forward(x, spec, parameter_set(block))
    assert torch.equal(direct.features, functional.features)
    assert torch.equal(direct.weights, functional.weights)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_weights_lie_on_the_simplex_and_output_in_the_hull(n):
    generator = np.random.default_rng(n)
    for trial in range(10):
        size = int(generator.integers(1, 17))
        c = int(generator.integers(1, 5))
        spec = FmBlockSpec(n=n, m=int(generator.integers(1, 3)), c=c, kernels=[3] * n, out_channels=c)
        block = _block(spec, seed=trial)
        x = torch.randn(1, c, size, size, dtype=torch.float64)
        with torch.no_grad():
            out, weights = block(x)
            bases = block.basis_outputs(block.entry(x))
        assert weights.min() >= 0
        assert torch.allclose(weights.sum(dim=1), torch.ones(1, size, size, dtype=torch.float64), atol=1e-6)
        assert (out >= bases.min(dim=1).values - 1e-6).all()
        assert (out <= bases.max(dim=1).values + 1e-6).all()
        assert out.shape[-2:] == (size, size)


def test_single_basis_block_is_a_plain_conv_stack():
    spec = FmBlockSpec(n=1, m=2, c=4, kernels=[3], out_channels=4)
    block = FMBlock(spec)
    initialize_parameters(block, 21)
    assert block.mixing is None

    plain = nn.Sequential(
        ConvBlock(ConvBlockSpec(in_channels=4, out_channels=4, kernel_size=3)),
        ConvBlock(ConvBlockSpec(in_channels=4, out_channels=4, kernel_size=3)),
        ConvBlock(ConvBlockSpec(in_channels=4, out_channels=4, kernel_size=3)),
    )
    plain[0].load_state_dict(block.entry.state_dict())
    plain[1].load_state_dict(block.bases[0].layers[0].state_dict())
    plain[2].load_state_dict(block.bases[0].layers[1].state_dict())

    x = torch.randn(2, 4, 9, 9)
    with torch.no_grad():
        out, weights = block(x)
        np.testing.assert_allclose(out.numpy(), plain(x).numpy(), atol=1e-6)
    assert torch.equal(weights, torch.ones_like(weights))


def test_disabled_mixing_uses_constant_weights():
    spec = FmBlockSpec(n=3, m=1, c=2, kernels=[3, 5, 7], out_channels=2)
    block = _block(spec)
    block.mix_enabled = False
    with torch.no_grad():
        _, weights = block(torch.randn(1, 2, 7, 7, dtype=torch.float64))
    assert torch.equal(weights, torch.full_like(weights, 1.0 / 3))


def test_initialization_depends_only_on_seed_and_name():
    spec = FmBlockSpec(n=2, m=1, c=3, kernels=[3, 5], out_channels=3)
    first, second = _block(spec, seed=5), _block(spec, seed=5)
    for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
        assert torch.equal(a, b), name
    assert all(torch.count_nonzero(p) == 0 for name, p in first.named_parameters() if name.endswith("bias"))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def test_backward_before_forward_is_a_usage_error():
    tape = GradientTape(ConvBlock(ConvBlockSpec(in_channels=1, out_channels=1)))
    with pytest.raises(UsageError):
        tape.backward()


def test_backward_twice_is_a_usage_error():
    tape = GradientTape(ConvBlock(ConvBlockSpec(in_channels=1, out_channels=1)))
    tape.forward(torch.randn(1, 1, 4, 4))
    tape.backward()
    with pytest.raises(UsageError):
        tape.backward()


def test_unused_parameters_get_zero_gradient():
    spec = FmBlockSpec(n=2, m=1, c=2, kernels=[3, 5], out_channels=2)
    block = _block(spec)
    block.mix_enabled = False
    tape = GradientTape(block)
    tape.forward(torch.full((1, 2, 5, 5), 0.3, dtype=torch.float64))
    grads = tape.backward()
    for name, grad in grads.parameters.items():
        if name.startswith("mixing."):
            assert torch.count_nonzero(grad) == 0, name


def test_fm_block_gradcheck():
    spec = FmBlockSpec(n=2, m=1, c=2, kernels=[3, 5], out_channels=2)
    block = _block(spec, seed=13)
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda inp: block(inp).features, (x,), eps=1e-6, atol=1e-6)


def test_fm_block_gradients_match_central_differences():
    spec = FmBlockSpec(n=2, m=1, c=2, kernels=[3, 5], out_channels=2)
    block = _block(spec, seed=17)
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    direction = torch.randn(1, 2, 5, 5, dtype=torch.float64)

    def loss_fn(output):
        return (output.features * direction).sum()

    tape = GradientTape(block)
    tape.forward(x)
    analytic = tape.backward(loss_fn).parameters

    step = 1e-5
    with torch.no_grad():
        for name, param in block.named_parameters():
            flat = param.view(-1)
            for index in range(flat.numel()):
                original = flat[index].item()
                flat[index] = original + step
                plus = loss_fn(block(x)).item()
                flat[index] = original - step
                minus = loss_fn(block(x)).item()
                flat[index] = original
                numeric = (plus - minus) / (2 * step)
                value = analytic[name].view(-1)[index].item()
                assert abs(value - numeric) <= 1e-4 * max(abs(value), abs(numeric)) + 1e-8, (name, index)
