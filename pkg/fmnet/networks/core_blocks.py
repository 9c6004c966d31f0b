"""
Function-mixture building blocks
Convolutional block, basis functions, mixing function and the FM block,
functional entry points over explicit parameter sets, and a gradient tape
"""
import math
import zlib
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from fmnet.models import ConvBlockSpec, FmBlockSpec
from fmnet.utils.errors import ConfigurationError, UsageError

# Hierarchical name -> array, the naming of nn.Module.named_parameters()
ParameterSet = Dict[str, torch.Tensor]

MIX_KERNEL = 3
ENTRY_KERNEL = 3


class FmBlockOutput(NamedTuple):
    features: torch.Tensor
    weights: torch.Tensor


class Gradients(NamedTuple):
    loss: torch.Tensor
    parameters: Dict[str, torch.Tensor]
    inputs: Tuple[torch.Tensor, ...]


def _check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() != 4:
        raise ConfigurationError(f"{what}: expected N×C×H×W tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ConfigurationError(f"{what}: has {x.shape[1]} channels, expected {expected}")


class ConvBlock(nn.Module):
    """Convolution with zero same-padding, stride 1 and bias, optionally followed by ReLU"""

    def __init__(self, spec: ConvBlockSpec):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv2d(
            spec.in_channels, spec.out_channels, spec.kernel_size,
            stride=1, padding=spec.kernel_size // 2, bias=True,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.spec.in_channels, "conv block input")
        y = self.conv(x)
        return F.relu(y) if self.spec.apply_relu else y


class BasisFunction(nn.Module):
    """m conv blocks sharing one kernel size; the last one maps to out_channels"""

    def __init__(self, c: int, out_channels: int, kernel_size: int, m: int, output_relu: bool = True):
        super().__init__()
        if m < 1:
            raise ConfigurationError(f"basis function needs m >= 1, got m={m}")
        layers = [ConvBlock(ConvBlockSpec(in_channels=c, out_channels=c, kernel_size=kernel_size)) for _ in range(m - 1)]
        layers.append(ConvBlock(ConvBlockSpec(
            in_channels=c, out_channels=out_channels, kernel_size=kernel_size, apply_relu=output_relu,
        )))
        self.kernel_size = kernel_size
        self.layers = nn.Sequential(*layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.layers(features)


class MixingFunction(nn.Module):
    """m-1 ReLU conv blocks, a linear projection to n logits, then per-pixel softmax"""

    def __init__(self, c: int, n: int, m: int):
        super().__init__()
        if n < 1:
            raise ConfigurationError(f"mixing function needs n >= 1, got n={n}")
        if m < 1:
            raise ConfigurationError(f"mixing function needs m >= 1, got m={m}")
        self.n = n
        self.hidden = nn.Sequential(*[
            ConvBlock(ConvBlockSpec(in_channels=c, out_channels=c, kernel_size=MIX_KERNEL)) for _ in range(m - 1)
        ])
        # No ReLU in front of the softmax: negative logits must survive
        self.project = ConvBlock(ConvBlockSpec(in_channels=c, out_channels=n, kernel_size=MIX_KERNEL, apply_relu=False))

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.project(self.hidden(features))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        # torch.softmax subtracts the per-pixel max before exponentiating
        return torch.softmax(self.logits(features), dim=1)


class FMBlock(nn.Module):
    """
    Function-mixture block: entry conv G, n basis subnets f_i and a mixing
    subnet w; output = sum_i f_i(G(x)) * w(G(x))[i], each weight plane
    broadcast over all output channels
    """

    def __init__(self, spec: FmBlockSpec):
        super().__init__()
        self.spec = spec
        self.mix_enabled = True
        self.entry = ConvBlock(ConvBlockSpec(in_channels=spec.in_channels, out_channels=spec.c, kernel_size=ENTRY_KERNEL))
        self.bases = nn.ModuleList([
            BasisFunction(spec.c, spec.out_channels, k, spec.m, output_relu=spec.output_relu) for k in spec.kernels
        ])
        # The softmax of a single logit is identically 1
        self.mixing = MixingFunction(spec.c, spec.n, spec.m) if spec.n > 1 else None

    @property
    def n(self) -> int:
        return self.spec.n

    def mixing_weights(self, features: torch.Tensor) -> torch.Tensor:
        batch, _, height, width = features.shape
        if self.mixing is None or not self.mix_enabled:
            return features.new_full((batch, self.n, height, width), 1.0 / self.n)
        return self.mixing(features)

    def basis_outputs(self, features: torch.Tensor) -> torch.Tensor:
        """N×n×C×H×W stack of every basis output"""
        return torch.stack([basis(features) for basis in self.bases], dim=1)

    def forward(self, x: torch.Tensor) -> FmBlockOutput:
        features = self.entry(x)
        outputs = self.basis_outputs(features)
        weights = self.mixing_weights(features)
        mixed = (outputs * weights.unsqueeze(2)).sum(dim=1)
        return FmBlockOutput(mixed, weights)


def _param_seed(seed: int, name: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(name.encode("utf-8"))) % (2 ** 63)


def initialize_parameters(module: nn.Module, seed: int, prefix: str = "") -> None:
    """
    He-normal kernels (variance 2/fan-in) and zero biases. Every array is
    drawn from its own generator seeded by (seed, name), so a parameter's
    initial value does not depend on which other modules exist. prefix
    names a submodule by its path inside the full network.
    """
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
                continue
            fan_in = param[0].numel()
            generator = torch.Generator().manual_seed(_param_seed(seed, prefix + name))
            draw = torch.randn(param.shape, generator=generator, dtype=torch.float64)
            param.copy_(draw * math.sqrt(2.0 / fan_in))


def _bind(module: nn.Module, params: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    expected = dict(module.named_parameters())
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ConfigurationError(f"parameter set is missing {', '.join(missing)}")
    unexpected = sorted(set(params) - set(expected))
    if unexpected:
        raise ConfigurationError(f"parameter set has unexpected {', '.join(unexpected)}")
    for name, template in expected.items():
        if tuple(params[name].shape) != tuple(template.shape):
            raise ConfigurationError(
                f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {tuple(template.shape)}"
            )
    return dict(params)


def _functional(module_factory: Callable[[], nn.Module], params: Mapping[str, torch.Tensor], x: torch.Tensor):
    # The template only supplies structure; its own weights are never used
    with torch.device("meta"):
        module = module_factory()
    single = x.dim() == 3
    batch = x.unsqueeze(0) if single else x
    result = functional_call(module, _bind(module, params), (batch,))
    if not single:
        return result
    if isinstance(result, tuple):
        return type(result)(*(part.squeeze(0) for part in result))
    return result.squeeze(0)


def conv_block_forward(input: torch.Tensor, spec: ConvBlockSpec, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """One conv block; params keyed 'conv.weight' and 'conv.bias'"""
    return _functional(lambda: ConvBlock(spec), params, input)


def basis_function_forward(
    features: torch.Tensor,
    kernel: int,
    m: int,
    params: Mapping[str, torch.Tensor],
    out_channels: Optional[int] = None,
    output_relu: bool = True,
) -> torch.Tensor:
    """m conv blocks of one kernel size; params keyed 'layers.<i>.conv.*'"""
    if m < 1:
        raise ConfigurationError(f"basis function needs m >= 1, got m={m}")
    c = features.shape[-3]
    return _functional(lambda: BasisFunction(c, out_channels or c, kernel, m, output_relu), params, features)


def mixing_function_forward(features: torch.Tensor, m: int, n: int, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Per-pixel simplex weights n×H×W; params keyed 'hidden.<i>.conv.*' and 'project.conv.*'"""
    if n < 1:
        raise ConfigurationError(f"mixing function needs n >= 1, got n={n}")
    c = features.shape[-3]
    return _functional(lambda: MixingFunction(c, n, m), params, features)


def fm_block_forward(
    x: torch.Tensor, spec: FmBlockSpec, params: Mapping[str, torch.Tensor], mix_enabled: bool = True
) -> FmBlockOutput:
    """FM block forward over an explicit parameter set"""

    def factory():
        block = FMBlock(spec)
        block.mix_enabled = mix_enabled
        return block

    return _functional(factory, params, x)


def parameter_set(module: nn.Module) -> ParameterSet:
    """Detached copy of every named parameter"""
    return {name: param.detach().clone() for name, param in module.named_parameters()}


class GradientTape:
    """
    Records one forward pass of a module and returns gradients of a scalar
    loss for every named parameter and every input
    """

    def __init__(self, module: nn.Module):
        self.module = module
        self._inputs: Optional[Tuple[torch.Tensor, ...]] = None
        self._output = None

    def forward(self, *inputs: torch.Tensor):
        self._inputs = tuple(t.detach().clone().requires_grad_(True) for t in inputs)
        self._output = self.module(*self._inputs)
        return self._output

    def backward(self, loss_fn: Optional[Callable] = None) -> Gradients:
        if self._output is None:
            raise UsageError("backward called before forward (or twice for one forward pass)")
        output, self._output = self._output, None

        if loss_fn is not None:
            loss = loss_fn(output)
        else:
            primary = output[0] if isinstance(output, tuple) else output
            loss = primary.sum()

        named = [(name, p) for name, p in self.module.named_parameters() if p.requires_grad]
        targets: List[torch.Tensor] = [p for _, p in named] + list(self._inputs)
        grads = torch.autograd.grad(loss, targets, allow_unused=True)
        grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, targets)]

        return Gradients(
            loss=loss.detach(),
            parameters={name: g for (name, _), g in zip(named, grads[: len(named)])},
            inputs=tuple(grads[len(named):]),
        )

