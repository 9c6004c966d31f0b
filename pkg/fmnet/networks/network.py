"""
Function-mixture network
Spectral upsampling of the RGB input, an entry conv block, stacked FM blocks
with an optional fusion block, and the global residual
"""
import copy
from typing import List, NamedTuple, Sequence, Union

import numpy as np
import structlog
import torch
from torch import nn

from fmnet.models import ConvBlockSpec, NetworkConfig
from fmnet.networks.core_blocks import ConvBlock, FMBlock, initialize_parameters
from fmnet.utils.config import validate_config
from fmnet.utils.errors import ConfigurationError, InputError

logger = structlog.get_logger()

DEFAULT_CHANNEL_ORDER = (2, 1, 0)


class NetworkOutput(NamedTuple):
    hsi: torch.Tensor
    weights: List[torch.Tensor]


def spectral_upsample(
    rgb: Union[torch.Tensor, np.ndarray],
    bands: int,
    channel_order: Sequence[int] = DEFAULT_CHANNEL_ORDER,
) -> torch.Tensor:
    """
    Linear interpolation along the wavelength axis. The reordered channels
    sit at band positions 0, (B-1)/2 and B-1; anchors are reproduced exactly.
    """
    if bands < 1:
        raise InputError(f"bands must be >= 1, got {bands}")
    if sorted(channel_order) != [0, 1, 2]:
        raise InputError(f"channel_order must be a permutation of 0,1,2, got {tuple(channel_order)}")
    rgb = torch.as_tensor(rgb)
    if rgb.dim() not in (3, 4) or rgb.shape[-3] != 3:
        raise InputError(f"expected 3×H×W or N×3×H×W RGB input, got shape {tuple(rgb.shape)}")

    anchors = rgb[..., list(channel_order), :, :]
    mid = (bands - 1) / 2.0
    lower, upper, fraction = [], [], []
    for b in range(bands):
        if b <= mid:
            lower.append(0)
            upper.append(1)
            fraction.append(b / mid if mid > 0 else 0.0)
        else:
            lower.append(1)
            upper.append(2)
            fraction.append((b - mid) / (bands - 1 - mid))

    start = anchors[..., lower, :, :]
    end = anchors[..., upper, :, :]
    weight = torch.tensor(fraction, dtype=rgb.dtype).view(bands, 1, 1)
    # lerp is exact at both endpoints and for equal anchors
    return torch.lerp(start, end, weight.expand_as(start))


class FMNet(nn.Module):
    """
    The spectrally upsampled input plus a correction from the last FM block.
    The last block reads the chained interior blocks, or with fusion enabled
    the fusion block over every interior output, newest first
    """

    def __init__(self, config: NetworkConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        c, bands = config.c, config.bands

        self.entry = ConvBlock(ConvBlockSpec(in_channels=bands, out_channels=c, kernel_size=3))
        interior = [FMBlock(config.block_spec(in_channels=c, out_channels=c)) for _ in range(config.p - 1)]
        head = FMBlock(config.block_spec(in_channels=c, out_channels=bands, output_relu=False))
        self.blocks = nn.ModuleList(interior + [head])
        self.fusion = self._fusion_block() if config.fusion_enabled else None
        self.set_mix_enabled(config.mix_enabled)

    def _fusion_block(self) -> FMBlock:
        c = self.config.c
        return FMBlock(self.config.block_spec(in_channels=(self.config.p - 1) * c, out_channels=c))

    @property
    def fm_blocks(self) -> List[FMBlock]:
        """FM blocks in execution order"""
        blocks = list(self.blocks[:-1])
        if self.fusion is not None:
            blocks.append(self.fusion)
        blocks.append(self.blocks[-1])
        return blocks

    @property
    def block_names(self) -> List[str]:
        names = [f"f{u}" for u in range(1, self.config.p)]
        if self.fusion is not None:
            names.append("fc")
        names.append(f"f{self.config.p}")
        return names

    def set_mix_enabled(self, enabled: bool) -> None:
        for block in self.fm_blocks:
            block.mix_enabled = enabled

    def forward(self, rgb: torch.Tensor) -> NetworkOutput:
        single = rgb.dim() == 3
        batch = rgb.unsqueeze(0) if single else rgb
        largest = max(self.config.kernels)
        if min(batch.shape[-2:]) < largest:
            raise InputError(
                f"input spatial size {tuple(batch.shape[-2:])} is smaller than the largest kernel {largest}"
            )

        x = spectral_upsample(batch, self.config.bands, self.config.channel_order)
        features = self.entry(x)
        weights: List[torch.Tensor] = []
        intermediate: List[torch.Tensor] = []
        for block in self.blocks[:-1]:
            features, w = block(features)
            intermediate.append(features)
            weights.append(w)

        if self.fusion is not None:
            features, w = self.fusion(torch.cat(intermediate[::-1], dim=1))
            weights.append(w)

        correction, w = self.blocks[-1](features)
        weights.append(w)
        hsi = x + correction

        if single:
            return NetworkOutput(hsi.squeeze(0), [w.squeeze(0) for w in weights])
        return NetworkOutput(hsi, weights)


# Network is the public name of the assembled model
Network = FMNet


def build_network(config: NetworkConfig, seed: int = 0) -> FMNet:
    """Construct and deterministically initialize the network"""
    config = validate_config(NetworkConfig, config.model_dump())
    net = FMNet(config, seed=seed)
    initialize_parameters(net, seed)
    logger.debug("Built network", p=config.p, n=config.n, m=config.m, c=config.c,
                 bands=config.bands, fusion=config.fusion_enabled, parameters=count_parameters(net))
    return net


def set_ablation(net: FMNet, mix_enabled: bool, fusion_enabled: bool) -> FMNet:
    """
    Copy of net with the pixel-wise mixture and/or feature fusion toggled.
    Without mix every block mixes with constant 1/n weights; without fusion
    the skips and F_c are removed. Re-enabling fusion builds F_c from the
    network's seed.
    """
    values = net.config.model_dump()
    values.update(mix_enabled=mix_enabled, fusion_enabled=fusion_enabled)
    config = validate_config(NetworkConfig, values)

    ablated = copy.deepcopy(net)
    ablated.config = config
    if not fusion_enabled:
        ablated.fusion = None
    elif ablated.fusion is None:
        ablated.fusion = ablated._fusion_block().to(next(net.parameters()).dtype)
        initialize_parameters(ablated.fusion, ablated.seed, prefix="fusion.")
    ablated.set_mix_enabled(mix_enabled)
    return ablated


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def predict(net: FMNet, rgb: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """No-grad forward on one 3×H×W image, returned as a float32 B×H×W array"""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        hsi, _ = net(torch.as_tensor(np.asarray(rgb), dtype=dtype))
    return hsi.numpy().astype(np.float32)


def check_network(net: FMNet) -> None:
    """Structural invariants of an assembled network"""
    config = net.config
    if net.blocks[-1].spec.out_channels != config.bands:
        raise ConfigurationError("final block must output config.bands channels")
    if (net.fusion is not None) != config.fusion_enabled:
        raise ConfigurationError("fusion block present iff fusion_enabled")
    if net.fusion is not None and net.fusion.spec.in_channels != (config.p - 1) * config.c:
        raise ConfigurationError("fusion block input must be (p-1)*c channels")
