"""
Comparison points that can be reproduced honestly: spectral bilinear
interpolation (BI) and the DCNN variant, where every FM block degenerates
to a plain stack of conv blocks (n=1)
"""
from typing import Optional, Sequence, Union

import numpy as np
import torch

from fmnet.models import NetworkConfig, kernels_for
from fmnet.networks.network import DEFAULT_CHANNEL_ORDER, spectral_upsample
from fmnet.utils.config import validate_config

__all__ = ["bi_baseline", "dcnn_variant_config", "kernels_for"]


def bi_baseline(
    rgb: Union[np.ndarray, torch.Tensor],
    bands: int,
    channel_order: Sequence[int] = DEFAULT_CHANNEL_ORDER,
) -> torch.Tensor:
    """BI predictor: the network's spectral upsampling used on its own"""
    return spectral_upsample(rgb, bands, channel_order)


def dcnn_variant_config(base: Optional[NetworkConfig] = None) -> NetworkConfig:
    """
    Same depth and width as base, one basis function per block, constant
    mixing. Each FM block then computes its entry conv followed by one
    m-block subnet.
    """
    values = (base or NetworkConfig()).model_dump()
    values.update(n=1, kernels=kernels_for(1), mix_enabled=False)
    return validate_config(NetworkConfig, values)
