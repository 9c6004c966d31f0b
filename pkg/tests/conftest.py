"""
Shared fixtures and reference implementations for the test suite
"""
import math

import numpy as np
import pytest
import torch

from fmnet.models import NetworkConfig, TrainConfig
from fmnet.pipeline.data import generate_synthetic_dataset, split_dataset, write_dataset


def naive_conv2d(x, weight, bias):
    """Direct-summation same-padded convolution, stride 1: x C×H×W, weight O×C×k×k"""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    channels, height, width = x.shape
    out_channels, _, k, _ = weight.shape
    pad = k // 2
    out = np.zeros((out_channels, height, width))
    for o in range(out_channels):
        for h in range(height):
            for w in range(width):
                total = float(bias[o])
                for c in range(channels):
                    for i in range(k):
                        for j in range(k):
                            hh, ww = h + i - pad, w + j - pad
                            if 0 <= hh < height and 0 <= ww < width:
                                total += weight[o, c, i, j] * x[c, hh, ww]
                out[o, h, w] = total
    return out


def naive_softmax(logits):
    """Per-pixel softmax over axis 0 with explicit loops"""
    logits = np.asarray(logits, dtype=np.float64)
    out = np.zeros_like(logits)
    for h in range(logits.shape[1]):
        for w in range(logits.shape[2]):
            peak = max(logits[:, h, w])
            exps = [math.exp(v - peak) for v in logits[:, h, w]]
            total = sum(exps)
            for i, e in enumerate(exps):
                out[i, h, w] = e / total
    return out


def to_numpy(params):
    return {name: value.detach().numpy().astype(np.float64) for name, value in params.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return NetworkConfig(p=2, n=2, m=1, c=4, bands=5, kernels=[3, 5])


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        initial_lr=1e-3, halve_every=5, batch_size=4, epochs=2, patch_size=12, seed=0, steps_per_epoch=3,
    )


@pytest.fixture
def synthetic_pairs():
    return generate_synthetic_dataset(count=6, bands=5, size=16, seed=7)


@pytest.fixture
def dataset_dir(tmp_path, synthetic_pairs):
    split = split_dataset([pair.id for pair in synthetic_pairs], 4, seed=0)
    directory = tmp_path / "data"
    write_dataset(synthetic_pairs, split, directory)
    return directory


@pytest.fixture(autouse=True)
def _default_dtype():
    previous = torch.get_default_dtype()
    yield
    torch.set_default_dtype(previous)
