from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict, Any, Tuple
import numpy as np


def kernels_for(n: int) -> List[int]:
    """Default basis kernel sizes for n basis functions"""
    if n <= 3:
        return [3, 7, 11][:n]
    return [2 * i + 3 for i in range(n)]


def _split_ints(v):
    # key=value files and --set flags deliver "3,7,11"
    if isinstance(v, str):
        return [int(part) for part in v.split(",") if part.strip()]
    return v


class ConvBlockSpec(BaseModel):
    """One convolution (same padding, stride 1, bias) optionally followed by ReLU"""
    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    kernel_size: int = Field(3, ge=1)
    apply_relu: bool = True

    @field_validator("kernel_size")
    def validate_kernel_size(cls, v):
        if v % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {v}")
        return v


class FmBlockSpec(BaseModel):
    """Architecture of one function-mixture block"""
    n: int = Field(..., ge=1, description="Number of basis functions")
    m: int = Field(..., ge=1, description="Conv blocks per subnet")
    c: int = Field(..., ge=1, description="Working channel count")
    kernels: List[int]
    out_channels: int = Field(..., ge=1)
    in_channels: Optional[int] = Field(None, ge=1, description="Entry conv input, defaults to c")
    output_relu: bool = Field(True, description="ReLU after the last conv of every basis subnet")

    @field_validator("kernels", mode="before")
    def split_kernels(cls, v):
        return _split_ints(v)

    @model_validator(mode="after")
    def validate_kernels(self):
        if len(self.kernels) != self.n:
            raise ValueError(f"kernels has {len(self.kernels)} entries, n={self.n}")
        even = [k for k in self.kernels if k < 1 or k % 2 == 0]
        if even:
            raise ValueError(f"basis kernels must be odd positive integers, got {even}")
        if self.in_channels is None:
            self.in_channels = self.c
        return self


class NetworkConfig(BaseModel):
    """Hyperparameters of the full network"""
    p: int = Field(3, ge=1, description="Stacked FM blocks, F_c excluded")
    n: int = Field(3, ge=1)
    m: int = Field(2, ge=1)
    c: int = Field(64, ge=1)
    kernels: Optional[List[int]] = None
    bands: int = Field(31, ge=1, description="Output spectral bands B")
    fusion_enabled: bool = True
    mix_enabled: bool = True
    channel_order: Tuple[int, int, int] = (2, 1, 0)

    @field_validator("kernels", "channel_order", mode="before")
    def split_lists(cls, v):
        return _split_ints(v)

    @field_validator("channel_order")
    def validate_channel_order(cls, v):
        if sorted(v) != [0, 1, 2]:
            raise ValueError(f"channel_order must be a permutation of 0,1,2, got {v}")
        return v

    @model_validator(mode="after")
    def validate_topology(self):
        if self.kernels is None:
            self.kernels = kernels_for(self.n)
        if len(self.kernels) != self.n:
            raise ValueError(f"kernels has {len(self.kernels)} entries, n={self.n}")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ValueError(f"basis kernels must be odd positive integers, got {self.kernels}")
        if self.fusion_enabled and self.p < 2:
            raise ValueError("fusion_enabled requires p >= 2")
        return self

    def block_spec(self, in_channels: int, out_channels: int, output_relu: bool = True) -> FmBlockSpec:
        return FmBlockSpec(
            n=self.n, m=self.m, c=self.c, kernels=list(self.kernels),
            out_channels=out_channels, in_channels=in_channels, output_relu=output_relu,
        )


class TrainConfig(BaseModel):
    """Optimizer schedule and patch sampling"""
    initial_lr: float = Field(1e-4, ge=0.0)
    halve_every: int = Field(20, ge=1, description="Epochs between learning-rate halvings")
    weight_decay: float = Field(1e-6, ge=0.0)
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(100, ge=1)
    patch_size: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)
    beta1: float = Field(0.9, gt=0.0, lt=1.0)
    beta2: float = Field(0.999, gt=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    steps_per_epoch: Optional[int] = Field(None, ge=1)


class DatasetSplit(BaseModel):
    """Train/test partition of pair identifiers"""
    train: List[str]
    test: List[str]
    seed: int = 0

    @model_validator(mode="after")
    def validate_disjoint(self):
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train and test overlap: {sorted(overlap)[:5]}")
        return self


class ImageMetrics(BaseModel):
    """Metric values for one image"""
    image_id: str
    rmse: float = Field(..., ge=0.0)
    psnr: float
    sam: float = Field(..., ge=0.0, le=180.0)
    ssim: float


class MetricsReport(BaseModel):
    """Per-image metrics and their means"""
    rmse: float
    psnr: float
    sam: float
    ssim: float
    per_image: List[ImageMetrics] = Field(default_factory=list)


class WeightVisualization(BaseModel):
    """Min-max normalized mixing-weight map of one basis function"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    block: str
    basis: int = Field(..., ge=1)
    values: np.ndarray


class TrainLogRow(BaseModel):
    """One epoch of the training log"""
    epoch: int
    lr: float
    train_loss: float
    wall_seconds: float
    test_psnr: Optional[float] = None


class ErrorResponse(BaseModel):
    """Standard error response model"""
    success: bool = False
    error: str
    error_code: Optional[str] = None
    details: Optional[Dict[str, Any]] = None


class HealthCheckResponse(BaseModel):
    """Health check response model"""
    status: str
    timestamp: str
    version: str
    model_loaded: bool


class ModelInfoResponse(BaseModel):
    """Served checkpoint description"""
    network: NetworkConfig
    epoch: int
    parameter_count: int
    checkpoint_path: str
