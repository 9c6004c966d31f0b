"""
Training loop, optimizer schedule and checkpoint persistence
"""
import csv
import math
import struct
import time
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import structlog
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from fmnet.models import NetworkConfig, TrainConfig, TrainLogRow
from fmnet.networks.network import FMNet, predict
from fmnet.pipeline.data import MAX_ELEMENTS, SamplePair, sample_patches
from fmnet.pipeline.metrics import PSNR_CAP, psnr
from fmnet.utils.config import NETWORK_KEYS, TRAIN_KEYS, config_snapshot, parse_key_values, validate_config
from fmnet.utils.errors import (
    CheckpointMismatchError,
    ConfigurationError,
    FormatError,
    InputError,
    NumericalError,
)

logger = structlog.get_logger()

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"FMCKPT1\0"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")

LOG_COLUMNS = ["epoch", "lr", "train_loss", "wall_seconds"]
CURVE_COLUMNS = ["epoch", "train_loss", "test_psnr"]

PARAM_PREFIX = "param/"
ADAM_PREFIX = "adam/"
ADAM_FIELDS = ("exp_avg", "exp_avg_sq", "step")


class Checkpoint(BaseModel):
    """Everything needed to rebuild the network and continue optimization"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    version: int = CHECKPOINT_VERSION
    network: NetworkConfig
    train: Optional[TrainConfig] = None
    seed: int = 0
    epoch: int = Field(0, ge=0)
    loss_history: List[float] = Field(default_factory=list)
    parameters: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = Field(default_factory=dict)


class TrainResult(NamedTuple):
    checkpoint: Checkpoint
    log: List[TrainLogRow]


# ---------------------------------------------------------------------------
# Objective and schedule
# ---------------------------------------------------------------------------

def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over every element of the batch"""
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean(torch.abs(pred - target))


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise InputError(f"epoch must be >= 0, got {epoch}")
    return config.initial_lr * 0.5 ** (epoch // config.halve_every)


def default_steps_per_epoch(pairs: Sequence[SamplePair], config: TrainConfig) -> int:
    ps = config.patch_size
    tiles = sum((pair.hsi.shape[1] // ps) * (pair.hsi.shape[2] // ps) for pair in pairs)
    return max(1, math.ceil(tiles / config.batch_size))


def build_optimizer(net: nn.Module, config: TrainConfig) -> torch.optim.Adam:
    """Adam with the L2 penalty on kernels only; biases are not decayed"""
    decay, no_decay = [], []
    for name, param in net.named_parameters():
        (no_decay if name.endswith("bias") else decay).append(param)
    return torch.optim.Adam(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.initial_lr,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
    )


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def mean_test_psnr(net: FMNet, pairs: Sequence[SamplePair]) -> float:
    values = [min(psnr(predict(net, pair.rgb), pair.hsi), PSNR_CAP) for pair in pairs]
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(
    net: FMNet,
    pairs: Sequence[SamplePair],
    config: TrainConfig,
    resume: Optional[Checkpoint] = None,
    test_pairs: Optional[Sequence[SamplePair]] = None,
    on_epoch: Optional[Callable[[TrainLogRow], None]] = None,
) -> TrainResult:
    """
    Mini-batch Adam on the L1 objective until `config.epochs` epochs have
    completed in total. Each epoch draws its crops from a generator seeded
    by (config.seed, epoch), so a resumed run sees the same batches as an
    uninterrupted one. When resuming, `net` must already hold the
    checkpoint parameters (see restore_network).
    """
    if not pairs:
        raise InputError("training set is empty")
    steps = config.steps_per_epoch or default_steps_per_epoch(pairs, config)
    optimizer = build_optimizer(net, config)
    dtype = next(net.parameters()).dtype

    start, history = 0, []
    if resume is not None:
        restore_optimizer(net, optimizer, resume)
        start, history = resume.epoch, list(resume.loss_history)
        logger.info("Resuming training", epoch=start)

    log: List[TrainLogRow] = []
    for epoch in range(start, config.epochs):
        lr = lr_at_epoch(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        started = time.perf_counter()
        patches = sample_patches(pairs, config.patch_size, steps * config.batch_size, _epoch_seed(config.seed, epoch))
        net.train()
        losses = []
        for batch in range(steps):
            chunk = patches[batch * config.batch_size:(batch + 1) * config.batch_size]
            rgb = torch.from_numpy(np.stack([c[0] for c in chunk])).to(dtype)
            hsi = torch.from_numpy(np.stack([c[1] for c in chunk])).to(dtype)

            optimizer.zero_grad()
            pred, _ = net(rgb)
            loss = l1_loss(pred, hsi)
            if not torch.isfinite(loss):
                logger.error("Non-finite loss", epoch=epoch, batch=batch, loss=loss.item())
                raise NumericalError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {batch}", epoch, batch)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        net.eval()

        train_loss = float(np.mean(losses))
        history.append(train_loss)
        row = TrainLogRow(
            epoch=epoch,
            lr=lr,
            train_loss=train_loss,
            wall_seconds=time.perf_counter() - started,
            test_psnr=mean_test_psnr(net, test_pairs) if test_pairs else None,
        )
        log.append(row)
        logger.info("Epoch finished", epoch=epoch, lr=lr, loss=train_loss, steps=steps, test_psnr=row.test_psnr)
        if on_epoch is not None:
            on_epoch(row)

    checkpoint = make_checkpoint(net, optimizer, max(start, config.epochs), history, config)
    return TrainResult(checkpoint, log)


# ---------------------------------------------------------------------------
# Checkpoints in memory
# ---------------------------------------------------------------------------

def make_checkpoint(
    net: FMNet,
    optimizer: Optional[torch.optim.Optimizer],
    epoch: int,
    loss_history: Sequence[float],
    train_config: Optional[TrainConfig] = None,
) -> Checkpoint:
    parameters = {
        name: param.detach().cpu().numpy().astype(np.float32) for name, param in net.named_parameters()
    }
    state: Dict[str, np.ndarray] = {}
    if optimizer is not None:
        for name, param in net.named_parameters():
            entry = optimizer.state.get(param)
            if not entry:
                continue
            for field in ADAM_FIELDS:
                value = torch.as_tensor(entry[field]).detach().cpu()
                state[f"{name}/{field}"] = value.numpy().astype(np.float32).reshape(value.shape)
    return Checkpoint(
        network=net.config,
        train=train_config,
        seed=net.seed,
        epoch=epoch,
        loss_history=[float(v) for v in loss_history],
        parameters=parameters,
        optimizer=state,
    )


def restore_optimizer(net: FMNet, optimizer: torch.optim.Optimizer, checkpoint: Checkpoint) -> None:
    for name, param in net.named_parameters():
        fields = {field: checkpoint.optimizer.get(f"{name}/{field}") for field in ADAM_FIELDS}
        if all(v is None for v in fields.values()):
            continue
        if any(v is None for v in fields.values()):
            raise CheckpointMismatchError(f"optimizer state for {name!r} is incomplete")
        optimizer.state[param] = {
            "step": torch.tensor(float(fields["step"].reshape(-1)[0])),
            "exp_avg": torch.from_numpy(fields["exp_avg"].copy()).to(param.dtype),
            "exp_avg_sq": torch.from_numpy(fields["exp_avg_sq"].copy()).to(param.dtype),
        }


def _check_arrays(net: FMNet, parameters: Dict[str, np.ndarray]) -> None:
    expected = {name: tuple(p.shape) for name, p in net.named_parameters()}
    missing = sorted(set(expected) - set(parameters))
    unexpected = sorted(set(parameters) - set(expected))
    if missing or unexpected:
        raise CheckpointMismatchError(
            f"checkpoint arrays do not fit the network: missing {missing[:5]}, unexpected {unexpected[:5]}"
        )
    for name, shape in expected.items():
        if parameters[name].shape != shape:
            raise CheckpointMismatchError(f"{name}: checkpoint shape {parameters[name].shape}, network shape {shape}")


def _check_optimizer_arrays(net: FMNet, optimizer: Dict[str, np.ndarray]) -> None:
    shapes = {name: tuple(p.shape) for name, p in net.named_parameters()}
    for key, array in optimizer.items():
        name, _, field = key.rpartition("/")
        if name not in shapes or field not in ADAM_FIELDS:
            raise CheckpointMismatchError(f"optimizer array {key!r} does not belong to the network")
        expected = () if field == "step" else shapes[name]
        # step may be stored as a scalar or a one-element array
        if field == "step" and array.size == 1:
            continue
        if array.shape != expected:
            raise CheckpointMismatchError(f"{key}: checkpoint shape {array.shape}, expected {expected}")


def restore_network(checkpoint: Checkpoint, config: Optional[NetworkConfig] = None) -> FMNet:
    """Rebuild the network stored in a checkpoint, optionally against an expected architecture"""
    if config is not None and config.model_dump() != checkpoint.network.model_dump():
        differing = sorted(
            key for key, value in config.model_dump().items() if checkpoint.network.model_dump()[key] != value
        )
        raise CheckpointMismatchError(f"checkpoint config differs in {', '.join(differing)}")
    net = FMNet(checkpoint.network, seed=checkpoint.seed)
    _check_arrays(net, checkpoint.parameters)
    with torch.no_grad():
        for name, param in net.named_parameters():
            param.copy_(torch.from_numpy(checkpoint.parameters[name]))
    net.eval()
    return net


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def _snapshot_text(checkpoint: Checkpoint) -> str:
    values = config_snapshot(checkpoint.network, checkpoint.train)
    values["network_seed"] = str(checkpoint.seed)
    values["epoch"] = str(checkpoint.epoch)
    values["loss_history"] = ",".join(repr(v) for v in checkpoint.loss_history)
    return "".join(f"{key}={value}\n" for key, value in values.items())


def _pack_name(name: str) -> bytes:
    encoded = name.encode("utf-8")
    return _U32.pack(len(encoded)) + encoded


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    arrays = {PARAM_PREFIX + k: v for k, v in checkpoint.parameters.items()}
    arrays.update({ADAM_PREFIX + k: v for k, v in checkpoint.optimizer.items()})

    out = bytearray(CHECKPOINT_MAGIC)
    out += _U32.pack(checkpoint.version)
    out += _pack_name(_snapshot_text(checkpoint))
    out += _U32.pack(len(arrays))
    for name, array in arrays.items():
        array = np.asarray(array)
        out += _pack_name(name)
        out += _U32.pack(array.ndim)
        out += b"".join(_U32.pack(d) for d in array.shape)
        out += np.ascontiguousarray(array, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int, field: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise FormatError(field, f"{self.source} is truncated at byte {len(self.payload)}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, field: str) -> int:
        return _U32.unpack(self.take(4, field))[0]

    def text(self, field: str) -> str:
        raw = self.take(self.u32(field), field)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(field, f"{self.source}: invalid UTF-8") from e


def _parse_snapshot(text: str, source: str):
    values = parse_key_values(text.splitlines(), f"{source}:snapshot")
    try:
        network = validate_config(NetworkConfig, {k: v for k, v in values.items() if k in NETWORK_KEYS})
        train_values = {k: v for k, v in values.items() if k in TRAIN_KEYS}
        train_config = validate_config(TrainConfig, train_values) if train_values else None
        seed = int(values.get("network_seed", "0"))
        epoch = int(values.get("epoch", "0"))
        history = [float(v) for v in values.get("loss_history", "").split(",") if v]
    except (ConfigurationError, ValueError) as e:
        raise FormatError("snapshot", f"{source}: {e}") from e
    return network, train_config, seed, epoch, history


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(payload, source)
    if reader.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError("magic", f"{source} is not a checkpoint")
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError("version", f"{source} has version {version}, expected {CHECKPOINT_VERSION}")
    network, train_config, seed, epoch, history = _parse_snapshot(reader.text("snapshot"), source)

    parameters: Dict[str, np.ndarray] = {}
    optimizer: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("arrays")):
        name = reader.text("array name")
        rank = reader.u32(f"{name} rank")
        shape = tuple(reader.u32(f"{name} dims") for _ in range(rank))
        count = math.prod(shape)
        if count > MAX_ELEMENTS:
            raise FormatError(f"{name} dims", f"{source} declares {count} elements, above the {MAX_ELEMENTS} limit")
        values = np.frombuffer(reader.take(count * 4, f"{name} payload"), dtype="<f4").astype(np.float32)
        values = values.reshape(shape)
        if name.startswith(PARAM_PREFIX):
            parameters[name[len(PARAM_PREFIX):]] = values
        elif name.startswith(ADAM_PREFIX):
            optimizer[name[len(ADAM_PREFIX):]] = values
        else:
            raise FormatError("arrays", f"{source}: unknown array {name!r}")
    if reader.offset != len(payload):
        raise FormatError("payload", f"{source} has {len(payload) - reader.offset} trailing bytes")

    checkpoint = Checkpoint(
        version=version, network=network, train=train_config, seed=seed, epoch=epoch,
        loss_history=history, parameters=parameters, optimizer=optimizer,
    )
    # Arrays must fit the stored architecture
    with torch.device("meta"):
        net = FMNet(network, seed=seed)
    _check_arrays(net, parameters)
    _check_optimizer_arrays(net, optimizer)
    return checkpoint


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info("Saved checkpoint", path=str(path), epoch=checkpoint.epoch)
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    checkpoint = decode_checkpoint(path.read_bytes(), str(path))
    logger.debug("Loaded checkpoint", path=str(path), epoch=checkpoint.epoch)
    return checkpoint


# ---------------------------------------------------------------------------
# Logs
# ---------------------------------------------------------------------------

def write_train_log(rows: Sequence[TrainLogRow], path: PathLike, append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not (append and path.exists())
    with path.open("w" if new_file else "a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        if new_file:
            writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row.epoch, repr(row.lr), repr(row.train_loss), f"{row.wall_seconds:.3f}"])
    return path


def write_curves(rows: Sequence[TrainLogRow], path: PathLike, append: bool = False) -> Path:
    path = Path(path)
    new_file = not (append and path.exists())
    with path.open("w" if new_file else "a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        if new_file:
            writer.writerow(CURVE_COLUMNS)
        for row in rows:
            writer.writerow([row.epoch, repr(row.train_loss), "" if row.test_psnr is None else repr(row.test_psnr)])
    return path


def read_train_log(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))
