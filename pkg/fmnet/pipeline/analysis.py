"""
Qualitative artifacts: mixing-weight maps, spectral error maps and
recovered spectra at chosen pixels
"""
import csv
import io
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
import torch

from fmnet.models import WeightVisualization
from fmnet.networks.network import FMNet
from fmnet.pipeline.data import save_hsi
from fmnet.pipeline.metrics import spectral_error_map
from fmnet.utils.errors import InputError
from fmnet.utils.image_exporter import image_exporter

logger = structlog.get_logger()

PathLike = Union[str, Path]
Pixel = Tuple[int, int]


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes uniform 0.5"""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high == low:
        return np.full_like(values, 0.5)
    return (values - low) / (high - low)


def weight_visualizations(net: FMNet, rgb: np.ndarray) -> List[WeightVisualization]:
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        _, weights = net(torch.as_tensor(np.asarray(rgb), dtype=dtype))
    maps = []
    for block, block_weights in zip(net.block_names, weights):
        for index, plane in enumerate(block_weights.numpy(), 1):
            maps.append(WeightVisualization(block=block, basis=index, values=normalize_map(plane)))
    return maps


def export_weight_maps(net: FMNet, rgb: np.ndarray, out_dir: PathLike) -> List[Path]:
    """One weights_<block>_<basis>.pgm per mixing-weight map"""
    out_dir = Path(out_dir)
    paths = [
        image_exporter.export_map(vis.values, out_dir / f"weights_{vis.block}_{vis.basis}.pgm")
        for vis in weight_visualizations(net, rgb)
    ]
    logger.info("Exported weight maps", directory=str(out_dir), files=len(paths))
    return paths


def export_error_map(pred: np.ndarray, gt: np.ndarray, out_path: PathLike) -> Tuple[Path, Path]:
    """Rendered PGM at out_path plus the raw map as a one-band container next to it"""
    out_path = Path(out_path)
    raw = spectral_error_map(pred, gt).astype(np.float32)
    image_path = image_exporter.export_map(normalize_map(raw), out_path)
    raw_path = out_path.with_suffix(".hsi")
    try:
        save_hsi(raw[None], raw_path)
    except OSError as e:
        raise InputError(f"cannot write {raw_path}: {e}") from e
    logger.info("Exported error map", path=str(image_path), raw=str(raw_path), max_error=float(raw.max()))
    return image_path, raw_path


def extract_spectra(image: np.ndarray, pixels: Sequence[Pixel], out_path: Optional[PathLike] = None) -> str:
    """
    CSV with a band column and one column per (row, col) pixel. Values are
    written with repr so float32 data reads back exactly.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise InputError(f"expected a B×H×W cube, got shape {image.shape}")
    bands, height, width = image.shape
    for row, col in pixels:
        if not (0 <= row < height and 0 <= col < width):
            raise InputError(f"pixel ({row}, {col}) is outside the {height}×{width} image")

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["band"] + [f"r{row}_c{col}" for row, col in pixels])
    for b in range(bands):
        writer.writerow([b] + [repr(float(image[b, row, col])) for row, col in pixels])
    text = buffer.getvalue()

    if out_path is not None:
        out_path = Path(out_path)
        try:
            out_path.parent.mkdir(parents=True, exist_ok=True)
            out_path.write_text(text, encoding="utf-8")
        except OSError as e:
            raise InputError(f"cannot write {out_path}: {e}") from e
    return text


def parse_pixels(text: str) -> List[Pixel]:
    """'row,col;row,col' as accepted by the command line"""
    pixels = []
    for item in text.split(";"):
        if not item.strip():
            continue
        try:
            row, col = (int(v) for v in item.split(","))
        except ValueError as e:
            raise InputError(f"bad pixel {item!r}, expected row,col") from e
        pixels.append((row, col))
    return pixels
