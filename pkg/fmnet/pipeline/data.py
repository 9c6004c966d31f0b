"""
HSI/RGB pair ingestion, camera-SRF RGB synthesis, dataset splits,
patch sampling and the synthetic desk-scale dataset generator
"""
import csv
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from fmnet.models import DatasetSplit
from fmnet.utils.errors import FormatError, InputError

logger = structlog.get_logger()

PathLike = Union[str, Path]

HSI_MAGIC = b"HSC1"
HSI_HEADER = struct.Struct("<4sIII")
# Largest cube a container may declare, in float32 elements (16 GiB)
MAX_ELEMENTS = 1 << 32

HSI_SUFFIX = ".hsi"
RGB_SUFFIX = ".rgb"
MANIFEST_NAME = "split.txt"

# Mean |second difference| along bands stays below this for generated cubes
SYNTHETIC_SMOOTHNESS_BOUND = 0.1


class SamplePair(NamedTuple):
    id: str
    hsi: np.ndarray
    rgb: np.ndarray


class Dataset(NamedTuple):
    pairs: Dict[str, SamplePair]
    split: DatasetSplit

    @property
    def bands(self) -> int:
        return next(iter(self.pairs.values())).hsi.shape[0]

    def train_pairs(self) -> List[SamplePair]:
        return [self.pairs[i] for i in self.split.train]

    def test_pairs(self) -> List[SamplePair]:
        return [self.pairs[i] for i in self.split.test]


class PatchCoordinate(NamedTuple):
    pair_index: int
    top: int
    left: int


# ---------------------------------------------------------------------------
# HSI container
# ---------------------------------------------------------------------------

def encode_hsi(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3:
        raise InputError(f"expected a B×H×W cube, got shape {image.shape}")
    bands, height, width = image.shape
    header = HSI_HEADER.pack(HSI_MAGIC, bands, height, width)
    return header + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_hsi(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(payload) < len(HSI_MAGIC):
        raise FormatError("magic", f"{source} is shorter than the magic bytes")
    if payload[:4] != HSI_MAGIC:
        raise FormatError("magic", f"{source} starts with {payload[:4]!r}, expected {HSI_MAGIC!r}")
    if len(payload) < HSI_HEADER.size:
        raise FormatError("header", f"{source} ends inside the B/H/W header")

    _, bands, height, width = HSI_HEADER.unpack_from(payload)
    if min(bands, height, width) == 0:
        raise FormatError("dims", f"{source} declares an empty cube {bands}×{height}×{width}")
    count = bands * height * width
    if count > MAX_ELEMENTS:
        raise FormatError("dims", f"{source} declares {count} elements, above the {MAX_ELEMENTS} limit")

    body = memoryview(payload)[HSI_HEADER.size:]
    expected = count * 4
    if len(body) < expected:
        raise FormatError("payload", f"{source} is truncated: expected {expected} bytes, found {len(body)}")
    if len(body) > expected:
        raise FormatError("payload", f"{source} has {len(body) - expected} trailing bytes")
    return np.frombuffer(body, dtype="<f4").reshape(bands, height, width).astype(np.float32)


def save_hsi(image: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.write_bytes(encode_hsi(image))
    logger.debug("Wrote HSI container", path=str(path), shape=tuple(np.shape(image)))
    return path


def load_hsi(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"HSI container not found: {path}")
    return decode_hsi(path.read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Spectral response and RGB synthesis
# ---------------------------------------------------------------------------

def validate_srf(srf: np.ndarray, bands: Optional[int] = None) -> np.ndarray:
    srf = np.asarray(srf, dtype=np.float64)
    if srf.ndim != 2 or srf.shape[1] != 3:
        raise InputError(f"spectral response must be B×3, got shape {srf.shape}")
    if bands is not None and srf.shape[0] != bands:
        raise InputError(f"spectral response has {srf.shape[0]} rows, image has {bands} bands")
    if not np.all(np.isfinite(srf)) or np.any(srf < 0):
        raise InputError("spectral response entries must be finite and non-negative")
    if np.any(srf.sum(axis=0) == 0):
        raise InputError("spectral response has an all-zero column")
    return srf


def synthetic_srf(bands: int) -> np.ndarray:
    """Three Gaussian sensitivity curves (R, G, B columns) over 400-700 nm"""
    wavelengths = np.linspace(400.0, 700.0, bands)
    centers = np.array([610.0, 540.0, 460.0])
    sigma = 40.0
    return np.exp(-0.5 * ((wavelengths[:, None] - centers[None, :]) / sigma) ** 2)


def load_srf_csv(path: PathLike) -> np.ndarray:
    """B rows of three comma-separated non-negative decimals, no header"""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"SRF file not found: {path}")
    rows = []
    with path.open(newline="", encoding="utf-8") as handle:
        for lineno, row in enumerate(csv.reader(handle), 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise FormatError(f"srf:{lineno}", f"expected 3 values, got {len(row)}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as e:
                raise FormatError(f"srf:{lineno}", str(e)) from e
    if not rows:
        raise FormatError("srf", f"{path} has no rows")
    return validate_srf(np.array(rows))


def synthesize_rgb(hsi: np.ndarray, srf: np.ndarray) -> np.ndarray:
    """
    Project a cube through the camera response, normalize every channel by
    its response column sum and clip to [0, 1]
    """
    hsi = np.asarray(hsi)
    if hsi.ndim != 3:
        raise InputError(f"expected a B×H×W cube, got shape {hsi.shape}")
    srf = validate_srf(srf, hsi.shape[0])
    rgb = np.einsum("bj,bhw->jhw", srf, hsi.astype(np.float64)) / srf.sum(axis=0)[:, None, None]
    dtype = hsi.dtype if np.issubdtype(hsi.dtype, np.floating) else np.float32
    return np.clip(rgb, 0.0, 1.0).astype(dtype)


# ---------------------------------------------------------------------------
# Splits and manifests
# ---------------------------------------------------------------------------

def split_dataset(ids: Sequence[str], n_train: int, seed: int) -> DatasetSplit:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise InputError("pair identifiers must be unique")
    if not 0 <= n_train < len(ids):
        raise InputError(f"n_train must be in [0, {len(ids)}), got {n_train}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(train=shuffled[:n_train], test=shuffled[n_train:], seed=seed)


def format_manifest(split: DatasetSplit) -> str:
    lines = [f"# seed={split.seed}", "[train]", *split.train, "[test]", *split.test]
    return "\n".join(lines) + "\n"


def parse_manifest(text: str, source: str = MANIFEST_NAME) -> DatasetSplit:
    sections: Dict[str, List[str]] = {"train": [], "test": []}
    current: Optional[str] = None
    seed = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "seed":
                try:
                    seed = int(value)
                except ValueError as e:
                    raise FormatError(f"{source}:{lineno}", f"bad seed {value!r}") from e
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in sections:
                raise FormatError(f"{source}:{lineno}", f"unknown section [{current}]")
            continue
        if current is None:
            raise FormatError(f"{source}:{lineno}", "identifier before any [train]/[test] section")
        sections[current].append(line)
    try:
        return DatasetSplit(train=sections["train"], test=sections["test"], seed=seed)
    except ValueError as e:
        raise FormatError(source, str(e)) from e


def write_manifest(split: DatasetSplit, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(format_manifest(split), encoding="utf-8")
    return path


def read_manifest(path: PathLike) -> DatasetSplit:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"split manifest not found: {path}")
    return parse_manifest(path.read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

def write_dataset(pairs: Iterable[SamplePair], split: DatasetSplit, directory: PathLike) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for pair in pairs:
        written.append(save_hsi(pair.hsi, directory / f"{pair.id}{HSI_SUFFIX}"))
        written.append(save_hsi(pair.rgb, directory / f"{pair.id}{RGB_SUFFIX}"))
    written.append(write_manifest(split, directory / MANIFEST_NAME))
    logger.info("Wrote dataset", directory=str(directory), pairs=len(written) // 2, train=len(split.train),
                test=len(split.test))
    return written


def load_pair(directory: PathLike, pair_id: str) -> SamplePair:
    directory = Path(directory)
    hsi = load_hsi(directory / f"{pair_id}{HSI_SUFFIX}")
    rgb = load_hsi(directory / f"{pair_id}{RGB_SUFFIX}")
    if rgb.shape[0] != 3:
        raise InputError(f"{pair_id}: RGB container has {rgb.shape[0]} channels, expected 3")
    if rgb.shape[1:] != hsi.shape[1:]:
        raise InputError(f"{pair_id}: RGB {rgb.shape[1:]} and HSI {hsi.shape[1:]} differ spatially")
    return SamplePair(pair_id, hsi, rgb)


def load_dataset(directory: PathLike, threads: int = 1) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"data directory not found: {directory}")
    split = read_manifest(directory / MANIFEST_NAME)
    ids = split.train + split.test
    if not ids:
        raise InputError(f"{directory} lists no pairs")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        pairs = list(pool.map(lambda pair_id: load_pair(directory, pair_id), ids))
    bands = {pair.hsi.shape[0] for pair in pairs}
    if len(bands) != 1:
        raise InputError(f"{directory} mixes band counts {sorted(bands)}")
    logger.info("Loaded dataset", directory=str(directory), pairs=len(pairs), bands=bands.pop())
    return Dataset({pair.id: pair for pair in pairs}, split)


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------

def draw_patch_coordinates(
    shapes: Sequence[Tuple[int, int]], patch_size: int, count: int, seed: int
) -> List[PatchCoordinate]:
    if not shapes:
        raise InputError("no images to sample patches from")
    for height, width in shapes:
        if patch_size > min(height, width):
            raise InputError(f"patch size {patch_size} exceeds image size {height}×{width}")
    rng = np.random.default_rng(seed)
    coordinates = []
    for _ in range(count):
        index = int(rng.integers(len(shapes)))
        height, width = shapes[index]
        top = int(rng.integers(0, height - patch_size + 1))
        left = int(rng.integers(0, width - patch_size + 1))
        coordinates.append(PatchCoordinate(index, top, left))
    return coordinates


def sample_patches(
    pairs: Sequence[SamplePair], patch_size: int, count: int, seed: int
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Aligned RGB/HSI crops at identical coordinates"""
    shapes = [pair.hsi.shape[1:] for pair in pairs]
    patches = []
    for index, top, left in draw_patch_coordinates(shapes, patch_size, count, seed):
        window = (slice(None), slice(top, top + patch_size), slice(left, left + patch_size))
        patches.append((pairs[index].rgb[window], pairs[index].hsi[window]))
    return patches


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _synthetic_cube(rng: np.random.Generator, bands: int, size: int) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    band_axis = np.arange(bands, dtype=np.float64)
    min_width = max(2.0, bands / 4.0)

    blobs = int(rng.integers(2, 5))
    spectra, abundances = [], []
    for k in range(blobs + 1):
        base = rng.uniform(0.05, 0.4)
        amplitude = rng.uniform(0.1, 0.5)
        center = rng.uniform(0.0, bands - 1)
        width = rng.uniform(min_width, 2.0 * min_width)
        spectra.append(base + amplitude * np.exp(-0.5 * ((band_axis - center) / width) ** 2))
        if k == 0:
            # background keeps the abundance normalization well defined
            abundances.append(np.full((size, size), 0.2))
        else:
            cy, cx = rng.uniform(0.0, 1.0, size=2)
            radius = rng.uniform(0.1, 0.35)
            abundances.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2)))

    weights = np.stack(abundances)
    weights /= weights.sum(axis=0, keepdims=True)
    cube = np.einsum("kb,khw->bhw", np.stack(spectra), weights)
    return np.clip(cube, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(
    count: int, bands: int, size: int, seed: int, srf: Optional[np.ndarray] = None
) -> List[SamplePair]:
    """
    Cubes mixing a few smooth spatial blobs, each carrying a smooth spectrum
    (a Gaussian bump over the band axis on a flat base); RGB through the SRF
    """
    if count < 1:
        raise InputError(f"count must be >= 1, got {count}")
    if bands < 1 or size < 1:
        raise InputError(f"bands and size must be positive, got bands={bands} size={size}")
    srf = synthetic_srf(bands) if srf is None else validate_srf(srf, bands)
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        hsi = _synthetic_cube(rng, bands, size)
        pairs.append(SamplePair(f"pair_{i:04d}", hsi, synthesize_rgb(hsi, srf)))
    logger.debug("Generated synthetic pairs", count=count, bands=bands, size=size, seed=seed)
    return pairs


def spectral_roughness(hsi: np.ndarray) -> float:
    """Mean |second difference| along the band axis"""
    hsi = np.asarray(hsi, dtype=np.float64)
    if hsi.shape[0] < 3:
        return 0.0
    return float(np.mean(np.abs(np.diff(hsi, n=2, axis=0))))
