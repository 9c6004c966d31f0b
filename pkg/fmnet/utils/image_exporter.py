"""
Grayscale image export for weight and error maps
Writes binary PGM (P5, maxval 255) through Pillow
"""
import io
from pathlib import Path
from typing import Union

import numpy as np
import structlog
from PIL import Image

from fmnet.utils.errors import InputError

logger = structlog.get_logger()


class ImageExporter:
    """Renders [0, 1] maps to 8-bit grayscale PGM files"""

    format = "PPM"
    suffix = ".pgm"

    @staticmethod
    def quantize(values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise InputError(f"expected an H×W map, got shape {values.shape}")
        return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)

    def to_bytes(self, values: np.ndarray) -> bytes:
        buffer = io.BytesIO()
        Image.fromarray(self.quantize(values)).save(buffer, format=self.format)
        return buffer.getvalue()

    def export_map(self, values: np.ndarray, path: Union[str, Path]) -> Path:
        path = Path(path)
        payload = self.to_bytes(values)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(payload)
        except OSError as e:
            raise InputError(f"cannot write {path}: {e}") from e
        logger.debug("Exported grayscale map", path=str(path), shape=np.shape(values))
        return path

    @staticmethod
    def read_map(path: Union[str, Path]) -> np.ndarray:
        """8-bit pixel values of a PGM file"""
        with Image.open(path) as image:
            return np.array(image, dtype=np.uint8)


# Global exporter instance
image_exporter = ImageExporter()
