from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from cmaxsim.core.errors import DataError


def to_grayscale(image: np.ndarray, clip: Optional[float] = None) -> np.ndarray:
    """Map a signed IWE to uint8 with zero at mid-grey.

    ``clip`` bounds |value| before scaling; by default the largest magnitude is used.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"expected a 2-D image, got shape {img.shape}")
    bound = float(np.max(np.abs(img), initial=0.0)) if clip is None else float(clip)
    if bound <= 0:
        return np.full(img.shape, 128, dtype=np.uint8)
    # [-bound, bound] -> [0, 255]
    scaled = (np.clip(img, -bound, bound) / bound + 1.0) * 127.5
    return np.rint(scaled).astype(np.uint8)


def export_image(image: np.ndarray, path: str | Path, clip: Optional[float] = None) -> Path:
    # Format follows the suffix (.png, .pgm, ...)
    path = Path(path)
    Image.fromarray(to_grayscale(image, clip)).save(path)
    return path
