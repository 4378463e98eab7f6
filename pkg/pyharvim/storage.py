"""
File I/O: 8-bit grayscale PNGs, CSV tables, watermark params files. Every write goes through a
temp file that is renamed into place.
"""
import csv
import json
import logging
import os
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .evaluate import REPORT_FIELDS, MetricsReport, MetricsRow
from .exceptions import ImageFormatException, StorageException
from .tensor import Tensor, get_default_dtype
from .utils import atomic_write, image_side_of
from .watermark import WatermarkGenerator, WatermarkParams

_LOGGER = logging.getLogger(__name__)

# modes Pillow decodes 8-bit grayscale or colour into; "L" conversion applies ITU-R 601 luma weights
_EIGHT_BIT_MODES = {"1", "L", "LA", "P", "RGB", "RGBA", "CMYK", "YCbCr"}


def load_png(path) -> Tensor:
    """ Flattened pixels v / 255 of an 8-bit image, colour reduced to luma 0.299 R + 0.587 G + 0.114 B """
    try:
        with Image.open(path) as image:
            if image.mode not in _EIGHT_BIT_MODES:
                raise ImageFormatException(f"{path}: unsupported pixel mode {image.mode} (need 8-bit)")
            gray = image.convert("L")
            data = np.asarray(gray, dtype=np.float64) / 255.0
    except UnidentifiedImageError as err:
        raise ImageFormatException(f"{path}: not a readable image") from err
    _LOGGER.debug("Loaded %s (%dx%d)", path, data.shape[1], data.shape[0])
    return Tensor(data.reshape(-1))


def to_bytes(values) -> np.ndarray:
    """ [0, 1] floats to uint8, rounding half to even """
    data = values.numpy() if isinstance(values, Tensor) else np.asarray(values)
    return np.rint(np.clip(data.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, values, side: int = None):
    data = to_bytes(values)
    if data.ndim == 1:
        side = side or image_side_of(data.size)
        data = data.reshape(-1, side)
    with atomic_write(path, "wb") as handle:
        Image.fromarray(data).save(handle, format="PNG")
    _LOGGER.info("Wrote %s", path)


def load_png_dir(directory) -> Tuple[List[str], np.ndarray]:
    """ Every *.png in a directory, sorted by name, as (ids, one image per row) """
    if not os.path.isdir(directory):
        raise StorageException(f"{directory}: not a directory")
    names = sorted(name for name in os.listdir(directory) if name.lower().endswith(".png"))
    images = [load_png(os.path.join(directory, name)).numpy() for name in names]
    sizes = {image.size for image in images}
    if len(sizes) > 1:
        raise ImageFormatException(f"{directory}: images differ in size {sorted(sizes)}")
    ids = [os.path.splitext(name)[0] for name in names]
    data = np.stack(images).astype(get_default_dtype()) if images else np.zeros((0, 0))
    return ids, data


def write_csv(path, fields: Sequence[str], rows: Iterable[Dict]):
    with atomic_write(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({name: row[name] for name in fields})
    _LOGGER.info("Wrote %s", path)


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise StorageException(f"{path}: CSV has no header row")
        return list(reader)


def write_text(path, text: str):
    with atomic_write(path, "w", encoding="utf-8") as handle:
        handle.write(text)
    _LOGGER.info("Wrote %s", path)


def params_document(generator: WatermarkGenerator, params: WatermarkParams) -> Dict:
    placement = generator.placement(params)
    return {
        "glyph": params.glyph,
        "raw_left": params.raw_left,
        "raw_bottom": params.raw_bottom,
        "log_scale": params.log_scale,
        "latent": list(params.latent) if params.latent is not None else None,
        "p_left": placement["p_left"],
        "p_bottom": placement["p_bottom"],
        "side_fraction": placement["side_fraction"],
    }


def write_params(path, generator: WatermarkGenerator, params: WatermarkParams):
    with atomic_write(path, "w", encoding="utf-8") as handle:
        json.dump(params_document(generator, params), handle, indent=2)
    _LOGGER.info("Wrote %s", path)


def read_params(path) -> WatermarkParams:
    with open(path, encoding="utf-8") as handle:
        try:
            document = json.load(handle)
        except json.JSONDecodeError as err:
            raise StorageException(f"{path}: not a params file ({err})") from err
    try:
        latent = document.get("latent")
        return WatermarkParams(
            document["glyph"],
            float(document["raw_left"]),
            float(document["raw_bottom"]),
            float(document["log_scale"]),
            tuple(float(v) for v in latent) if latent is not None else None,
        )
    except (KeyError, TypeError, ValueError) as err:
        raise StorageException(f"{path}: malformed params file ({err})") from err


def write_report(path, report: MetricsReport):
    write_csv(path, REPORT_FIELDS, report.rows)


def read_report(path) -> MetricsReport:
    rows = read_csv(path)
    try:
        return MetricsReport([MetricsRow.from_dict(row) for row in rows])
    except ValueError as err:
        raise StorageException(f"{path}: malformed report row ({err})") from err
