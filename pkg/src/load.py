"""
Dataset ingestion: paired image / mask folders decoded through a colour map,
colour map tables, and the synthetic scene generator.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib.colors as plt_colours
import numpy as np
import pandas as pd
from PIL import Image

from src.errors import ConfigurationError, IngestionError, NumericalFailureError
from src.metrics import to_8bit
from src.segmentation import ColorMap, SegmentationMap, pack_rgb
from src.utils import check_file_for_duplicates, derive_seed

logger = logging.getLogger(__name__)

IMAGE_FOLDER = "images"
MASK_FOLDER = "masks"
MIN_CLASS_FRACTION = 0.05
MAX_CLASS_FRACTION = 0.95


@dataclass
class Scene:
    """An H x W x 3 image in [0, 1] with its ground-truth class map."""

    image: np.ndarray
    seg_map: SegmentationMap
    name: str = ""


def read_image(path: Path) -> np.ndarray:
    """Lossless raster to H x W x 3 floats in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_image(image: np.ndarray, path: Path) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_8bit(image)
    Image.fromarray(image).save(path, format="PNG")


def load_colormap(path: Path) -> ColorMap:
    """
    Reads a colour table with one "class_id R G B" row per class.

    Args:
        path: whitespace separated table, '#' starts a comment

    Returns:
        ColorMap

    Raises:
        ConfigurationError if a class id or colour appears twice or a channel
        value is outside [0, 255]
    """
    try:
        df = pd.read_csv(
            path, sep=r"\s+", comment="#", header=None, names=["class_id", "r", "g", "b"]
        )
    except pd.errors.EmptyDataError:
        df = pd.DataFrame()
    if df.empty:
        raise ConfigurationError(f"Colour map file {path} has no rows")
    if df.isna().any().any():
        raise ConfigurationError(f"Colour map file {path} has incomplete rows")
    df = df.astype(int)
    if ((df[["r", "g", "b"]] < 0) | (df[["r", "g", "b"]] > 255)).any().any():
        raise ConfigurationError(f"Colour map file {path} has channel values outside [0, 255]")
    check_file_for_duplicates(df, str(path), "class_id")
    df["packed"] = pack_rgb(df[["r", "g", "b"]].to_numpy())
    check_file_for_duplicates(df, str(path), "packed")
    colors = {int(row.class_id): (int(row.r), int(row.g), int(row.b)) for row in df.itertuples()}
    logger.info(f"Loaded {len(colors)} classes from {path}")
    return ColorMap(colors)


def load_dataset(
    path: Path,
    colormap: ColorMap,
    allowed_extensions: Sequence[str] = (".png", ".bmp", ".tif", ".tiff"),
) -> List[Scene]:
    """
    Loads <path>/images/<stem>.* paired with <path>/masks/<stem>.*.

    Parameters
    ----------
    path : Path
        Dataset root.
    colormap : ColorMap
        Decodes the colour-indexed masks.
    allowed_extensions : list of str, optional
        Lossless raster suffixes to pick up.

    Returns
    -------
    List[Scene]
        Pairs sorted by stem; an empty list (with a warning) for an empty root.

    Raises
    ------
    IngestionError
        Naming the file for a missing partner, a size mismatch or a mask colour
        absent from the colour map.
    """
    root = Path(path)

    def _by_stem(folder: Path) -> Dict[str, Path]:
        if not folder.is_dir():
            return {}
        files = sorted(f for f in folder.iterdir() if f.is_file() and f.suffix.lower() in allowed_extensions)
        stems: Dict[str, Path] = {}
        for f in files:
            if f.stem in stems:
                raise IngestionError(f"Two files share the stem '{f.stem}': {stems[f.stem]}, {f}")
            stems[f.stem] = f
        return stems

    images = _by_stem(root / IMAGE_FOLDER)
    masks = _by_stem(root / MASK_FOLDER)
    if not images and not masks:
        logger.warning(f"No images or masks found under {root}")
        return []

    for stem in sorted(set(images) ^ set(masks)):
        orphan = images.get(stem, masks.get(stem))
        raise IngestionError(f"{orphan} has no matching {'mask' if stem in images else 'image'}")

    scenes = []
    for stem in sorted(images):
        image = read_image(images[stem])
        rgb = read_rgb(masks[stem])
        if rgb.shape != image.shape:
            raise IngestionError(
                f"Mask {masks[stem]} is {rgb.shape[:2]} but image is {image.shape[:2]}"
            )
        try:
            seg_map = colormap.decode(rgb, source=str(masks[stem]))
        except ConfigurationError as e:
            raise IngestionError(str(e)) from e
        scenes.append(Scene(image, seg_map, stem))
    logger.info(f"Loaded {len(scenes)} image / mask pairs from {root}")
    return scenes


def _class_colours(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Well separated base colours: evenly spaced hues with a random offset."""
    hues = (np.arange(num_classes) / num_classes + rng.uniform(0, 1)) % 1.0
    values = np.where(np.arange(num_classes) % 2 == 0, 0.85, 0.55)
    hsv = np.stack([hues, np.full(num_classes, 0.75), values], axis=1)
    return plt_colours.hsv_to_rgb(hsv)


def _draw_layout(size: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    classes = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for k in range(1, num_classes):
        for _ in range(int(rng.integers(1, 3))):
            cy, cx = rng.uniform(0, size, size=2)
            ry, rx = rng.uniform(0.12, 0.35, size=2) * size
            if rng.uniform() < 0.5:
                shape = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            else:
                shape = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            classes[shape] = k
    return classes


def generate_synthetic(n: int, size: int, num_classes: int, seed: int) -> List[Scene]:
    """
    Renders textured scenes of geometric shapes on a background class.

    Every class covers between 5% and 95% of each scene, and pixel values lie
    on the 8-bit grid so the scenes survive PNG round trips unchanged.

    Parameters
    ----------
    n : int
        Number of scenes.
    size : int
        Image side; divisible by 8.
    num_classes : int
        K >= 2; class 0 is the background.
    seed : int
        Scenes are bitwise reproducible per seed.

    Returns
    -------
    List[Scene]
    """
    if n < 1:
        raise ConfigurationError(f"Number of scenes must be >= 1, got {n}")
    if size < 8 or size % 8:
        raise ConfigurationError(f"Scene size must be a positive multiple of 8, got {size}")
    if num_classes < 2:
        raise ConfigurationError(f"Need at least 2 classes, got {num_classes}")
    if num_classes * MIN_CLASS_FRACTION > 1:
        raise ConfigurationError(
            f"{num_classes} classes cannot each cover {MIN_CLASS_FRACTION:.0%} of a scene"
        )

    scenes = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, i))
        for _ in range(1000):
            classes = _draw_layout(size, num_classes, rng)
            fractions = np.bincount(classes.ravel(), minlength=num_classes) / classes.size
            if fractions.min() >= MIN_CLASS_FRACTION and fractions.max() <= MAX_CLASS_FRACTION:
                break
        else:
            raise NumericalFailureError(
                f"Could not lay out scene {i} with every class in "
                f"[{MIN_CLASS_FRACTION:.0%}, {MAX_CLASS_FRACTION:.0%}]",
                details={"scene": i, "seed": seed},
            )

        colours = _class_colours(num_classes, rng)
        yy, xx = np.mgrid[0:size, 0:size] / size
        image = colours[classes].copy()
        for k in range(num_classes):
            freq = rng.uniform(2.0, 6.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            stripes = 0.06 * np.sin(2 * np.pi * (freq[0] * yy + freq[1] * xx) + phase)
            region = classes == k
            image[region] += stripes[region][:, None]
        image += rng.normal(0.0, 0.03, size=image.shape)
        image = to_8bit(np.clip(image, 0.0, 1.0)).astype(np.float64) / 255.0
        scenes.append(Scene(image, SegmentationMap(classes, num_classes), f"scene_{i:04d}"))

    logger.info(f"Generated {n} synthetic {size}x{size} scenes over {num_classes} classes")
    return scenes
