"""
Semantic segmentation: a compact SegNet with index-tracked pooling, colour
mapping of class maps and SME neighbourhood-majority refinement.
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

import src.params as params
from src.errors import ConfigurationError, ShapeError
from src.training import (
    as_float_image,
    check_finite,
    images_to_tensor,
    init_weights,
    mean_loss,
    minibatches,
)
from src.utils import seed_everything

if TYPE_CHECKING:
    from src.config import TrainingConfig

logger = logging.getLogger(__name__)


@dataclass
class SegmentationMap:
    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.classes.ndim != 2:
            raise ShapeError(f"Class map must be H x W, got {self.classes.shape}")
        if self.classes.size and (
            self.classes.min() < 0 or self.classes.max() >= self.num_classes
        ):
            raise ConfigurationError(
                f"Class ids must lie in [0, {self.num_classes}), "
                f"found [{self.classes.min()}, {self.classes.max()}]"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.classes.shape


def pack_rgb(rgb: np.ndarray) -> np.ndarray:
    """Packs R, G, B into one integer per pixel (R << 16 | G << 8 | B)."""
    rgb = np.asarray(rgb).astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def unpack_rgb(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    return np.stack(
        [(packed >> 16) & 0xFF, (packed >> 8) & 0xFF, packed & 0xFF], axis=-1
    ).astype(np.uint8)


@dataclass(frozen=True)
class ColorMap:
    """Bijection between class ids and RGB triples."""

    colors: Dict[int, Tuple[int, int, int]] = field(default_factory=dict)

    def __post_init__(self):
        packed = [int(pack_rgb(np.array(c))) for c in self.colors.values()]
        if len(set(packed)) != len(packed):
            raise ConfigurationError("Colour map assigns one colour to two classes")

    @property
    def num_classes(self) -> int:
        return len(self.colors)

    def color_of(self, class_id: int) -> Tuple[int, int, int]:
        if class_id not in self.colors:
            raise ConfigurationError(f"Class id {class_id} missing from colour map")
        return self.colors[class_id]

    def decode(self, rgb: np.ndarray, source: str = "image") -> SegmentationMap:
        """Inverse lookup of an RGB image into a class map."""
        packed = pack_rgb(rgb)
        lookup = {int(pack_rgb(np.array(c))): k for k, c in self.colors.items()}
        unique = np.unique(packed)
        unknown = [u for u in unique if int(u) not in lookup]
        if unknown:
            colour = tuple(int(v) for v in unpack_rgb(np.array(unknown[0])))
            raise ConfigurationError(
                f"Colour {colour} in {source} is not in the colour map"
            )
        keys = np.array(sorted(lookup))
        values = np.array([lookup[k] for k in keys])
        classes = values[np.searchsorted(keys, packed)]
        return SegmentationMap(classes, max(self.colors) + 1)


def default_colormap(num_classes: int) -> ColorMap:
    """Well-separated colours for synthetic scenes."""
    palette = [
        (0, 0, 0),
        (255, 0, 0),
        (0, 255, 0),
        (0, 0, 255),
        (255, 255, 0),
        (255, 0, 255),
        (0, 255, 255),
        (255, 255, 255),
    ]
    if num_classes <= len(palette):
        return ColorMap({k: palette[k] for k in range(num_classes)})
    rng = np.random.default_rng(num_classes)
    colors: Dict[int, Tuple[int, int, int]] = {}
    seen = set()
    for k in range(num_classes):
        while True:
            colour = tuple(int(v) for v in rng.integers(0, 256, size=3))
            if colour not in seen:
                break
        seen.add(colour)
        colors[k] = colour
    return ColorMap(colors)


@dataclass
class PooledIndices:
    """Argmax positions recorded by each 2 x 2 pooling, with pre-pool sizes."""

    indices: List[torch.Tensor]
    sizes: List[torch.Size]


def max_pool_with_indices(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """2 x 2 max pooling; ties resolve to the first (lowest linear) index."""
    return F.max_pool2d(x, kernel_size=2, stride=2, return_indices=True)


def max_unpool(x: torch.Tensor, indices: torch.Tensor, size: torch.Size) -> torch.Tensor:
    """Places each value at its recorded index, zeros elsewhere."""
    if x.shape != indices.shape:
        raise ShapeError(f"Unpool input {tuple(x.shape)} vs indices {tuple(indices.shape)}")
    b, c, h, w = size
    flat = x.new_zeros(b, c, h * w)
    flat = flat.scatter(2, indices.flatten(2), x.flatten(2))
    return flat.view(b, c, h, w)


class SegNet(nn.Module):
    """
    Three conv + ReLU encoder stages with index-tracked pooling, two mirrored
    transposed-conv + ReLU decoder stages and a conv classifier over K classes.

    Args:
        num_classes (int): number of classes to segment
        widths (list of 3 ints): output channels of each encoder stage
        in_channels (int): channels of the input image
    """

    def __init__(
        self,
        num_classes: int,
        widths: Sequence[int] = tuple(params.segnet_widths),
        in_channels: int = 3,
    ):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(f"Need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.widths = list(widths)

        channels = [in_channels] + self.widths
        self.encoders = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(channels[i], channels[i + 1], kernel_size=3, padding=1),
                nn.ReLU(),
            )
            for i in range(len(self.widths))
        )
        self.decoders = nn.ModuleList(
            nn.Sequential(
                nn.ConvTranspose2d(channels[i + 1], channels[i], kernel_size=3, padding=1),
                nn.ReLU(),
            )
            for i in reversed(range(1, len(self.widths)))
        )
        self.classifier = nn.Conv2d(self.widths[0], num_classes, kernel_size=3, padding=1)
        init_weights(self)

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.widths)

    def encode(self, x: torch.Tensor) -> Tuple[torch.Tensor, PooledIndices]:
        _, _, h, w = x.shape
        if h % self.downsampling or w % self.downsampling:
            raise ShapeError(
                f"Image sides must be divisible by {self.downsampling}, got {h} x {w}"
            )
        indices, sizes = [], []
        for encoder in self.encoders:
            x = encoder(x)
            sizes.append(x.size())
            x, idx = max_pool_with_indices(x)
            indices.append(idx)
        return x, PooledIndices(indices, sizes)

    def decode(self, x: torch.Tensor, pooled: PooledIndices) -> torch.Tensor:
        if len(pooled.indices) != len(self.encoders):
            raise ShapeError(
                f"Expected {len(self.encoders)} pooling records, got {len(pooled.indices)}"
            )
        stages = list(self.decoders) + [self.classifier]
        for stage, idx, size in zip(
            stages, reversed(pooled.indices), reversed(pooled.sizes)
        ):
            x = stage(max_unpool(x, idx, size))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features, pooled = self.encode(x)
        return self.decode(features, pooled)


def _image_batch(image: np.ndarray) -> torch.Tensor:
    return images_to_tensor([as_float_image(image)])


def encode_features(image: np.ndarray, model: SegNet) -> Tuple[torch.Tensor, PooledIndices]:
    with torch.no_grad():
        return model.encode(_image_batch(image))


def decode_and_classify(
    features: torch.Tensor, pooled: PooledIndices, model: SegNet
) -> torch.Tensor:
    """Per-pixel class probabilities (B, K, H, W); softmax over K."""
    with torch.no_grad():
        return torch.softmax(model.decode(features, pooled), dim=1)


def segment(image: np.ndarray, model: SegNet) -> SegmentationMap:
    check_finite(model, "segmentation network")
    model.eval()
    features, pooled = encode_features(image, model)
    probabilities = decode_and_classify(features, pooled, model)
    classes = torch.argmax(probabilities[0], dim=0).numpy()
    return SegmentationMap(classes, model.num_classes)


def colorize(seg_map: SegmentationMap, colors: ColorMap) -> np.ndarray:
    """Pixel-wise colour lookup of a class map into an 8-bit RGB image."""
    present = np.unique(seg_map.classes)
    table = np.zeros((seg_map.num_classes, 3), dtype=np.uint8)
    for class_id in present:
        table[class_id] = colors.color_of(int(class_id))
    return table[seg_map.classes]


def sme_refine(rgb_map: np.ndarray) -> np.ndarray:
    """
    Segmentation model enhancement: replaces each interior pixel by the colour
    shared by at least 7 of its 8 neighbours.

    Neighbour counts are read from the input; the result is written to a copy,
    so replacements never cascade. Border pixels are left unchanged.

    Parameters
    ----------
    rgb_map : np.ndarray
        H x W x 3 colour segmentation map, H, W >= 3.

    Returns
    -------
    np.ndarray
        Refined copy of the map.
    """
    rgb_map = np.asarray(rgb_map)
    if rgb_map.ndim != 3 or rgb_map.shape[2] < 3:
        raise ShapeError(f"SME needs an H x W x 3 image, got {rgb_map.shape}")
    h, w = rgb_map.shape[:2]
    if h < 3 or w < 3:
        raise ShapeError(f"SME needs at least a 3 x 3 image, got {h} x {w}")

    refined = rgb_map.copy()
    packed = pack_rgb(rgb_map[..., :3])
    offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    neighbours = np.stack(
        [packed[1 + di : h - 1 + di, 1 + dj : w - 1 + dj] for di, dj in offsets]
    )

    # a colour held by >= 7 of 8 neighbours is necessarily neighbour 0 or 1
    winner = np.full(neighbours.shape[1:], -1, dtype=np.int64)
    for candidate in (neighbours[0], neighbours[1]):
        count = (neighbours == candidate).sum(axis=0)
        winner = np.where((count >= params.sme_threshold) & (winner < 0), candidate, winner)

    replace = winner >= 0
    interior = refined[1 : h - 1, 1 : w - 1]
    interior[replace, :3] = unpack_rgb(winner[replace]).astype(rgb_map.dtype)
    return refined


def train_segnet(
    dataset: Sequence[Tuple[np.ndarray, SegmentationMap]],
    config: "TrainingConfig",
    num_classes: int,
    widths: Sequence[int] = tuple(params.segnet_widths),
) -> Tuple[SegNet, List[float]]:
    """
    Trains the segmentation network with per-pixel cross-entropy.

    Parameters
    ----------
    dataset : list of (image, SegmentationMap)
        Labelled training scenes.
    config : TrainingConfig
        Learning rate, batch size, epochs and seed.
    num_classes : int
        K.
    widths : list of int, optional
        Encoder stage widths.

    Returns
    -------
    (SegNet, List[float])
        Trained network and the training-set loss before training followed by
        the loss after each epoch.
    """
    if len(dataset) == 0:
        raise ConfigurationError("Segmentation training set is empty")
    seed_everything(config.seed)
    model = SegNet(num_classes, widths)
    images = images_to_tensor([as_float_image(image) for image, _ in dataset])
    targets = torch.from_numpy(np.stack([m.classes for _, m in dataset]))

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    criterion = nn.CrossEntropyLoss()
    generator = torch.Generator().manual_seed(config.seed)

    def _dataset_loss() -> float:
        with torch.no_grad():
            return float(criterion(model(images), targets))

    history = [_dataset_loss()]
    logger.info(f"Segmentation initial loss {history[0]:.5f}")
    for epoch in range(config.epochs):
        model.train()
        batch_losses = []
        for batch in minibatches(len(dataset), config.batch_size, generator):
            optimizer.zero_grad()
            loss = criterion(model(images[batch]), targets[batch])
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss))
        history.append(_dataset_loss())
        logger.info(
            f"Segmentation epoch {epoch + 1}/{config.epochs}: "
            f"batch loss {mean_loss(batch_losses):.5f}, set loss {history[-1]:.5f}"
        )
    check_finite(model, "segmentation network")
    model.eval()
    return model, history
