"""
Helpers shared by the trainable networks: initialisation, batching, tensor
conversion, freezing and finiteness checks.
"""
import logging
from typing import Dict, Iterable, List, Sequence

import numpy as np
import torch
from torch import nn

from src.errors import ConfigurationError, NumericalFailureError

logger = logging.getLogger(__name__)


def init_weights(module: nn.Module) -> None:
    """Xavier-uniform weights and zero biases for every conv / linear layer."""
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.xavier_uniform_(layer.weight)
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)


def check_finite(module: nn.Module, name: str) -> None:
    for param_name, value in module.state_dict().items():
        if value.is_floating_point() and not torch.isfinite(value).all():
            raise NumericalFailureError(
                f"{name} has non-finite values in '{param_name}'",
                details={"parameter": param_name},
            )


def set_requires_grad(module: nn.Module, requires_grad: bool) -> None:
    """Recursively set requires_grad for all parameters in a module."""
    for p in module.parameters():
        p.requires_grad = requires_grad


def snapshot(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def minibatches(n: int, batch_size: int, generator: torch.Generator) -> List[torch.Tensor]:
    """Shuffled index batches covering range(n) once."""
    if n == 0:
        raise ConfigurationError("Cannot train on an empty dataset")
    order = torch.randperm(n, generator=generator)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def images_to_tensor(images: Iterable[np.ndarray]) -> torch.Tensor:
    """Stacks H x W x 3 images in [0, 1] into a (B, 3, H, W) float32 tensor."""
    stacked = np.stack([np.asarray(image, dtype=np.float32) for image in images])
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def tensor_to_images(batch: torch.Tensor) -> List[np.ndarray]:
    array = batch.detach().permute(0, 2, 3, 1).to(torch.float64).numpy()
    return [a.copy() for a in array]


def as_float_image(image: np.ndarray) -> np.ndarray:
    """8-bit images are mapped to [0, 1]; float images pass through."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def mean_loss(losses: Sequence[float]) -> float:
    return float(np.mean(losses)) if len(losses) else float("nan")
