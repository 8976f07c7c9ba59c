"""
Transmission-effect evaluator: a linear regressor predicting task-region
recovery quality from a task feature and a channel feature, fitted by
full-batch gradient descent on the mean squared error.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.preprocessing import MinMaxScaler

import src.params as params
from src.errors import ConfigurationError, IngestionError, NumericalFailureError, ShapeError

if TYPE_CHECKING:
    from src.segmentation import SegmentationMap
    from src.selection import TaskSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalFeatures:
    x_s: float
    x_c: float

    def __post_init__(self):
        if not (np.isfinite(self.x_s) and np.isfinite(self.x_c)):
            raise ConfigurationError(f"Features must be finite, got ({self.x_s}, {self.x_c})")

    def design_row(self) -> np.ndarray:
        return np.array([1.0, self.x_s, self.x_c])


@dataclass(frozen=True)
class EvalModel:
    w0: float
    w1: float
    w2: float
    alpha: float = 0.0

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.w0, self.w1, self.w2])

    @classmethod
    def from_weights(cls, weights: Sequence[float], alpha: float = 0.0) -> "EvalModel":
        w0, w1, w2 = (float(w) for w in weights)
        return cls(w0, w1, w2, alpha)


@dataclass(frozen=True)
class TrainSample:
    features: EvalFeatures
    y: float

    def __post_init__(self):
        if not np.isfinite(self.y):
            raise ConfigurationError(f"Training target must be finite, got {self.y}")


def predict(model: EvalModel, f: EvalFeatures) -> float:
    """y_hat = w0 + w1 x_s + w2 x_c"""
    return model.w0 + model.w1 * f.x_s + model.w2 * f.x_c


def _design(samples: Sequence[TrainSample]) -> Tuple[np.ndarray, np.ndarray]:
    if len(samples) == 0:
        raise ConfigurationError("Evaluator needs at least one training sample")
    x = np.stack([s.features.design_row() for s in samples])
    y = np.array([s.y for s in samples], dtype=np.float64)
    return x, y


def loss(model: EvalModel, samples: Sequence[TrainSample]) -> float:
    """Mean squared error of the model over the samples."""
    x, y = _design(samples)
    residuals = y - x @ model.weights
    return float(np.mean(residuals**2))


def gradient(model: EvalModel, samples: Sequence[TrainSample]) -> Tuple[float, float, float]:
    """g_j = -(2 / N) sum_i x_ij (y_i - y_hat_i), with x_i0 = 1."""
    x, y = _design(samples)
    residuals = y - x @ model.weights
    g = -2.0 / len(y) * (x.T @ residuals)
    return float(g[0]), float(g[1]), float(g[2])


def init_model(seed: int, alpha: float = 0.0) -> EvalModel:
    rng = np.random.default_rng(seed)
    return EvalModel.from_weights(rng.normal(0.0, 0.01, size=3), alpha)


def descend(
    samples: Sequence[TrainSample], model: EvalModel, alpha: float, epochs: int
) -> Tuple[EvalModel, List[float]]:
    """
    Runs `epochs` full-batch gradient descent steps from `model`.

    Returns
    -------
    (EvalModel, List[float])
        Final model and the loss before each step followed by the final loss.
    """
    if alpha < 0:
        raise ConfigurationError(f"Learning rate alpha must be >= 0, got {alpha}")
    weights = model.weights
    history = []
    for _ in range(epochs):
        current = EvalModel.from_weights(weights, alpha)
        history.append(loss(current, samples))
        weights = weights - alpha * np.array(gradient(current, samples))
        if not np.all(np.isfinite(weights)) or not np.isfinite(history[-1]):
            raise NumericalFailureError(
                f"Evaluator diverged with learning rate alpha={alpha}; try a smaller alpha",
                details={"alpha": alpha},
            )
    fitted = EvalModel.from_weights(weights, alpha)
    history.append(loss(fitted, samples))
    if not np.isfinite(history[-1]):
        raise NumericalFailureError(
            f"Evaluator diverged with learning rate alpha={alpha}; try a smaller alpha",
            details={"alpha": alpha},
        )
    return fitted, history


def fit(
    samples: Sequence[TrainSample], alpha: float, epochs: int, seed: int
) -> EvalModel:
    """
    Fits the evaluator weights by gradient descent.

    Parameters
    ----------
    samples : list of TrainSample
        At least 3 samples.
    alpha : float
        Learning rate.
    epochs : int
        Number of full-batch steps.
    seed : int
        Seed of the small random initial weights.

    Returns
    -------
    EvalModel
        Fitted model carrying alpha.

    Raises
    ------
    NumericalFailureError
        If the loss or weights stop being finite.
    """
    if len(samples) < 3:
        raise ConfigurationError(
            f"Evaluator needs at least 3 samples to fit 3 weights, got {len(samples)}"
        )
    model, history = descend(samples, init_model(seed, alpha), alpha, epochs)
    logger.info(
        f"Evaluator fitted on {len(samples)} samples: loss {history[0]:.4f} -> "
        f"{history[-1]:.4f}, weights ({model.w0:.4f}, {model.w1:.4f}, {model.w2:.4f})"
    )
    return model


def normalise_snr(snr_db: float, snr_range: Tuple[float, float]) -> float:
    """Min-max scales an SNR onto [0, 1] over the configured range, clipped."""
    scaler = MinMaxScaler(clip=True)
    scaler.fit(np.array(snr_range, dtype=np.float64).reshape(-1, 1))
    return float(scaler.transform(np.array([[snr_db]], dtype=np.float64))[0, 0])


def extract_features(
    image: np.ndarray,
    seg_map: "SegmentationMap",
    task: "TaskSpec",
    snr_db: float,
    snr_range: Tuple[float, float] = (params.default_snr_db_min, params.default_snr_db_max),
) -> EvalFeatures:
    """x_s is the task-pixel fraction, x_c the normalised SNR."""
    if tuple(seg_map.shape) != tuple(np.shape(image)[:2]):
        raise ShapeError(
            f"Segmentation map {seg_map.shape} does not match image {np.shape(image)[:2]}"
        )
    if len(task.task_classes) == 0:
        raise ConfigurationError("Task set is empty")
    x_s = float(np.isin(seg_map.classes, sorted(task.task_classes)).mean())
    return EvalFeatures(x_s, normalise_snr(snr_db, snr_range))


def save_samples(samples: Sequence[TrainSample], path: Path) -> None:
    df = pd.DataFrame(
        [(s.features.x_s, s.features.x_c, s.y) for s in samples],
        columns=params.eval_sample_columns,
    )
    df.to_csv(path, index=False)


def load_samples(path: Path) -> List[TrainSample]:
    df = pd.read_csv(path)
    missing = set(params.eval_sample_columns) - set(df.columns)
    if missing:
        raise IngestionError(f"Evaluator sample file {path} is missing columns {sorted(missing)}")
    return [
        TrainSample(EvalFeatures(float(row.x_s), float(row.x_c)), float(row.y))
        for row in df.itertuples(index=False)
    ]


def model_to_dict(model: Optional[EvalModel]) -> dict:
    if model is None:
        return {}
    return {"w0": model.w0, "w1": model.w1, "w2": model.w2, "alpha": model.alpha}
