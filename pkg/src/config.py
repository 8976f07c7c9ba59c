"""
Purpose of the script: validates the experiment config into frozen dataclasses
"""
import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Tuple

import src.params as params
from src.channel import ChannelParams
from src.channel_codec import SnrThresholds
from src.errors import ConfigurationError
from src.selection import BlurPolicy, TaskSpec
from src.utils import get_config

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "LOCATION": {
        "output_dir": "outputs",
        "checkpoint_dir": "outputs/checkpoints",
        "hash_length": 5,
    },
    "DATASET": {
        "source": "synthetic",
        "path": "data",
        "colormap_file": "",
        "n_scenes": 32,
        "image_size": 64,
        "num_classes": 3,
        "seed": 7,
    },
    "CHANNEL": {
        "b0": params.default_b0,
        "m": params.default_m,
        "omega": params.default_omega,
        "snr_db_min": params.default_snr_db_min,
        "snr_db_max": params.default_snr_db_max,
        "equalize": True,
    },
    "THRESHOLDS": {
        "gamma1_db": params.default_gamma1_db,
        "gamma2_db": params.default_gamma2_db,
    },
    "TASK": {"task_classes": [1], "background_fill": [0, 0, 0]},
    "BLUR_POLICY": {
        "thresholds": list(params.default_blur_thresholds),
        "kernels": list(params.default_blur_kernels),
    },
    "TRAINING": {
        "learning_rate": params.learning_rate,
        "batch_size": params.batch_size,
        "epochs": 5,
        "stage_epochs": 5,
        "weight_decay": params.weight_decay,
        "seed": 0,
        "joint_finetune": False,
    },
    "SEGMENTATION": {"widths": list(params.segnet_widths)},
    "SEMANTIC_CODEC": {
        "patch_size": params.patch_size,
        "window": params.window_size,
        "embed_dim": params.embed_dim,
        "depths": list(params.stage_depths),
        "heads": list(params.stage_heads),
        "latent_channels": params.latent_channels,
        "shift_windows": True,
    },
    "EVALUATOR": {"alpha": 0.05, "epochs": 5000},
    "SWEEP": {"snr_grid": [-10.0, -5.0, 0.0, 5.0, 10.0], "workers": 1},
    "ABLATION": {
        "stacking_snrs": [-10.0, -8.0, -6.0, -4.0],
        "selection_snr_db": 10.0,
        "selection_tier_kernel": 9,
    },
}


@dataclass(frozen=True)
class LocationConfig:
    output_dir: str
    checkpoint_dir: str
    hash_length: int


@dataclass(frozen=True)
class DatasetConfig:
    source: str
    path: str
    colormap_file: str
    n_scenes: int
    image_size: int
    num_classes: int
    seed: int


@dataclass(frozen=True)
class ChannelConfig:
    params: ChannelParams
    snr_db_min: float
    snr_db_max: float
    equalize: bool

    @property
    def snr_range(self) -> Tuple[float, float]:
        return (self.snr_db_min, self.snr_db_max)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = params.learning_rate
    batch_size: int = params.batch_size
    epochs: int = 5
    stage_epochs: int = 5
    weight_decay: float = params.weight_decay
    seed: int = 0
    joint_finetune: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.stage_epochs < 0:
            raise ConfigurationError("epochs and stage_epochs must be >= 0")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class SemanticCodecConfig:
    patch_size: int = params.patch_size
    window: int = params.window_size
    embed_dim: int = params.embed_dim
    depths: Tuple[int, ...] = tuple(params.stage_depths)
    heads: Tuple[int, ...] = tuple(params.stage_heads)
    latent_channels: int = params.latent_channels
    shift_windows: bool = True

    @property
    def downsampling(self) -> int:
        return self.patch_size * 2


@dataclass(frozen=True)
class EvaluatorConfig:
    alpha: float
    epochs: int


@dataclass(frozen=True)
class SweepConfig:
    snr_grid: Tuple[float, ...]
    workers: int


@dataclass(frozen=True)
class AblationConfig:
    stacking_snrs: Tuple[float, ...]
    selection_snr_db: float
    selection_tier_kernel: int


@dataclass(frozen=True)
class ExperimentConfig:
    location: LocationConfig
    dataset: DatasetConfig
    channel: ChannelConfig
    thresholds: SnrThresholds
    task: TaskSpec
    blur_policy: BlurPolicy
    training: TrainingConfig
    segnet_widths: Tuple[int, ...]
    semantic_codec: SemanticCodecConfig
    evaluator: EvaluatorConfig
    sweep: SweepConfig
    ablation: AblationConfig
    resolved: Dict[str, Dict[str, Any]]

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Resolved config, loadable again by load_experiment_config."""
        return copy.deepcopy(self.resolved)


def resolve(raw: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Merges a raw config over the defaults, rejecting unknown sections and keys."""
    if "CONFIG" in raw:
        raw = raw["CONFIG"]
    unknown_sections = sorted(set(raw) - set(DEFAULTS))
    if unknown_sections:
        raise ConfigurationError(
            f"Unknown config sections {unknown_sections}; expected {sorted(DEFAULTS)}"
        )
    resolved = {}
    for section, defaults in DEFAULTS.items():
        given = raw.get(section, {})
        unknown = sorted(set(given) - set(defaults))
        if unknown:
            raise ConfigurationError(f"Unknown keys {unknown} in config section [{section}]")
        resolved[section] = {**copy.deepcopy(defaults), **given}
    return resolved


def _positive(section: str, key: str, value) -> None:
    if value < 1:
        raise ConfigurationError(f"[{section}] {key} must be >= 1, got {value}")


def _floats(values) -> Tuple[float, ...]:
    return tuple(float(v) for v in values)


def build_experiment_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """
    Validates a raw config dictionary into an ExperimentConfig

    Parameters
    ----------
    raw : dict
        Parsed config.toml, or a manifest holding a [CONFIG] table

    Returns
    -------
    ExperimentConfig

    Raises
    ------
    ConfigurationError
        If any section holds an invalid value
    """
    cfg = resolve(raw)

    loc = cfg["LOCATION"]
    _positive("LOCATION", "hash_length", loc["hash_length"])
    location = LocationConfig(str(loc["output_dir"]), str(loc["checkpoint_dir"]), int(loc["hash_length"]))

    ds = cfg["DATASET"]
    if ds["source"] not in ("synthetic", "directory"):
        raise ConfigurationError(
            f"[DATASET] source must be 'synthetic' or 'directory', got {ds['source']!r}"
        )
    _positive("DATASET", "n_scenes", ds["n_scenes"])
    if ds["num_classes"] < 2:
        raise ConfigurationError(f"[DATASET] num_classes must be >= 2, got {ds['num_classes']}")
    dataset = DatasetConfig(
        ds["source"],
        str(ds["path"]),
        str(ds["colormap_file"]),
        int(ds["n_scenes"]),
        int(ds["image_size"]),
        int(ds["num_classes"]),
        int(ds["seed"]),
    )

    ch = cfg["CHANNEL"]
    if not ch["snr_db_min"] < ch["snr_db_max"]:
        raise ConfigurationError("[CHANNEL] snr_db_min must be below snr_db_max")
    channel = ChannelConfig(
        ChannelParams(float(ch["b0"]), float(ch["m"]), float(ch["omega"])),
        float(ch["snr_db_min"]),
        float(ch["snr_db_max"]),
        bool(ch["equalize"]),
    )
    thresholds = SnrThresholds(
        float(cfg["THRESHOLDS"]["gamma1_db"]),
        float(cfg["THRESHOLDS"]["gamma2_db"]),
        channel.snr_db_min,
        channel.snr_db_max,
    )

    task = TaskSpec(frozenset(cfg["TASK"]["task_classes"]), tuple(cfg["TASK"]["background_fill"]))
    task.check_classes(dataset.num_classes)
    blur_policy = BlurPolicy.from_lists(
        cfg["BLUR_POLICY"]["thresholds"], cfg["BLUR_POLICY"]["kernels"]
    )

    training = TrainingConfig(**cfg["TRAINING"])

    widths = tuple(int(w) for w in cfg["SEGMENTATION"]["widths"])
    if len(widths) != 3:
        raise ConfigurationError(f"[SEGMENTATION] widths needs 3 entries, got {list(widths)}")

    sc = cfg["SEMANTIC_CODEC"]
    semantic_codec = SemanticCodecConfig(
        int(sc["patch_size"]),
        int(sc["window"]),
        int(sc["embed_dim"]),
        tuple(int(d) for d in sc["depths"]),
        tuple(int(h) for h in sc["heads"]),
        int(sc["latent_channels"]),
        bool(sc["shift_windows"]),
    )
    for dim, heads in zip((semantic_codec.embed_dim, 2 * semantic_codec.embed_dim), semantic_codec.heads):
        if dim % heads:
            raise ConfigurationError(
                f"[SEMANTIC_CODEC] width {dim} is not divisible by {heads} heads"
            )

    divisor = max(2 ** len(widths), semantic_codec.downsampling)
    if dataset.image_size % divisor:
        raise ConfigurationError(
            f"[DATASET] image_size {dataset.image_size} must be divisible by {divisor}"
        )

    ev = cfg["EVALUATOR"]
    if ev["alpha"] <= 0:
        raise ConfigurationError(f"[EVALUATOR] alpha must be > 0, got {ev['alpha']}")
    evaluator = EvaluatorConfig(float(ev["alpha"]), int(ev["epochs"]))

    sw = cfg["SWEEP"]
    _positive("SWEEP", "workers", sw["workers"])
    sweep = SweepConfig(_floats(sw["snr_grid"]), int(sw["workers"]))

    ab = cfg["ABLATION"]
    ablation = AblationConfig(
        _floats(ab["stacking_snrs"]),
        float(ab["selection_snr_db"]),
        int(ab["selection_tier_kernel"]),
    )
    blur_policy.tier_with_kernel(ablation.selection_tier_kernel)

    return ExperimentConfig(
        location,
        dataset,
        channel,
        thresholds,
        task,
        blur_policy,
        training,
        widths,
        semantic_codec,
        evaluator,
        sweep,
        ablation,
        cfg,
    )


def load_experiment_config(path: str = "config.toml") -> ExperimentConfig:
    """Loads config.toml, or a previous run's manifest.toml, into an ExperimentConfig."""
    raw = get_config(path)
    config = build_experiment_config(raw)
    logger.info(f"Loaded experiment config from {Path(path)}")
    return config


def snr_grid_in_range(grid: List[float], config: ExperimentConfig) -> None:
    if len(grid) == 0:
        raise ConfigurationError("SNR grid is empty")
    low, high = config.channel.snr_range
    outside = [g for g in grid if not low <= g <= high]
    if outside:
        raise ConfigurationError(f"SNR grid values {outside} lie outside [{low}, {high}] dB")
