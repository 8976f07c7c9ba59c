"""
End-to-end transmission: segmentation, SME refinement, task-aware selection,
semantic and channel coding, the fading channel, decoding and metrics. Also
holds SNR sweeps, ablations, evaluator harvesting and the run manifest.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import PIL
import toml
import torch
from torch import nn

import src
import src.params as params
from src.channel import NoiseSpec, apply_channel, sample_gain
from src.channel_codec import (
    StackedChannelCodec,
    chan_decode,
    chan_encode,
    select_depth,
    transmit_batch,
)
from src.config import ExperimentConfig, snr_grid_in_range
from src.errors import (
    ConfigurationError,
    InvariantViolationError,
    IrstError,
    PipelineStageError,
    ShapeError,
)
from src.evaluation import EvalFeatures, EvalModel, TrainSample, extract_features, model_to_dict
from src.load import Scene
from src.metrics import MetricsReport, pixel_accuracy, psnr, ssim, to_8bit
from src.report import plot_metric_vs_snr, summarise_sweep, write_table
from src.segmentation import ColorMap, SegmentationMap, SegNet, colorize, segment, sme_refine
from src.selection import SelectedImage, payload_size, select
from src.semantic_codec import SemanticCodec, TokenGrid, sem_decode, sem_encode
from src.training import images_to_tensor, mean_loss, minibatches, set_requires_grad, tensor_to_images
from src.utils import derive_seed, seed_everything

logger = logging.getLogger(__name__)


@dataclass
class Models:
    """
    Component models of one run. With `passthrough` set the semantic and
    channel codecs are bypassed and the selected image itself is sent.
    A missing segmentation network means ground-truth maps are used.
    """

    colormap: ColorMap
    evaluator: EvalModel
    segnet: Optional[SegNet] = None
    sem_codec: Optional[SemanticCodec] = None
    chan_codec: Optional[StackedChannelCodec] = None
    passthrough: bool = False


@dataclass
class TransmissionResult:
    reconstruction: np.ndarray
    report: MetricsReport
    selected: SelectedImage
    features: EvalFeatures
    seg_map: SegmentationMap


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Labels any simulator error raised inside with the pipeline stage."""
    try:
        yield
    except PipelineStageError:
        raise
    except IrstError as e:
        raise PipelineStageError(name, e) from e


def neutral_evaluator(config: ExperimentConfig) -> EvalModel:
    """Constant model predicting the top (no-blur) tier."""
    return EvalModel(config.blur_policy.tiers[-1].threshold, 0.0, 0.0)


def refine_map(seg_map: SegmentationMap, colormap: ColorMap) -> SegmentationMap:
    """colorize, SME refinement and decoding back through the colour map."""
    refined = colormap.decode(sme_refine(colorize(seg_map, colormap)), source="refined map")
    return SegmentationMap(refined.classes, seg_map.num_classes)


def transmit(
    image: np.ndarray,
    models: Models,
    snr_db: float,
    config: ExperimentConfig,
    seed: int = 0,
    depth_override: Optional[int] = None,
    tier_override: Optional[int] = None,
    truth: Optional[SegmentationMap] = None,
    use_sme: bool = True,
) -> TransmissionResult:
    """
    Sends one image through the whole chain.

    Parameters
    ----------
    image : np.ndarray
        H x W x 3 image in [0, 1].
    models : Models
        Component models.
    snr_db : float
        Link SNR.
    config : ExperimentConfig
        Channel, thresholds, task and blur policy.
    seed : int, optional
        Seed of the fading draw and the noise.
    depth_override, tier_override : int, optional
        Pin the codec depth or the blur tier.
    truth : SegmentationMap, optional
        Used instead of the segmentation network when models.segnet is None.
    use_sme : bool, optional
        Apply SME refinement to the segmentation. The default is True.

    Returns
    -------
    TransmissionResult

    Raises
    ------
    PipelineStageError
        Wrapping any component error, labelled with its stage.
    """
    image = np.asarray(image, dtype=np.float64)

    with stage("segment"):
        if models.segnet is not None:
            seg_map = segment(image, models.segnet)
        elif truth is not None:
            seg_map = truth
        else:
            raise ConfigurationError("No segmentation network and no ground-truth map given")
        if seg_map.shape != image.shape[:2]:
            raise ShapeError(f"Segmentation {seg_map.shape} does not match image {image.shape[:2]}")

    if use_sme:
        with stage("sme_refine"):
            seg_map = refine_map(seg_map, models.colormap)

    with stage("select"):
        selected = select(
            image,
            seg_map,
            config.task,
            snr_db,
            models.evaluator,
            config.blur_policy,
            config.channel.snr_range,
            tier_override,
        )
        features = extract_features(image, seg_map, config.task, snr_db, config.channel.snr_range)

    with stage("select_depth"):
        depth = select_depth(snr_db, config.thresholds).depth
        if depth_override is not None:
            if depth_override not in (1, 2, 3):
                raise ConfigurationError(f"Depth override must be 1, 2 or 3, got {depth_override}")
            depth = depth_override

    draw = sample_gain(config.channel.params, derive_seed(seed, 0), 1)[0]
    noise = NoiseSpec(snr_db)

    with torch.no_grad():
        if models.passthrough:
            sent = images_to_tensor([selected.pixels])
            with stage("channel"):
                received = apply_channel(sent, draw, noise, derive_seed(seed, 1), config.channel.equalize)
            reconstruction = tensor_to_images(received.clamp(0.0, 1.0))[0]
        else:
            if models.sem_codec is None or models.chan_codec is None:
                raise PipelineStageError(
                    "sem_encode", ConfigurationError("Semantic and channel codecs must be loaded")
                )
            with stage("sem_encode"):
                grid = sem_encode(selected.pixels, models.sem_codec)
            with stage("chan_encode"):
                sent = chan_encode(grid.to_spatial(), depth, models.chan_codec)
            with stage("channel"):
                received = apply_channel(sent, draw, noise, derive_seed(seed, 1), config.channel.equalize)
            with stage("chan_decode"):
                latent = chan_decode(received, depth, models.chan_codec)
                if latent.shape != grid.to_spatial().shape:
                    raise ShapeError(f"Decoded latent {tuple(latent.shape)} vs {tuple(grid.to_spatial().shape)}")
            with stage("sem_decode"):
                decoded = sem_decode(TokenGrid.from_spatial(latent, grid.patch_size, grid.merges), models.sem_codec)
                reconstruction = tensor_to_images(decoded)[0]

    with stage("metrics"):
        if reconstruction.shape != image.shape:
            raise ShapeError(f"Reconstruction {reconstruction.shape} does not match image {image.shape}")
        received_8bit = to_8bit(reconstruction)
        selected_8bit = to_8bit(selected.pixels)
        task_psnr = (
            psnr(received_8bit, to_8bit(image), region=selected.mask)
            if selected.mask.any()
            else float("nan")
        )
        report = MetricsReport(
            psnr_db=psnr(received_8bit, selected_8bit),
            ssim=ssim(received_8bit, selected_8bit),
            task_psnr_db=task_psnr,
            payload_bytes=payload_size(selected_8bit),
            snr_db=snr_db,
            depth=depth,
            tier=selected.tier_used,
        )
    logger.info(
        f"Transmitted at {snr_db} dB: depth {depth}, tier {selected.tier_used}, "
        f"payload {report.payload_bytes} bytes, PSNR {report.psnr_db:.3f} dB"
    )
    return TransmissionResult(reconstruction, report, selected, features, seg_map)


def run_transmission(
    image: np.ndarray,
    models: Models,
    snr_db: float,
    config: ExperimentConfig,
    seed: int = 0,
    depth_override: Optional[int] = None,
    tier_override: Optional[int] = None,
    truth: Optional[SegmentationMap] = None,
) -> Tuple[np.ndarray, MetricsReport]:
    result = transmit(image, models, snr_db, config, seed, depth_override, tier_override, truth)
    return result.reconstruction, result.report


def _job_seed(config: ExperimentConfig, image_index: int, snr_index: int) -> int:
    return derive_seed(config.training.seed, image_index, snr_index)


def _run_jobs(jobs, worker, workers: int) -> list:
    """Maps worker over jobs, results in input order."""
    if workers <= 1:
        return [worker(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(worker, jobs))


def sweep_snr(
    scenes: Sequence[Scene],
    models: Models,
    grid: Sequence[float],
    config: ExperimentConfig,
    folders: Sequence[Path],
    plot_folders: Sequence[Path],
) -> pd.DataFrame:
    """
    Transmits every scene at every SNR of the grid.

    Writes the per-image table, the per-SNR means (sweep.csv), PSNR and SSIM
    plots against SNR and the evaluator-training pairs (eval_samples.csv).

    Returns
    -------
    pd.DataFrame
        Per-SNR mean metrics.
    """
    grid = list(grid)
    snr_grid_in_range(grid, config)
    if len(scenes) == 0:
        raise ConfigurationError("Sweep needs at least one scene")

    jobs = [(i, j) for j in range(len(grid)) for i in range(len(scenes))]

    def _worker(job: Tuple[int, int]) -> TransmissionResult:
        i, j = job
        return transmit(
            scenes[i].image,
            models,
            grid[j],
            config,
            seed=_job_seed(config, i, j),
            truth=scenes[i].seg_map,
        )

    results = _run_jobs(jobs, _worker, config.sweep.workers)
    names = [scenes[i].name or f"scene_{i:04d}" for i, _ in jobs]
    per_image = pd.DataFrame(
        [r.report.to_row(name) for name, r in zip(names, results)], columns=params.metrics_columns
    )
    summary = summarise_sweep(per_image)

    write_table(per_image, folders, params.transmission_file)
    write_table(summary, folders, params.sweep_file)
    plot_metric_vs_snr(summary, "psnr_db", "Mean PSNR (dB)", params.psnr_plot_file, plot_folders)
    plot_metric_vs_snr(summary, "ssim", "Mean SSIM", params.ssim_plot_file, plot_folders)

    samples = [
        (r.features.x_s, r.features.x_c, r.report.task_psnr_db)
        for r in results
        if np.isfinite(r.report.task_psnr_db)
    ]
    dropped = len(results) - len(samples)
    if dropped:
        logger.info(f"{dropped} sweep results without a finite task PSNR left out of {params.eval_samples_file}")
    write_table(pd.DataFrame(samples, columns=params.eval_sample_columns), folders, params.eval_samples_file)
    return summary


def harvest_eval_samples(
    scenes: Sequence[Scene],
    models: Models,
    snr_grid: Sequence[float],
    config: ExperimentConfig,
) -> List[TrainSample]:
    """
    Task-region PSNR of every (SNR, blur tier, scene) combination with the
    tier forced, paired with the evaluator features.
    """
    snr_grid_in_range(list(snr_grid), config)
    jobs = [
        (i, j, tier)
        for j in range(len(snr_grid))
        for tier in range(len(config.blur_policy.tiers))
        for i in range(len(scenes))
    ]

    def _worker(job: Tuple[int, int, int]) -> TransmissionResult:
        i, j, tier = job
        return transmit(
            scenes[i].image,
            models,
            snr_grid[j],
            config,
            seed=_job_seed(config, i, j),
            tier_override=tier,
            truth=scenes[i].seg_map,
        )

    samples = []
    for result in _run_jobs(jobs, _worker, config.sweep.workers):
        if np.isfinite(result.report.task_psnr_db):
            samples.append(TrainSample(result.features, result.report.task_psnr_db))
    logger.info(f"Harvested {len(samples)} evaluator samples from {len(jobs)} transmissions")
    return samples


def _mean_metric(results: Sequence[TransmissionResult], attr: str) -> float:
    """Mean of the finite values, else their shared value (INF) or NaN."""
    values = np.array([getattr(r.report, attr) for r in results], dtype=np.float64)
    finite = values[np.isfinite(values)]
    if len(finite) < len(values):
        logger.warning(f"Dropped {len(values) - len(finite)} non-finite {attr} values from the mean")
    if len(finite) == 0:
        return float(values[0]) if np.all(values == values[0]) else float("nan")
    return float(finite.mean())


def ablate_stacking(
    scenes: Sequence[Scene],
    models: Models,
    config: ExperimentConfig,
    folders: Sequence[Path],
    plot_folders: Sequence[Path],
) -> pd.DataFrame:
    """Mean PSNR with the codec pinned to depth 1 and to depth 3, without blur."""
    snrs = list(config.ablation.stacking_snrs)
    snr_grid_in_range(snrs, config)
    top_tier = len(config.blur_policy.tiers) - 1
    rows = []
    for j, snr in enumerate(snrs):
        for depth in (1, 3):
            results = [
                transmit(
                    scene.image,
                    models,
                    snr,
                    config,
                    seed=_job_seed(config, i, j),
                    depth_override=depth,
                    tier_override=top_tier,
                    truth=scene.seg_map,
                )
                for i, scene in enumerate(scenes)
            ]
            rows.append(
                {
                    "snr_db": snr,
                    "depth": depth,
                    "psnr_db": _mean_metric(results, "psnr_db"),
                    "ssim": _mean_metric(results, "ssim"),
                }
            )
    df = pd.DataFrame(rows)
    write_table(df, folders, params.stacking_ablation_file)
    plot_metric_vs_snr(df, "psnr_db", "Mean PSNR (dB)", params.stacking_plot_file, plot_folders, group="depth")
    return df


def ablate_selection(
    scenes: Sequence[Scene],
    models: Models,
    config: ExperimentConfig,
    folders: Sequence[Path],
) -> pd.DataFrame:
    """Payload size and PSNR of the blurred tier against the unblurred one."""
    snr = config.ablation.selection_snr_db
    snr_grid_in_range([snr], config)
    policy = config.blur_policy
    variants = {
        "blurred": policy.tier_with_kernel(config.ablation.selection_tier_kernel),
        "unblurred": len(policy.tiers) - 1,
    }
    rows = []
    for variant, tier in variants.items():
        results = [
            transmit(
                scene.image,
                models,
                snr,
                config,
                seed=_job_seed(config, i, 0),
                tier_override=tier,
                truth=scene.seg_map,
            )
            for i, scene in enumerate(scenes)
        ]
        rows.append(
            {
                "variant": variant,
                "kernel": policy.tiers[tier].kernel,
                "snr_db": snr,
                "payload_bytes": _mean_metric(results, "payload_bytes"),
                "psnr_db": _mean_metric(results, "psnr_db"),
                "task_psnr_db": _mean_metric(results, "task_psnr_db"),
            }
        )
    df = pd.DataFrame(rows)
    baseline = float(df.loc[df["variant"] == "unblurred", "payload_bytes"].iloc[0])
    if not baseline > 0:
        raise InvariantViolationError(f"Unblurred mean payload must be positive, got {baseline}")
    df["payload_ratio"] = df["payload_bytes"] / baseline
    write_table(df, folders, params.selection_ablation_file)
    return df


def ablate_sme(
    scenes: Sequence[Scene],
    models: Models,
    config: ExperimentConfig,
    folders: Sequence[Path],
) -> pd.DataFrame:
    """Segmentation accuracy and end-to-end quality with and without SME."""
    if models.segnet is None:
        raise ConfigurationError("The SME ablation needs a trained segmentation network")
    snr = config.ablation.selection_snr_db
    rows = []
    for i, scene in enumerate(scenes):
        raw = segment(scene.image, models.segnet)
        refined = refine_map(raw, models.colormap)
        row = {
            "scene": scene.name or f"scene_{i:04d}",
            "accuracy_raw": pixel_accuracy(raw.classes, scene.seg_map.classes),
            "accuracy_sme": pixel_accuracy(refined.classes, scene.seg_map.classes),
        }
        for label, use_sme in (("raw", False), ("sme", True)):
            result = transmit(scene.image, models, snr, config, seed=_job_seed(config, i, 0), use_sme=use_sme)
            row[f"psnr_db_{label}"] = result.report.psnr_db
            row[f"ssim_{label}"] = result.report.ssim
        rows.append(row)
    df = pd.DataFrame(rows)
    means = df.drop(columns="scene").mean()
    df = pd.concat([df, pd.DataFrame([{"scene": "mean", **means.to_dict()}])], ignore_index=True)
    write_table(df, folders, params.sme_ablation_file)
    return df


def encode_latents(scenes: Sequence[Scene], codec: SemanticCodec, batch_size: int) -> torch.Tensor:
    """Spatial (N, C, H', W') latents of the frozen semantic encoder."""
    codec.eval()
    images = images_to_tensor([s.image for s in scenes])
    latents = []
    with torch.no_grad():
        for start in range(0, len(scenes), batch_size):
            latents.append(sem_encode(images[start : start + batch_size], codec).to_spatial())
    return torch.cat(latents)


def joint_finetune(
    scenes: Sequence[Scene],
    sem_codec: SemanticCodec,
    chan_codec: StackedChannelCodec,
    config: ExperimentConfig,
) -> List[float]:
    """
    Fine-tunes the semantic codec together with the deepest channel tier at
    image level, depth 3, on SNRs from the deepest stage interval. Tiers 1 and
    2 stay frozen.
    """
    training = config.training
    seed_everything(training.seed)
    set_requires_grad(chan_codec, False)
    set_requires_grad(chan_codec.tier(3), True)
    set_requires_grad(sem_codec, True)
    trainable = list(sem_codec.parameters()) + list(chan_codec.tier(3).parameters())
    optimizer = torch.optim.AdamW(trainable, lr=training.learning_rate, weight_decay=training.weight_decay)
    criterion = nn.MSELoss()
    images = images_to_tensor([s.image for s in scenes])
    low, high = config.thresholds.stage_interval(3)
    rng = np.random.default_rng(derive_seed(training.seed, 4))
    generator = torch.Generator().manual_seed(training.seed)

    history = []
    for epoch in range(training.epochs):
        sem_codec.train()
        chan_codec.train()
        batch_losses = []
        for batch in minibatches(len(scenes), training.batch_size, generator):
            x = images[batch]
            snrs = rng.uniform(low, high, size=len(batch))
            gains = np.array([d.power_gain for d in sample_gain(config.channel.params, int(rng.integers(2**31)), len(batch))])
            noise_seeds = [int(s) for s in rng.integers(2**31, size=len(batch))]

            optimizer.zero_grad()
            grid = sem_codec.encode(x)
            sent = chan_encode(grid.to_spatial(), 3, chan_codec)
            received = transmit_batch(sent, gains, snrs, noise_seeds, config.channel.equalize)
            latent = chan_decode(received, 3, chan_codec)
            decoded = sem_codec.decode(TokenGrid.from_spatial(latent, grid.patch_size, grid.merges))
            loss = criterion(decoded, x)
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss))
        history.append(mean_loss(batch_losses))
        logger.info(f"Joint fine-tune epoch {epoch + 1}/{training.epochs}: loss {history[-1]:.6f}")

    set_requires_grad(chan_codec, True)
    sem_codec.eval()
    chan_codec.eval()
    return history


def symbol_counts(config: ExperimentConfig, chan_codec: Optional[StackedChannelCodec] = None) -> Dict[str, int]:
    """Real channel symbols per image at each depth."""
    side = config.dataset.image_size // config.semantic_codec.downsampling
    widths = chan_codec.widths if chan_codec is not None else params.channel_tier_widths
    return {f"depth_{d}": int(widths[d - 1] * side * side) for d in (1, 2, 3)}


def write_manifest(
    folder: Path,
    config: ExperimentConfig,
    command: str,
    checkpoints: Dict[str, Dict[str, str]],
    evaluator: Optional[EvalModel] = None,
) -> Path:
    """
    Writes manifest.toml: resolved config, checkpoint identifiers, versions,
    compressor identity, seeds, architecture and per-depth symbol counts.
    A manifest can be passed back as --config to re-run.
    """
    manifest = {
        "command": command,
        "version": {
            "package": src.__version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "pillow": PIL.__version__,
        },
        "compressor": params.compressor_identity,
        "seeds": {
            "training": config.training.seed,
            "dataset": config.dataset.seed,
        },
        "architecture": {
            "segnet_widths": list(config.segnet_widths),
            "patch_size": config.semantic_codec.patch_size,
            "window": config.semantic_codec.window,
            "embed_dim": config.semantic_codec.embed_dim,
            "depths": list(config.semantic_codec.depths),
            "heads": list(config.semantic_codec.heads),
            "latent_channels": config.semantic_codec.latent_channels,
            "channel_tier_widths": list(params.channel_tier_widths),
        },
        "symbols_per_image": symbol_counts(config),
        "checkpoints": checkpoints,
        "CONFIG": config.to_dict(),
    }
    if evaluator is not None:
        manifest["evaluator"] = model_to_dict(evaluator)
    path = Path(folder).joinpath(params.manifest_file)
    with open(path, "w") as f:
        toml.dump(manifest, f)
    logger.info(f"Run manifest written to {path}")
    return path
