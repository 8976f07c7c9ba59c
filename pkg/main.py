import logging
import sys
import timeit
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

import src.params as params
from src.channel_codec import StackedChannelCodec, staged_train
from src.checkpoint import ParamBundle, checkpoint_ids, load_bundle, save_bundle
from src.config import ExperimentConfig, load_experiment_config
from src.errors import ConfigurationError, IngestionError, PipelineStageError
from src.evaluation import EvalModel, fit, model_to_dict, save_samples
from src.load import Scene, generate_synthetic, load_colormap, load_dataset, read_image, save_image
from src.pipeline import (
    Models,
    ablate_selection,
    ablate_sme,
    ablate_stacking,
    encode_latents,
    harvest_eval_samples,
    joint_finetune,
    neutral_evaluator,
    run_transmission,
    sweep_snr,
    write_manifest,
)
from src.report import reports_to_frame, write_table
from src.segmentation import ColorMap, SegNet, default_colormap, train_segnet
from src.semantic_codec import SemanticCodec, train_sem_codec
from src.utils import configure_pipeline, parse_cli_args

logger = logging.getLogger(__name__)

CHECKPOINT_NAMES = [
    params.segnet_checkpoint,
    params.semantic_codec_checkpoint,
    params.channel_codec_checkpoint,
    params.evaluator_checkpoint,
] + [params.channel_codec_stage_checkpoint.format(stage=k) for k in (1, 2, 3)]


def load_colours(config: ExperimentConfig) -> ColorMap:
    if config.dataset.colormap_file:
        return load_colormap(Path(config.dataset.colormap_file))
    return default_colormap(config.dataset.num_classes)


def load_scenes(config: ExperimentConfig, colormap: ColorMap) -> List[Scene]:
    ds = config.dataset
    if ds.source == "synthetic":
        scenes = generate_synthetic(ds.n_scenes, ds.image_size, ds.num_classes, ds.seed)
    else:
        scenes = load_dataset(Path(ds.path), colormap)
    if len(scenes) == 0:
        raise ConfigurationError(f"No scenes available from {ds.source} dataset at {ds.path}")
    return scenes


def load_models(config: ExperimentConfig, colormap: ColorMap, require_segnet: bool = False) -> Models:
    """Loads every trained component from the shared checkpoint folder."""
    folder = Path(config.location.checkpoint_dir)

    segnet = None
    try:
        segnet = load_bundle(folder, params.segnet_checkpoint).load_into(
            SegNet(config.dataset.num_classes, config.segnet_widths)
        )
        segnet.eval()
    except IngestionError:
        if require_segnet:
            raise
        logger.warning("No segmentation checkpoint; ground-truth maps will be used")

    sem_codec = load_bundle(folder, params.semantic_codec_checkpoint).load_into(
        SemanticCodec.from_config(config.semantic_codec)
    )
    sem_codec.eval()
    chan_codec = load_bundle(folder, params.channel_codec_checkpoint).load_into(
        StackedChannelCodec(config.semantic_codec.latent_channels)
    )
    chan_codec.eval()

    try:
        bundle = load_bundle(folder, params.evaluator_checkpoint)
        evaluator = EvalModel.from_weights(bundle.arrays["weights"], bundle.metadata.get("alpha", 0.0))
    except IngestionError:
        logger.warning("No fitted evaluator; every image is sent without blur")
        evaluator = neutral_evaluator(config)
    return Models(colormap, evaluator, segnet, sem_codec, chan_codec)


def _save(bundle: ParamBundle, folders: Dict[str, Path], config: ExperimentConfig) -> Dict[str, str]:
    return save_bundle(bundle, folders["checkpoints"], Path(config.location.checkpoint_dir))


def train_seg(config: ExperimentConfig, folders: Dict[str, Path]) -> None:
    colormap = load_colours(config)
    scenes = load_scenes(config, colormap)
    segnet, losses = train_segnet(
        [(s.image, s.seg_map) for s in scenes],
        config.training,
        config.dataset.num_classes,
        config.segnet_widths,
    )
    _save(
        ParamBundle.from_module(
            params.segnet_checkpoint,
            segnet,
            component="segmentation",
            epochs=config.training.epochs,
            seed=config.training.seed,
            num_classes=config.dataset.num_classes,
            losses=losses,
        ),
        folders,
        config,
    )


def train_sem(config: ExperimentConfig, folders: Dict[str, Path]) -> None:
    scenes = load_scenes(config, load_colours(config))
    codec, losses = train_sem_codec([s.image for s in scenes], config.training, config.semantic_codec)
    _save(
        ParamBundle.from_module(
            params.semantic_codec_checkpoint,
            codec,
            component="semantic_codec",
            epochs=config.training.epochs,
            seed=config.training.seed,
            losses=losses,
        ),
        folders,
        config,
    )


def train_chan(config: ExperimentConfig, folders: Dict[str, Path]) -> None:
    scenes = load_scenes(config, load_colours(config))
    sem_codec = load_bundle(
        Path(config.location.checkpoint_dir), params.semantic_codec_checkpoint
    ).load_into(SemanticCodec.from_config(config.semantic_codec))
    latents = encode_latents(scenes, sem_codec, config.training.batch_size)

    def _stage_checkpoint(codec: StackedChannelCodec, log) -> None:
        _save(
            ParamBundle.from_module(
                params.channel_codec_stage_checkpoint.format(stage=log.stage),
                codec,
                component="channel_codec",
                stage=log.stage,
                snr_interval=list(log.interval),
                epochs=log.epochs,
                seed=config.training.seed,
                frozen_tiers=list(range(1, log.stage)),
                losses=log.epoch_losses,
            ),
            folders,
            config,
        )

    codec, logs = staged_train(
        latents,
        config.thresholds,
        config.channel.params,
        config.training,
        config.channel.equalize,
        on_stage_end=_stage_checkpoint,
    )
    if config.training.joint_finetune:
        print(f"\n{'-'*60}\nJoint fine-tune of the semantic codec and tier 3\n")
        losses = joint_finetune(scenes, sem_codec, codec, config)
        _save(
            ParamBundle.from_module(
                params.semantic_codec_checkpoint,
                sem_codec,
                component="semantic_codec",
                joint_finetune=True,
                seed=config.training.seed,
                losses=losses,
            ),
            folders,
            config,
        )
    _save(
        ParamBundle.from_module(
            params.channel_codec_checkpoint,
            codec,
            component="channel_codec",
            stages=len(logs),
            stage_epochs=config.training.stage_epochs,
            seed=config.training.seed,
        ),
        folders,
        config,
    )


def fit_eval(config: ExperimentConfig, folders: Dict[str, Path]) -> EvalModel:
    colormap = load_colours(config)
    scenes = load_scenes(config, colormap)
    models = load_models(config, colormap)
    # labels come from ground-truth maps so segmentation errors stay out of the fit
    models.segnet = None
    models.evaluator = neutral_evaluator(config)
    samples = harvest_eval_samples(scenes, models, config.sweep.snr_grid, config)
    save_samples(samples, folders["results"].joinpath(params.eval_samples_file))
    evaluator = fit(samples, config.evaluator.alpha, config.evaluator.epochs, config.training.seed)
    _save(
        ParamBundle(
            params.evaluator_checkpoint,
            {"weights": evaluator.weights},
            {"component": "evaluator", **model_to_dict(evaluator), "samples": len(samples)},
        ),
        folders,
        config,
    )
    return evaluator


def transmit_image(config: ExperimentConfig, folders: Dict[str, Path], image_path: str, snr_db: float) -> None:
    colormap = load_colours(config)
    models = load_models(config, colormap, require_segnet=True)
    image = read_image(Path(image_path))
    reconstruction, report = run_transmission(image, models, snr_db, config, seed=config.training.seed)
    save_image(reconstruction, folders["results"].joinpath(f"{Path(image_path).stem}_reconstruction.png"))
    write_table(reports_to_frame(Path(image_path).stem, [report]), [folders["results"]], params.transmission_file)


def main(command: str, config: ExperimentConfig, folders: Dict[str, Path], args) -> None:
    checkpoint_dir = Path(config.location.checkpoint_dir)
    write_manifest(folders["run"], config, command, checkpoint_ids(checkpoint_dir, CHECKPOINT_NAMES))
    results = [folders["results"]]
    plots = [folders["plots"]]
    evaluator = None

    if command == "train-seg":
        print(f"\n{'-'*60}\nTraining the segmentation network\n")
        train_seg(config, folders)
    elif command == "train-sem":
        print(f"\n{'-'*60}\nTraining the semantic codec\n")
        train_sem(config, folders)
    elif command == "train-chan":
        print(f"\n{'-'*60}\nStaged training of the channel codec\n")
        train_chan(config, folders)
    elif command == "fit-eval":
        print(f"\n{'-'*60}\nHarvesting samples and fitting the evaluator\n")
        evaluator = fit_eval(config, folders)
    elif command == "transmit":
        print(f"\n{'-'*60}\nTransmitting {args.image} at {args.snr} dB\n")
        transmit_image(config, folders, args.image, args.snr)
    else:
        colormap = load_colours(config)
        scenes = load_scenes(config, colormap)
        if command == "sweep":
            print(f"\n{'-'*60}\nSweeping the SNR grid\n")
            sweep_snr(scenes, load_models(config, colormap), config.sweep.snr_grid, config, results, plots)
        elif command == "ablate-stacking":
            print(f"\n{'-'*60}\nStacking ablation\n")
            ablate_stacking(scenes, load_models(config, colormap), config, results, plots)
        elif command == "ablate-selection":
            print(f"\n{'-'*60}\nSelection ablation\n")
            ablate_selection(scenes, load_models(config, colormap), config, results)
        elif command == "ablate-sme":
            print(f"\n{'-'*60}\nSME ablation\n")
            ablate_sme(scenes, load_models(config, colormap, require_segnet=True), config, results)

    write_manifest(folders["run"], config, command, checkpoint_ids(checkpoint_dir, CHECKPOINT_NAMES), evaluator)


def _is_config_error(error: BaseException) -> bool:
    if isinstance(error, PipelineStageError):
        return isinstance(error.cause, ConfigurationError)
    return isinstance(error, ConfigurationError)


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Runs one subcommand; returns 0 on success, 2 on config errors, 1 otherwise."""
    args = parse_cli_args(argv)
    try:
        config = load_experiment_config(args.config)
    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return 2

    try:
        logger, folders = configure_pipeline(
            config.location.output_dir,
            hash_length=config.location.hash_length,
            config_path=args.config,
            custom_hash=args.hash,
        )
    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return 2
    logger.info(f"Logging the config settings:\n\n\t{config.to_dict()}\n")
    np.seterr(over="warn")
    try:
        main(args.command, config, folders, args)
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        return 2 if _is_config_error(e) else 1
    return 0


if __name__ == "__main__":
    print("Running semantic transmission simulator")
    start_time = timeit.default_timer()
    exit_code = cli()
    total_time = timeit.default_timer() - start_time
    total_minutes = int(total_time / 60)
    total_leftover_seconds = round(total_time % 60)
    print(
        f"""
        Running time of simulator:
        {total_minutes} minutes and {total_leftover_seconds} seconds.\n
        """
    )
    sys.exit(exit_code)
