"""
Purpose of the script: configures logging, run folders, seeding and the CLI
"""
import argparse
import logging
import os
import random
import shutil
import string
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import toml
import torch

import src.params as params
from src.errors import ConfigurationError


def configure_pipeline(
    output_dir: str,
    hash_length: int,
    config_path: str,
    custom_hash: Optional[str] = None,
) -> Tuple[logging.Logger, Dict[str, Path]]:
    """Configure the pipeline run

    Parameters
    ----------
    output_dir : str
        Location to store outputs (including logs)
    hash_length : int
        Length of hash to use in pipeline folder
    config_path : str
        Config file copied into the run folder
    custom_hash : Optional[str], optional
        Specify hash to use, by default None

    Returns
    -------
    Tuple[logging.Logger, Dict[str, Path]]
        Logger object and output folders

    Raises
    ------
    ConfigurationError
        If empty custom hash supplied
    """
    if custom_hash is not None:
        if len(custom_hash) == 0:
            raise ConfigurationError("Custom hash must be of length > 0")
        if len(custom_hash) > hash_length:
            custom_hash = custom_hash[:hash_length]

    pipeline_hash = get_unique_folder_name(hash_length, custom_hash)
    logger = configure_logging(output_dir, pipeline_hash)

    output_folders = create_output_folder(output_dir, pipeline_hash, config_path)

    return (logger, output_folders)


def configure_logging(output_dir: str, hash_id: str) -> logging.Logger:
    """Set up logging format and location to store logs

    Args:
        output_dir: directory to store logs
        hash_id: pipeline hash

    Returns:
        (logging.Logger) logger to add detail to
    """
    log_folder = Path(output_dir).joinpath(params.logs_folder)
    if not os.path.exists(Path(log_folder)):
        os.makedirs(Path(log_folder))
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(levelname)s -- %(filename)s:\
                %(funcName)5s():%(lineno)s -- %(message)s",
        handlers=[
            logging.FileHandler(log_folder / f"{hash_id}.log"),
            logging.StreamHandler(sys.stdout),
        ],  # Add second handler to print log message to screen
        force=True,
    )
    logger = logging.getLogger(__name__)

    logger.info("Configured logging.")
    logger.info(f"Run under hash: {hash_id}.")
    logger.info(f"Starting run at:\t{datetime.now().time()}")
    return logger


def get_config(toml_path="config.toml") -> dict:
    """Gets the config toml and returns it as a dict.

    Returns:
        Dict: A dictionary containing paths, channel settings, etc.

    Raises:
        ConfigurationError if the file does not exist
    """
    if not Path(toml_path).is_file():
        raise ConfigurationError(f"Config file not found: {toml_path}")
    return toml.load(toml_path)


def random_string(length: int) -> str:
    """Generates a random string

    Args:
        length (int): The length of the string

    Returns:
        (str) A random string
    """
    pool = string.hexdigits
    return "".join(random.SystemRandom().choice(pool) for i in range(length))


def get_unique_folder_name(length: int, custom_hash: Optional[str] = None) -> str:
    """Generates a unique folder name

    Args:
        length (int): Length of random hash
        custom_hash (Optional[str]): Custom hash to use

    Returns:
        str: A string containing a date and random, or custom hash.
    """
    now = datetime.now()
    now_str = now.strftime("%d-%m-%Y_%H-%M-%S")

    if custom_hash is not None:
        print("Using custom hash")
        folder_string = f"{now_str}_{custom_hash}"
    else:
        folder_string = f"{now_str}_{random_string(length)}"

    return folder_string


def create_output_folder(
    output_path: str, output_folder: str, config_path: str
) -> Dict[str, Path]:
    """Creates a new run folder in the specified output path.

    Args:
        output_path (str):
            Location of output
        output_folder (str):
            Name of folder name to store pipeline run output
        config_path (str):
            Config file to copy alongside the outputs

    Returns:
        Dict[str, Path]: run, checkpoints, results and plots folders
    """
    if not os.path.exists(Path(output_path)):
        os.makedirs(Path(output_path))

    project_output_path = Path(output_path).joinpath(output_folder)
    folders = {
        "run": project_output_path,
        "checkpoints": project_output_path.joinpath(params.checkpoint_folder),
        "results": project_output_path.joinpath(params.results_folder),
        "plots": project_output_path.joinpath(params.plots_folder),
    }
    for folder in folders.values():
        os.makedirs(folder, exist_ok=True)

    print(f"Folders created in:\n{project_output_path}")

    shutil.copy2(
        src=Path(config_path),
        dst=project_output_path.joinpath(params.config_copy_file),
    )
    print("Config copied and saved.")

    return folders


def copy_outputs(old_file_path: str, new_file_path: str, file_name: str) -> None:
    os.makedirs(new_file_path, exist_ok=True)
    shutil.copy2(
        src=Path(old_file_path).joinpath(file_name),
        dst=Path(new_file_path).joinpath(file_name),
    )


def check_file_for_duplicates(df: pd.DataFrame, file_name: str, col: str) -> None:
    """Checks a field of a dataframe for duplicate values.
    The dataframe should contain data linked to a file.

    Args:
        df (pd.DataFrame):
            data from file
        file_name (str):
            name of file so that the user knows which file to check
        col (str):
            the field to check for duplicates

    Raises:
        ConfigurationError if any col values appear more than once

    Returns:
        None
    """
    if df.duplicated(subset=[col]).any():
        raise ConfigurationError(
            f"""Your file: {file_name} contains duplicate {col} values. \n
            This pipeline requires distinct {col} values."""
        )

    return None


def seed_everything(seed: int) -> None:
    """Seeds python, numpy and torch and pins torch to deterministic kernels
    on a single intra-op thread."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.set_num_threads(1)


def derive_seed(*keys: int) -> int:
    """Derives an independent 32-bit seed from a tuple of integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def build_parser() -> argparse.ArgumentParser:
    """Builds the command line parser

    Returns
    -------
    argparse.ArgumentParser
        parser with one sub-parser per pipeline command
    """
    parser = argparse.ArgumentParser(
        description="Desk-scale semantic satellite-ground transmission simulator"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def _add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument(
            "--config",
            default="config.toml",
            help="Config toml, or a previous run's manifest.toml to re-run it.",
        )
        sub.add_argument(
            "--hash", default=None, help="Supply a custom hash to store your run."
        )
        return sub

    _add("train-seg", "Train the segmentation network.")
    _add("train-sem", "Train the semantic codec (no channel in the loop).")
    _add("train-chan", "Staged training of the SNR-adaptive channel codec.")
    _add("fit-eval", "Harvest pipeline samples and fit the quality evaluator.")
    transmit = _add("transmit", "Transmit a single image.")
    transmit.add_argument("--image", required=True, help="Lossless raster image.")
    transmit.add_argument("--snr", required=True, type=float, help="SNR in dB.")
    _add("sweep", "Sweep the SNR grid over the dataset.")
    _add("ablate-stacking", "Compare codec depth 1 against depth 3 at low SNR.")
    _add("ablate-selection", "Compare blurred and unblurred payloads.")
    _add("ablate-sme", "Compare segmentation with and without SME refinement.")
    return parser


def parse_cli_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parses arguments supplied at the command line

    Returns
    -------
    argparse.Namespace
        argparse object with command, config and hash attributes
    """
    return build_parser().parse_args(argv)
