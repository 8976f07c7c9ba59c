"""
ParamBundle archives: named weight arrays in an .npz file plus a .toml file
of metadata, written to the run folder and to the shared checkpoint folder.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import toml
import torch
from torch import nn

from src.errors import IngestionError, ShapeError
from src.utils import copy_outputs

logger = logging.getLogger(__name__)


@dataclass
class ParamBundle:
    """Ordered named arrays of one trainable component."""

    name: str
    arrays: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_module(cls, name: str, module: nn.Module, **metadata) -> "ParamBundle":
        arrays = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(name, arrays, dict(metadata))

    def load_into(self, module: nn.Module) -> nn.Module:
        expected = module.state_dict()
        missing = [k for k in expected if k not in self.arrays]
        extra = [k for k in self.arrays if k not in expected]
        if missing or extra:
            raise ShapeError(
                f"Checkpoint '{self.name}' does not match the network: "
                f"missing {missing[:5]}, unexpected {extra[:5]}"
            )
        for k, v in expected.items():
            if tuple(self.arrays[k].shape) != tuple(v.shape):
                raise ShapeError(
                    f"Checkpoint '{self.name}' array '{k}' has shape "
                    f"{self.arrays[k].shape}, network expects {tuple(v.shape)}"
                )
        module.load_state_dict({k: torch.from_numpy(np.array(a)) for k, a in self.arrays.items()})
        return module


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_bundle(
    bundle: ParamBundle, folder: Path, shared_folder: Optional[Path] = None
) -> Dict[str, str]:
    """
    Writes <name>.npz and <name>.toml into `folder` and copies both to the
    shared folder when given.

    Returns
    -------
    Dict[str, str]
        Checkpoint identifier: file name and SHA-256 of the archive.
    """
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    archive = folder / f"{bundle.name}.npz"
    with open(archive, "wb") as f:
        np.savez(f, **bundle.arrays)
    meta = {**bundle.metadata, "name": bundle.name, "arrays": list(bundle.arrays)}
    with open(folder / f"{bundle.name}.toml", "w") as f:
        toml.dump(meta, f)

    if shared_folder is not None and Path(shared_folder).resolve() != folder.resolve():
        for suffix in (".npz", ".toml"):
            copy_outputs(folder, shared_folder, f"{bundle.name}{suffix}")
    identifier = {"file": archive.name, "sha256": _sha256(archive)}
    logger.info(f"Saved checkpoint {archive} ({identifier['sha256'][:12]})")
    return identifier


def load_bundle(folder: Path, name: str) -> ParamBundle:
    folder = Path(folder)
    archive = folder / f"{name}.npz"
    meta_path = folder / f"{name}.toml"
    if not archive.is_file():
        raise IngestionError(
            f"Checkpoint {archive} not found; run the matching train command first"
        )
    metadata = toml.load(meta_path) if meta_path.is_file() else {}
    with np.load(archive) as data:
        order = metadata.get("arrays", list(data.files))
        arrays = {k: data[k] for k in order}
    logger.info(f"Loaded checkpoint {archive}")
    return ParamBundle(name, arrays, metadata)


def checkpoint_ids(folder: Path, names: Iterable[str]) -> Dict[str, Dict[str, str]]:
    """Identifiers of the archives present in `folder`."""
    ids = {}
    for name in names:
        archive = Path(folder) / f"{name}.npz"
        if archive.is_file():
            ids[name] = {"file": archive.name, "sha256": _sha256(archive)}
    return ids


def bundles_equal(a: ParamBundle, b: ParamBundle) -> bool:
    keys: List[str] = list(a.arrays)
    return keys == list(b.arrays) and all(np.array_equal(a.arrays[k], b.arrays[k]) for k in keys)
