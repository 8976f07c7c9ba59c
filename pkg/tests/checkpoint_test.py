import hashlib

import numpy as np
import pytest
import torch

from src.channel_codec import StackedChannelCodec
from src.checkpoint import ParamBundle, bundles_equal, checkpoint_ids, load_bundle, save_bundle
from src.errors import IngestionError, ShapeError


def test_bundle_round_trip(tmp_path):
    codec = StackedChannelCodec(latent_channels=8, widths=(4, 8, 16))
    bundle = ParamBundle.from_module("channel_codec", codec, stage=3, seed=0)
    shared = tmp_path / "shared"
    identifier = save_bundle(bundle, tmp_path / "run", shared)

    archive = shared / "channel_codec.npz"
    assert archive.is_file()
    assert identifier["file"] == "channel_codec.npz"
    assert identifier["sha256"] == hashlib.sha256(archive.read_bytes()).hexdigest()

    loaded = load_bundle(shared, "channel_codec")
    assert bundles_equal(bundle, loaded)
    assert loaded.metadata["stage"] == 3

    fresh = loaded.load_into(StackedChannelCodec(latent_channels=8, widths=(4, 8, 16)))
    for key, value in codec.state_dict().items():
        assert torch.equal(fresh.state_dict()[key], value)

    assert checkpoint_ids(shared, ["channel_codec", "segnet"]) == {"channel_codec": identifier}


def test_load_into_mismatch(tmp_path):
    bundle = ParamBundle.from_module("c", StackedChannelCodec(latent_channels=8, widths=(4, 8, 16)))
    with pytest.raises(ShapeError):
        bundle.load_into(StackedChannelCodec(latent_channels=8, widths=(4, 8, 32)))
    bundle.arrays.pop(next(iter(bundle.arrays)))
    with pytest.raises(ShapeError):
        bundle.load_into(StackedChannelCodec(latent_channels=8, widths=(4, 8, 16)))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(IngestionError, match="train"):
        load_bundle(tmp_path, "segnet")


def test_plain_arrays(tmp_path):
    bundle = ParamBundle("evaluator", {"weights": np.array([1.0, 2.0, -1.0])}, {"alpha": 0.05})
    save_bundle(bundle, tmp_path)
    loaded = load_bundle(tmp_path, "evaluator")
    assert np.array_equal(loaded.arrays["weights"], [1.0, 2.0, -1.0])
    assert loaded.metadata["alpha"] == 0.05
