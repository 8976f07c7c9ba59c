import numpy as np
import pytest
import torch

from src.channel import ChannelParams
from src.channel_codec import (
    SnrThresholds,
    StackedChannelCodec,
    chan_decode,
    chan_encode,
    power_normalize,
    select_depth,
    staged_train,
    transmit_batch,
)
from src.config import TrainingConfig
from src.errors import ConfigurationError, ShapeError
from src.training import snapshot
from src.utils import seed_everything

THRESHOLDS = SnrThresholds(3.0, -3.0, -10.0, 10.0)


@pytest.mark.parametrize(
    "snr, depth",
    [(10.0, 1), (3.0, 1), (2.9, 2), (0.0, 2), (-3.0, 2), (-3.1, 3), (-5.0, 3), (-10.0, 3)],
)
def test_select_depth(snr, depth):
    assert select_depth(snr, THRESHOLDS).depth == depth


def test_select_depth_out_of_range():
    with pytest.raises(ConfigurationError):
        select_depth(10.5, THRESHOLDS)
    with pytest.raises(ConfigurationError):
        select_depth(-11.0, THRESHOLDS)


def test_thresholds_validation_and_intervals():
    with pytest.raises(ConfigurationError):
        SnrThresholds(-3.0, 3.0)
    with pytest.raises(ConfigurationError):
        SnrThresholds(12.0, -3.0, -10.0, 10.0)
    assert THRESHOLDS.stage_interval(1) == (-10.0, 10.0)
    assert THRESHOLDS.stage_interval(2) == (-10.0, 3.0)
    assert THRESHOLDS.stage_interval(3) == (-10.0, -3.0)
    with pytest.raises(ConfigurationError):
        THRESHOLDS.stage_interval(4)


def test_shape_ladder():
    codec = StackedChannelCodec()
    latent = torch.randn(2, 96, 8, 8)
    with torch.no_grad():
        for depth, width in [(1, 64), (2, 128), (3, 256)]:
            sent = chan_encode(latent, depth, codec)
            assert sent.shape == (2, width, 8, 8)
            assert chan_decode(sent, depth, codec).shape == latent.shape
            assert codec.symbols(depth, 8, 8) == width * 64


def test_unit_power():
    codec = StackedChannelCodec()
    with torch.no_grad():
        sent = chan_encode(torch.randn(3, 96, 4, 4) * 7, 2, codec)
    power = sent.pow(2).mean(dim=(1, 2, 3))
    assert torch.allclose(power, torch.ones(3), atol=1e-5)


def test_zero_latent_stays_finite():
    codec = StackedChannelCodec()
    with torch.no_grad():
        sent = chan_encode(torch.zeros(1, 96, 4, 4), 3, codec)
    assert torch.isfinite(sent).all()
    assert torch.equal(power_normalize(torch.zeros(2, 4)), torch.zeros(2, 4))


def test_codec_errors():
    codec = StackedChannelCodec()
    with pytest.raises(ConfigurationError):
        chan_encode(torch.zeros(1, 96, 4, 4), 4, codec)
    with pytest.raises(ShapeError):
        chan_encode(torch.zeros(1, 95, 4, 4), 1, codec)
    with pytest.raises(ShapeError):
        chan_decode(torch.zeros(1, 64, 4, 4), 2, codec)
    with pytest.raises(ConfigurationError):
        StackedChannelCodec(widths=(64, 128))


def test_transmit_batch_noiseless():
    y = torch.randn(2, 4, 2, 2)
    out = transmit_batch(y, np.array([1.0, 4.0]), [float("inf")] * 2, [0, 1])
    assert torch.allclose(out, y)


def _latents(n=4, channels=8):
    return torch.randn(n, channels, 4, 4, generator=torch.Generator().manual_seed(0))


def test_staged_train_freezes_earlier_tiers():
    config = TrainingConfig(learning_rate=1e-3, batch_size=2, stage_epochs=2, seed=0)
    snapshots = {}

    def _record(codec, log):
        snapshots[log.stage] = snapshot(codec)

    codec, logs = staged_train(_latents(), THRESHOLDS, ChannelParams(), config, on_stage_end=_record)

    assert [log.stage for log in logs] == [1, 2, 3]
    final = codec.state_dict()
    for name, value in snapshots[1].items():
        if name.startswith("encoders.0.") or name.startswith("decoders.0."):
            assert torch.equal(final[name], value)
    for name, value in snapshots[2].items():
        if name.startswith("encoders.1.") or name.startswith("decoders.1."):
            assert torch.equal(final[name], value)
    assert any(
        not torch.equal(snapshots[1][n], snapshots[2][n]) for n in snapshots[1] if n.startswith("encoders.1.")
    )
    assert all(p.requires_grad for p in codec.parameters())


def test_staged_train_snr_draws_in_interval():
    config = TrainingConfig(learning_rate=1e-3, batch_size=2, stage_epochs=2, seed=3)
    _, logs = staged_train(_latents(), THRESHOLDS, ChannelParams(), config)
    for log in logs:
        low, high = THRESHOLDS.stage_interval(log.stage)
        assert log.interval == (low, high)
        assert len(log.snr_draws) == 2 * 4
        assert all(low <= s <= high for s in log.snr_draws)
        assert len(log.epoch_losses) == 2
        assert all(np.isfinite(log.epoch_losses))


def test_staged_train_is_deterministic():
    config = TrainingConfig(learning_rate=1e-3, batch_size=2, stage_epochs=1, seed=5)
    a, logs_a = staged_train(_latents(), THRESHOLDS, ChannelParams(), config)
    b, logs_b = staged_train(_latents(), THRESHOLDS, ChannelParams(), config)
    assert [log.epoch_losses for log in logs_a] == [log.epoch_losses for log in logs_b]
    for key, value in a.state_dict().items():
        assert torch.equal(b.state_dict()[key], value)


def test_staged_train_empty():
    with pytest.raises(ConfigurationError):
        staged_train(torch.zeros(0, 8, 4, 4), THRESHOLDS, ChannelParams(), TrainingConfig())


@pytest.mark.slow
def test_staged_train_beats_untrained_codec():
    config = TrainingConfig(learning_rate=3e-3, batch_size=4, stage_epochs=60, seed=1)
    latents = _latents(n=16)
    codec, logs = staged_train(latents, THRESHOLDS, ChannelParams(), config)
    for log in logs:
        assert log.epoch_losses[-1] < log.epoch_losses[0]

    seed_everything(1)
    untrained = StackedChannelCodec(latent_channels=8)

    def _noiseless_mse(model):
        with torch.no_grad():
            sent = chan_encode(latents, 1, model)
            received = transmit_batch(sent, np.ones(16), [float("inf")] * 16, list(range(16)))
            return float(torch.mean((chan_decode(received, 1, model) - latents) ** 2))

    assert _noiseless_mse(codec) <= 0.5 * _noiseless_mse(untrained)
