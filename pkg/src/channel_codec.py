"""
Stacked SNR-adaptive channel codec.

Three encoder tiers (96 -> 64 -> 128 -> 256 channels) and mirrored
transposed-convolution decoder tiers. The link SNR decides how many tiers are
active; training proceeds stage by stage, freezing earlier tiers while the next
one is added.
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

import src.params as params
from src.channel import ChannelDraw, ChannelParams, NoiseSpec, apply_channel, sample_power_gains
from src.errors import ConfigurationError, InvariantViolationError, ShapeError
from src.training import check_finite, init_weights, mean_loss, minibatches, set_requires_grad
from src.utils import derive_seed, seed_everything

if TYPE_CHECKING:
    from src.config import TrainingConfig

logger = logging.getLogger(__name__)

MAX_DEPTH = 3


@dataclass(frozen=True)
class SnrThresholds:
    gamma1: float = params.default_gamma1_db
    gamma2: float = params.default_gamma2_db
    gamma_min: float = params.default_snr_db_min
    gamma_max: float = params.default_snr_db_max

    def __post_init__(self):
        if not self.gamma_min < self.gamma2 < self.gamma1 < self.gamma_max:
            raise ConfigurationError(
                "SNR thresholds must satisfy gamma_min < gamma2 < gamma1 < gamma_max, got "
                f"{self.gamma_min} < {self.gamma2} < {self.gamma1} < {self.gamma_max}"
            )

    def stage_interval(self, stage: int) -> Tuple[float, float]:
        """SNR interval sampled while training the given stage."""
        intervals = {
            1: (self.gamma_min, self.gamma_max),
            2: (self.gamma_min, self.gamma1),
            3: (self.gamma_min, self.gamma2),
        }
        if stage not in intervals:
            raise ConfigurationError(f"Stage must be 1, 2 or 3, got {stage}")
        return intervals[stage]


@dataclass(frozen=True)
class DepthSelection:
    depth: int
    snr_db: float


def select_depth(snr_db: float, t: SnrThresholds) -> DepthSelection:
    """Threshold gating; an SNR equal to a threshold takes the shallower depth."""
    if not t.gamma_min <= snr_db <= t.gamma_max:
        raise ConfigurationError(
            f"SNR {snr_db} dB outside the configured range [{t.gamma_min}, {t.gamma_max}]"
        )
    if snr_db >= t.gamma1:
        depth = 1
    elif snr_db >= t.gamma2:
        depth = 2
    else:
        depth = 3
    return DepthSelection(depth, snr_db)


def _encoder_tier(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
        nn.ReLU(),
        nn.Conv2d(c_out, c_out, kernel_size=3, padding=1),
    )


def _decoder_tier(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(c_in, c_in, kernel_size=3, padding=1),
        nn.ReLU(),
        nn.ConvTranspose2d(c_in, c_out, kernel_size=3, padding=1),
    )


def power_normalize(y: torch.Tensor) -> torch.Tensor:
    """Scales every sample of the batch to unit mean power; all-zero samples stay zero."""
    power = y.pow(2).mean(dim=tuple(range(1, y.dim())), keepdim=True)
    safe = torch.where(power > 0, power, torch.ones_like(power))
    return y / torch.sqrt(safe)


class StackedChannelCodec(nn.Module):
    """
    Args:
        latent_channels (int): width of the semantic latent (96)
        widths (list of 3 ints): output width of encoder tiers 1, 2 and 3
    """

    def __init__(
        self,
        latent_channels: int = params.latent_channels,
        widths: Sequence[int] = tuple(params.channel_tier_widths),
    ):
        super().__init__()
        if len(widths) != MAX_DEPTH:
            raise ConfigurationError(f"Channel codec needs {MAX_DEPTH} tier widths, got {widths}")
        self.latent_channels = latent_channels
        self.widths = list(widths)
        chain = [latent_channels] + self.widths
        self.encoders = nn.ModuleList(
            _encoder_tier(chain[k], chain[k + 1]) for k in range(MAX_DEPTH)
        )
        self.decoders = nn.ModuleList(
            _decoder_tier(chain[k + 1], chain[k]) for k in range(MAX_DEPTH)
        )
        init_weights(self)

    def tier(self, k: int) -> nn.ModuleList:
        """Encoder and decoder of tier k (1-based)."""
        return nn.ModuleList([self.encoders[k - 1], self.decoders[k - 1]])

    def output_width(self, depth: int) -> int:
        return self.widths[depth - 1]

    def symbols(self, depth: int, height: int, width: int) -> int:
        """Real channel symbols sent per image at the given depth."""
        return self.output_width(depth) * height * width

    def encode(self, latent: torch.Tensor, depth: int) -> torch.Tensor:
        _check_depth(depth)
        if latent.dim() != 4 or latent.shape[1] != self.latent_channels:
            raise ShapeError(
                f"Channel encoder expects (B, {self.latent_channels}, H, W), "
                f"got {tuple(latent.shape)}"
            )
        x = latent
        for k in range(depth):
            if k > 0:
                x = torch.relu(x)
            x = self.encoders[k](x)
        return x

    def decode(self, received: torch.Tensor, depth: int) -> torch.Tensor:
        _check_depth(depth)
        if received.dim() != 4 or received.shape[1] != self.output_width(depth):
            raise ShapeError(
                f"Depth {depth} decoder expects {self.output_width(depth)} channels, "
                f"got {tuple(received.shape)}"
            )
        x = received
        for k in reversed(range(depth)):
            x = self.decoders[k](x)
            if k > 0:
                x = torch.relu(x)
        return x


def _check_depth(depth: int) -> None:
    if depth not in (1, 2, 3):
        raise ConfigurationError(f"Codec depth must be 1, 2 or 3, got {depth}")


def chan_encode(latent: torch.Tensor, depth: int, codec: StackedChannelCodec) -> torch.Tensor:
    """Active encoder tiers followed by unit-power normalisation."""
    return power_normalize(codec.encode(latent, depth))


def chan_decode(received: torch.Tensor, depth: int, codec: StackedChannelCodec) -> torch.Tensor:
    return codec.decode(received, depth)


def transmit_batch(
    y: torch.Tensor,
    gains: np.ndarray,
    snrs_db: Sequence[float],
    noise_seeds: Sequence[int],
    equalize: bool = True,
) -> torch.Tensor:
    """One block-fading draw and one SNR per sample of the batch."""
    received = [
        apply_channel(y[i], ChannelDraw(float(gains[i])), NoiseSpec(float(snrs_db[i])), seed, equalize)
        for i, seed in enumerate(noise_seeds)
    ]
    return torch.stack(received)


@dataclass
class StageLog:
    stage: int
    interval: Tuple[float, float]
    epochs: int
    epoch_losses: List[float] = field(default_factory=list)
    snr_draws: List[float] = field(default_factory=list)


def _changed_tensors(
    before: Dict[str, torch.Tensor], codec: StackedChannelCodec
) -> List[str]:
    after = codec.state_dict()
    return [name for name, value in before.items() if not torch.equal(value, after[name])]


def _tier_names(codec: StackedChannelCodec, tiers: Sequence[int]) -> List[str]:
    prefixes = [f"encoders.{k - 1}." for k in tiers] + [f"decoders.{k - 1}." for k in tiers]
    return [n for n in codec.state_dict() if any(n.startswith(p) for p in prefixes)]


def staged_train(
    latents: torch.Tensor,
    thresholds: SnrThresholds,
    channel: ChannelParams,
    config: "TrainingConfig",
    equalize: bool = True,
    on_stage_end: Optional[Callable[[StackedChannelCodec, StageLog], None]] = None,
) -> Tuple[StackedChannelCodec, List[StageLog]]:
    """
    Progressive freeze-and-extend training of the three tiers.

    Stage k trains tier k alone with every earlier tier frozen, at depth k,
    with each sample's SNR drawn uniformly on the stage interval. The loss is
    the latent MSE through a sampled fading channel.

    Parameters
    ----------
    latents : torch.Tensor
        (N, 96, H', W') semantic latents from the frozen semantic encoder.
    thresholds : SnrThresholds
        Gating thresholds and the SNR range.
    channel : ChannelParams
        Fading law of the training channel.
    config : TrainingConfig
        learning_rate, batch_size, stage_epochs, weight_decay and seed are used.
    equalize : bool, optional
        Receiver equalization. The default is True.
    on_stage_end : callable, optional
        Called with the codec and the stage log after every stage.

    Returns
    -------
    (StackedChannelCodec, List[StageLog])

    Raises
    ------
    InvariantViolationError
        If a frozen weight changed during a later stage.
    """
    if latents.shape[0] == 0:
        raise ConfigurationError("Channel codec training set is empty")
    seed_everything(config.seed)
    latents = latents.detach()
    codec = StackedChannelCodec(latent_channels=latents.shape[1])
    criterion = nn.MSELoss()
    generator = torch.Generator().manual_seed(config.seed)
    logs = []

    for stage in range(1, MAX_DEPTH + 1):
        low, high = thresholds.stage_interval(stage)
        frozen_names = _tier_names(codec, range(1, stage))
        frozen_before = {n: codec.state_dict()[n].clone() for n in frozen_names}

        set_requires_grad(codec, False)
        set_requires_grad(codec.tier(stage), True)
        optimizer = torch.optim.AdamW(
            codec.tier(stage).parameters(),
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
        )
        rng = np.random.default_rng(derive_seed(config.seed, stage))
        log = StageLog(stage, (low, high), config.stage_epochs)
        logger.info(
            f"Stage {stage}: training tier {stage} on SNR ({low}, {high}) dB, "
            f"{len(frozen_names)} frozen tensors"
        )

        for epoch in range(config.stage_epochs):
            codec.train()
            batch_losses = []
            for batch in minibatches(latents.shape[0], config.batch_size, generator):
                x = latents[batch]
                snrs = rng.uniform(low, high, size=len(batch))
                gains = sample_power_gains(channel, int(rng.integers(2**31)), len(batch))
                noise_seeds = [int(s) for s in rng.integers(2**31, size=len(batch))]
                log.snr_draws.extend(float(s) for s in snrs)

                optimizer.zero_grad()
                sent = chan_encode(x, stage, codec)
                received = transmit_batch(sent, gains, snrs, noise_seeds, equalize)
                loss = criterion(chan_decode(received, stage, codec), x)
                loss.backward()
                optimizer.step()
                batch_losses.append(float(loss))
            log.epoch_losses.append(mean_loss(batch_losses))
            logger.info(
                f"Stage {stage} epoch {epoch + 1}/{config.stage_epochs}: "
                f"loss {log.epoch_losses[-1]:.5f}"
            )

        changed = _changed_tensors(frozen_before, codec)
        if changed:
            raise InvariantViolationError(
                f"Frozen channel codec weights changed during stage {stage}: {changed}"
            )
        if log.snr_draws:
            logger.info(
                f"Stage {stage} SNR draws in [{min(log.snr_draws):.3f}, "
                f"{max(log.snr_draws):.3f}] dB"
            )
        check_finite(codec, "channel codec")
        logs.append(log)
        if on_stage_end is not None:
            on_stage_end(codec, log)

    set_requires_grad(codec, True)
    codec.eval()
    return codec, logs
