"""
Hierarchical windowed-attention autoencoder mapping images to compact token
grids and back.

Token grids are laid out (B, H', W', C). The encoder embeds 4 x 4 patches,
runs windowed-attention blocks at two widths with one patch merge between
them, and projects to the latent width; the decoder mirrors it.
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

import src.params as params
from src.errors import ConfigurationError, ShapeError
from src.training import (
    as_float_image,
    check_finite,
    images_to_tensor,
    init_weights,
    mean_loss,
    minibatches,
)
from src.utils import seed_everything

if TYPE_CHECKING:
    from src.config import SemanticCodecConfig, TrainingConfig

logger = logging.getLogger(__name__)

Window = Tuple[int, int]


@dataclass
class TokenGrid:
    tokens: torch.Tensor
    patch_size: int
    merges: int

    def __post_init__(self):
        if self.tokens.dim() != 4:
            raise ShapeError(f"Token grid must be (B, H', W', C), got {tuple(self.tokens.shape)}")

    @property
    def grid_size(self) -> Tuple[int, int]:
        return tuple(self.tokens.shape[1:3])

    @property
    def channels(self) -> int:
        return self.tokens.shape[3]

    def to_spatial(self) -> torch.Tensor:
        """(B, C, H', W') view for the convolutional channel codec."""
        return self.tokens.permute(0, 3, 1, 2).contiguous()

    @classmethod
    def from_spatial(cls, x: torch.Tensor, patch_size: int, merges: int) -> "TokenGrid":
        return cls(x.permute(0, 2, 3, 1).contiguous(), patch_size, merges)


def to_2tuple(window: Union[int, Sequence[int]]) -> Window:
    if isinstance(window, int):
        return (window, window)
    return (int(window[0]), int(window[1]))


def window_partition(x: torch.Tensor, window: Window) -> torch.Tensor:
    """
    Args:
        x: (B, H, W, C)
        window: window height and width

    Returns:
        windows: (num_windows*B, wh*ww, C)
    """
    b, h, w, c = x.shape
    wh, ww = window
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).contiguous().view(-1, wh * ww, c)


def window_reverse(windows: torch.Tensor, window: Window, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition, back to (B, H, W, C)."""
    wh, ww = window
    b = windows.shape[0] // ((h // wh) * (w // ww))
    x = windows.view(b, h // wh, w // ww, wh, ww, -1)
    return x.permute(0, 1, 3, 2, 4, 5).contiguous().view(b, h, w, -1)


def cyclic_shift(x: torch.Tensor, shift: Window) -> torch.Tensor:
    return torch.roll(x, shifts=(-shift[0], -shift[1]), dims=(1, 2))


def reverse_cyclic_shift(x: torch.Tensor, shift: Window) -> torch.Tensor:
    return torch.roll(x, shifts=(shift[0], shift[1]), dims=(1, 2))


def shift_attention_mask(h: int, w: int, window: Window, shift: Window) -> torch.Tensor:
    """(num_windows, N, N) additive mask keeping shifted windows from mixing
    tokens that were not adjacent before the roll."""
    img_mask = torch.zeros((1, h, w, 1))
    h_slices = (slice(0, -window[0]), slice(-window[0], -shift[0]), slice(-shift[0], None))
    w_slices = (slice(0, -window[1]), slice(-window[1], -shift[1]), slice(-shift[1], None))
    region = 0
    for hs in h_slices:
        for ws in w_slices:
            img_mask[:, hs, ws, :] = region
            region += 1
    mask_windows = window_partition(img_mask, window).squeeze(-1)
    attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return attn_mask.masked_fill(attn_mask != 0, -100.0).masked_fill(attn_mask == 0, 0.0)


class WindowAttention(nn.Module):
    """
    Multi-head self-attention inside a window with a learned relative position
    bias. Windows smaller than the configured one reuse the same bias table.

    Args:
        dim (int): token width
        window (int or tuple): largest window height and width
        num_heads (int): attention heads; dim must be divisible by it
    """

    def __init__(self, dim: int, window: Union[int, Window], num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"Width {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.window = to_2tuple(window)
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        wh, ww = self.window
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * wh - 1) * (2 * ww - 1), num_heads)
        )
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self._index_cache: Dict[Window, torch.Tensor] = {}

    def relative_position_index(self, window: Window) -> torch.Tensor:
        if window not in self._index_cache:
            coords = torch.stack(
                torch.meshgrid(torch.arange(window[0]), torch.arange(window[1]), indexing="ij")
            ).flatten(1)
            relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
            rows = relative[..., 0] + self.window[0] - 1
            cols = relative[..., 1] + self.window[1] - 1
            self._index_cache[window] = rows * (2 * self.window[1] - 1) + cols
        return self._index_cache[window]

    def forward(
        self,
        x: torch.Tensor,
        window: Optional[Window] = None,
        mask: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            x: (num_windows*B, N, C) window tokens
            window: window of the tokens, defaults to the configured one
            mask: (num_windows, N, N) additive mask or None

        Returns:
            projected tokens (num_windows*B, N, C) and attention weights
            (num_windows*B, heads, N, N)
        """
        window = self.window if window is None else window
        b_, n, c = x.shape
        if n != window[0] * window[1] or window[0] > self.window[0] or window[1] > self.window[1]:
            raise ShapeError(f"{n} tokens do not form a window of {window} within {self.window}")
        qkv = self.qkv(x).reshape(b_, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)

        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index(window).reshape(-1)]
        attn = attn + bias.view(n, n, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            n_windows = mask.shape[0]
            attn = attn.view(b_ // n_windows, n_windows, self.num_heads, n, n)
            attn = (attn + mask.unsqueeze(1).unsqueeze(0)).view(-1, self.num_heads, n, n)
        attn = torch.softmax(attn, dim=-1)

        out = (attn @ v).transpose(1, 2).reshape(b_, n, c)
        return self.proj(out), attn


class SwinBlock(nn.Module):
    """Pre-norm windowed attention plus feed-forward, each with a residual.
    A shifted block rolls the grid by half a window first."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        window: int = params.window_size,
        shifted: bool = False,
        mlp_ratio: float = params.mlp_ratio,
    ):
        super().__init__()
        self.window = to_2tuple(window)
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, self.window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def effective_window(self, h: int, w: int) -> Window:
        window = (min(self.window[0], h), min(self.window[1], w))
        if h % window[0] or w % window[1]:
            raise ShapeError(f"Window {window} does not divide the {h} x {w} token grid")
        return window

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, h, w, _ = x.shape
        window = self.effective_window(h, w)
        shift = (window[0] // 2, window[1] // 2)
        use_shift = self.shifted and (h > window[0] or w > window[1]) and min(shift) > 0

        shortcut = x
        x = self.norm1(x)
        mask = None
        if use_shift:
            x = cyclic_shift(x, shift)
            mask = shift_attention_mask(h, w, window, shift).to(x.dtype)
        out, _ = self.attn(window_partition(x, window), window, mask)
        x = window_reverse(out, window, h, w)
        if use_shift:
            x = reverse_cyclic_shift(x, shift)

        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    """Flattens non-overlapping p x p patches and projects them linearly."""

    def __init__(self, patch_size: int, in_channels: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(patch_size * patch_size * in_channels, dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b, c, h, w = images.shape
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(f"Image sides {h} x {w} are not divisible by patch size {p}")
        patches = images.view(b, c, h // p, p, w // p, p).permute(0, 2, 4, 3, 5, 1)
        return self.proj(patches.reshape(b, h // p, w // p, p * p * c))


class PatchUnembed(nn.Module):
    def __init__(self, patch_size: int, out_channels: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.out_channels = out_channels
        self.proj = nn.Linear(dim, patch_size * patch_size * out_channels)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, gh, gw, _ = tokens.shape
        p, c = self.patch_size, self.out_channels
        patches = self.proj(tokens).view(b, gh, gw, p, p, c)
        return patches.permute(0, 5, 1, 3, 2, 4).reshape(b, c, gh * p, gw * p)


class PatchMerging(nn.Module):
    """Concatenates 2 x 2 neighbourhoods (4C) and projects to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduction = nn.Linear(4 * dim, 2 * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, h, w, _ = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"Patch merging needs even grid sides, got {h} x {w}")
        x0 = x[:, 0::2, 0::2, :]
        x1 = x[:, 1::2, 0::2, :]
        x2 = x[:, 0::2, 1::2, :]
        x3 = x[:, 1::2, 1::2, :]
        return self.reduction(torch.cat([x0, x1, x2, x3], dim=-1))


class ReversePatchMerging(nn.Module):
    """Projects 2C to 4C and redistributes the four C-wide parts over 2 x 2."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.expansion = nn.Linear(2 * dim, 4 * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, _ = x.shape
        x0, x1, x2, x3 = self.expansion(x).split(self.dim, dim=-1)
        out = x.new_zeros(b, 2 * h, 2 * w, self.dim)
        out[:, 0::2, 0::2, :] = x0
        out[:, 1::2, 0::2, :] = x1
        out[:, 0::2, 1::2, :] = x2
        out[:, 1::2, 1::2, :] = x3
        return out


def _blocks(dim: int, depth: int, heads: int, window: int, shift_windows: bool) -> nn.Sequential:
    return nn.Sequential(
        *[
            SwinBlock(dim, heads, window, shifted=shift_windows and i % 2 == 1)
            for i in range(depth)
        ]
    )


class SemanticCodec(nn.Module):
    """
    Args:
        patch_size (int): side of the embedded patches
        window (int): attention window side
        embed_dim (int): stage-1 width; stage 2 runs at twice this
        depths (list of 2 ints): blocks per stage
        heads (list of 2 ints): heads per stage
        latent_channels (int): width of the transmitted latent
        shift_windows (bool): alternate shifted windows inside each stage
        in_channels (int): image channels
    """

    def __init__(
        self,
        patch_size: int = params.patch_size,
        window: int = params.window_size,
        embed_dim: int = params.embed_dim,
        depths: Sequence[int] = tuple(params.stage_depths),
        heads: Sequence[int] = tuple(params.stage_heads),
        latent_channels: int = params.latent_channels,
        shift_windows: bool = True,
        in_channels: int = 3,
    ):
        super().__init__()
        if len(depths) != 2 or len(heads) != 2:
            raise ConfigurationError("Semantic codec expects two stages of depths and heads")
        self.patch_size = patch_size
        self.merges = 1
        self.latent_channels = latent_channels
        wide = 2 * embed_dim

        self.patch_embed = PatchEmbed(patch_size, in_channels, embed_dim)
        self.enc_stage1 = _blocks(embed_dim, depths[0], heads[0], window, shift_windows)
        self.merge = PatchMerging(embed_dim)
        self.enc_stage2 = _blocks(wide, depths[1], heads[1], window, shift_windows)
        self.enc_norm = nn.LayerNorm(wide)
        self.enc_head = nn.Linear(wide, latent_channels)

        self.dec_head = nn.Linear(latent_channels, wide)
        self.dec_stage2 = _blocks(wide, depths[1], heads[1], window, shift_windows)
        self.unmerge = ReversePatchMerging(embed_dim)
        self.dec_stage1 = _blocks(embed_dim, depths[0], heads[0], window, shift_windows)
        self.patch_unembed = PatchUnembed(patch_size, in_channels, embed_dim)
        init_weights(self)

    @classmethod
    def from_config(cls, arch: "SemanticCodecConfig") -> "SemanticCodec":
        return cls(
            patch_size=arch.patch_size,
            window=arch.window,
            embed_dim=arch.embed_dim,
            depths=tuple(arch.depths),
            heads=tuple(arch.heads),
            latent_channels=arch.latent_channels,
            shift_windows=arch.shift_windows,
        )

    @property
    def downsampling(self) -> int:
        return self.patch_size * 2**self.merges

    def encode(self, images: torch.Tensor) -> TokenGrid:
        _, _, h, w = images.shape
        if h % self.downsampling or w % self.downsampling:
            raise ShapeError(
                f"Image sides {h} x {w} must be divisible by {self.downsampling}"
            )
        x = self.enc_stage1(self.patch_embed(images))
        x = self.enc_stage2(self.merge(x))
        return TokenGrid(self.enc_head(self.enc_norm(x)), self.patch_size, self.merges)

    def decode(self, grid: TokenGrid) -> torch.Tensor:
        if grid.channels != self.latent_channels:
            raise ShapeError(
                f"Semantic decoder expects {self.latent_channels} channels, got {grid.channels}"
            )
        x = self.dec_stage2(self.dec_head(grid.tokens))
        x = self.dec_stage1(self.unmerge(x))
        return self.patch_unembed(x)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(images))


def _as_batch(image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image if image.dim() == 4 else image.unsqueeze(0)
    return images_to_tensor([as_float_image(image)])


def patch_embed(image: Union[np.ndarray, torch.Tensor], codec: SemanticCodec) -> TokenGrid:
    return TokenGrid(codec.patch_embed(_as_batch(image)), codec.patch_size, 0)


def patch_merge(grid: TokenGrid, codec: SemanticCodec) -> TokenGrid:
    return TokenGrid(codec.merge(grid.tokens), grid.patch_size, grid.merges + 1)


def reverse_patch_merge(grid: TokenGrid, codec: SemanticCodec) -> TokenGrid:
    return TokenGrid(codec.unmerge(grid.tokens), grid.patch_size, grid.merges - 1)


def window_attention(grid: TokenGrid, block: SwinBlock) -> TokenGrid:
    """
    One (shifted-)window attention block over a token grid.

    The block carries everything the operation is parameterised by: the
    window size (`block.window`), the learned weights (`block.parameters()`)
    and the shift flag (`block.shifted`). Build it with
    `SwinBlock(dim, heads, window=..., shifted=...)`.
    """
    return TokenGrid(block(grid.tokens), grid.patch_size, grid.merges)


def sem_encode(image: Union[np.ndarray, torch.Tensor], codec: SemanticCodec) -> TokenGrid:
    check_finite(codec, "semantic codec")
    return codec.encode(_as_batch(image))


def sem_decode(grid: TokenGrid, codec: SemanticCodec, clamp: bool = True) -> torch.Tensor:
    """Reconstructed (B, 3, H, W) images, clamped to [0, 1] unless training."""
    check_finite(codec, "semantic codec")
    images = codec.decode(grid)
    return images.clamp(0.0, 1.0) if clamp else images


def reconstruction_mse(images: torch.Tensor, codec: SemanticCodec) -> float:
    with torch.no_grad():
        return float(torch.mean((sem_decode(sem_encode(images, codec), codec) - images) ** 2))


def train_sem_codec(
    images: Sequence[np.ndarray],
    config: "TrainingConfig",
    arch: Optional["SemanticCodecConfig"] = None,
) -> Tuple[SemanticCodec, List[float]]:
    """
    Trains encode then decode with an MSE loss, no channel in the loop.

    Parameters
    ----------
    images : list of np.ndarray
        H x W x 3 training images.
    config : TrainingConfig
        Learning rate, batch size, epochs and seed.
    arch : SemanticCodecConfig, optional
        Architecture; the defaults are used when omitted.

    Returns
    -------
    (SemanticCodec, List[float])
        Trained codec and the training-set loss before training followed by
        the loss after each epoch.
    """
    if len(images) == 0:
        raise ConfigurationError("Semantic codec training set is empty")
    seed_everything(config.seed)
    codec = SemanticCodec() if arch is None else SemanticCodec.from_config(arch)
    batch = images_to_tensor([as_float_image(image) for image in images])
    optimizer = torch.optim.Adam(codec.parameters(), lr=config.learning_rate)
    criterion = nn.MSELoss()
    generator = torch.Generator().manual_seed(config.seed)

    def _set_loss() -> float:
        with torch.no_grad():
            return float(criterion(codec(batch), batch))

    history = [_set_loss()]
    logger.info(f"Semantic codec initial loss {history[0]:.6f}")
    for epoch in range(config.epochs):
        codec.train()
        batch_losses = []
        for idx in minibatches(len(images), config.batch_size, generator):
            optimizer.zero_grad()
            loss = criterion(codec(batch[idx]), batch[idx])
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss))
        history.append(_set_loss())
        logger.info(
            f"Semantic codec epoch {epoch + 1}/{config.epochs}: "
            f"batch loss {mean_loss(batch_losses):.6f}, set loss {history[-1]:.6f}"
        )
    check_finite(codec, "semantic codec")
    codec.eval()
    return codec, history
