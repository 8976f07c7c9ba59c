import numpy as np
import pytest
import torch
from torch.func import functional_call

from src.config import SemanticCodecConfig, TrainingConfig
from src.errors import ConfigurationError, NumericalFailureError, ShapeError
from src.load import generate_synthetic
from src.semantic_codec import (
    PatchMerging,
    ReversePatchMerging,
    SemanticCodec,
    SwinBlock,
    TokenGrid,
    WindowAttention,
    cyclic_shift,
    patch_embed,
    patch_merge,
    reconstruction_mse,
    reverse_cyclic_shift,
    reverse_patch_merge,
    sem_decode,
    sem_encode,
    shift_attention_mask,
    train_sem_codec,
    window_attention,
    window_partition,
    window_reverse,
)
from src.utils import seed_everything

TINY = SemanticCodecConfig(
    patch_size=2, window=2, embed_dim=8, depths=(1, 2), heads=(1, 2), latent_channels=4
)


def test_default_codec_shapes():
    seed_everything(0)
    codec = SemanticCodec()
    image = np.random.default_rng(0).uniform(size=(64, 64, 3))
    embedded = patch_embed(image, codec)
    assert tuple(embedded.tokens.shape) == (1, 16, 16, 128)
    merged = patch_merge(embedded, codec)
    assert tuple(merged.tokens.shape) == (1, 8, 8, 256)
    assert merged.merges == 1
    assert tuple(reverse_patch_merge(merged, codec).tokens.shape) == (1, 16, 16, 128)

    with torch.no_grad():
        grid = sem_encode(image, codec)
        assert tuple(grid.tokens.shape) == (1, 8, 8, 96)
        assert tuple(grid.to_spatial().shape) == (1, 96, 8, 8)
        decoded = sem_decode(grid, codec)
    assert tuple(decoded.shape) == (1, 3, 64, 64)
    assert float(decoded.min()) >= 0.0 and float(decoded.max()) <= 1.0


def test_codec_rejects_bad_sizes():
    codec = SemanticCodec.from_config(TINY)
    with pytest.raises(ShapeError):
        codec.encode(torch.zeros(1, 3, 14, 16))
    with pytest.raises(ShapeError):
        codec.decode(TokenGrid(torch.zeros(1, 4, 4, 5), 2, 1))
    with pytest.raises(ShapeError):
        TokenGrid(torch.zeros(4, 4, 5), 2, 1)


def test_zero_grid_decodes():
    codec = SemanticCodec.from_config(TINY)
    with torch.no_grad():
        decoded = sem_decode(TokenGrid(torch.zeros(2, 4, 4, 4), 2, 1), codec)
    assert tuple(decoded.shape) == (2, 3, 16, 16)
    assert torch.isfinite(decoded).all()


def test_non_finite_codec():
    codec = SemanticCodec.from_config(TINY)
    with torch.no_grad():
        codec.enc_head.bias[0] = float("inf")
    with pytest.raises(NumericalFailureError):
        sem_encode(np.zeros((16, 16, 3)), codec)


def test_attention_rows_are_distributions():
    attention = WindowAttention(16, 4, 2)
    x = torch.randn(3, 16, 16)
    out, attn = attention(x)
    assert out.shape == x.shape
    assert attn.shape == (3, 2, 16, 16)
    assert torch.allclose(attn.sum(dim=-1), torch.ones(3, 2, 16))
    assert (attn >= 0).all()


def test_attention_smaller_window_and_errors():
    attention = WindowAttention(8, 4, 2)
    out, attn = attention(torch.randn(2, 4, 8), window=(2, 2))
    assert attn.shape == (2, 2, 4, 4)
    with pytest.raises(ShapeError):
        attention(torch.randn(2, 5, 8), window=(2, 2))
    with pytest.raises(ConfigurationError):
        WindowAttention(10, 4, 3)


def test_unshifted_block_is_window_local():
    torch.manual_seed(0)
    block = SwinBlock(16, 2, window=4, shifted=False)
    x = torch.randn(1, 8, 8, 16)
    perturbed = x.clone()
    perturbed[0, 0, 0] += 5.0
    with torch.no_grad():
        a = block(x)
        b = block(perturbed)
    assert not torch.allclose(a[0, :4, :4], b[0, :4, :4])
    assert torch.allclose(a[0, 4:], b[0, 4:], atol=1e-6)
    assert torch.allclose(a[0, :, 4:], b[0, :, 4:], atol=1e-6)


def test_shifted_block_mixes_windows():
    torch.manual_seed(0)
    grid = TokenGrid(torch.randn(1, 8, 8, 16), 4, 0)
    block = SwinBlock(16, 2, window=4, shifted=True)
    perturbed = grid.tokens.clone()
    perturbed[0, 3, 3] += 5.0
    with torch.no_grad():
        a = window_attention(grid, block).tokens
        b = window_attention(TokenGrid(perturbed, 4, 0), block).tokens
    assert not torch.allclose(a[0, 4, 4], b[0, 4, 4])


def test_window_attention_takes_window_and_shift_from_block():
    torch.manual_seed(3)
    grid = TokenGrid(torch.randn(1, 8, 8, 16), 4, 0)
    plain = SwinBlock(16, 2, window=4, shifted=False)
    shifted = SwinBlock(16, 2, window=4, shifted=True)
    shifted.load_state_dict(plain.state_dict())
    with torch.no_grad():
        a = window_attention(grid, plain)
        b = window_attention(grid, shifted)
        direct = plain(grid.tokens)
    assert torch.equal(a.tokens, direct)
    assert (a.patch_size, a.merges) == (4, 0)
    assert not torch.allclose(a.tokens, b.tokens)
    assert plain.effective_window(8, 8) == (4, 4)


def test_cyclic_shift_round_trip():
    x = torch.arange(2 * 6 * 6 * 3, dtype=torch.float32).view(2, 6, 6, 3)
    shifted = cyclic_shift(x, (1, 2))
    assert torch.equal(shifted[:, 0, 0], x[:, 1, 2])
    assert torch.equal(reverse_cyclic_shift(shifted, (1, 2)), x)


def test_window_partition_layout():
    x = torch.arange(4 * 4, dtype=torch.float32).view(1, 4, 4, 1)
    windows = window_partition(x, (2, 2))
    assert windows.shape == (4, 4, 1)
    assert windows[1, :, 0].tolist() == [2.0, 3.0, 6.0, 7.0]
    assert torch.equal(window_reverse(windows, (2, 2), 4, 4), x)


def test_shift_attention_mask():
    mask = shift_attention_mask(8, 8, (4, 4), (2, 2))
    assert mask.shape == (4, 16, 16)
    assert set(mask.unique().tolist()) <= {0.0, -100.0}
    assert (mask[0] == 0).all()
    assert (mask[3] == -100).any()
    assert torch.equal(mask, mask.transpose(1, 2))


def test_attention_gradcheck():
    torch.manual_seed(0)
    attention = WindowAttention(2, (1, 2), 1).double()
    x = torch.randn(1, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: attention(t)[0], (x,))

    names = [name for name, _ in attention.named_parameters()]
    values = tuple(p.detach().clone().requires_grad_(True) for p in attention.parameters())

    def _by_params(*tensors):
        return functional_call(attention, dict(zip(names, tensors)), (x.detach(),))[0]

    assert torch.autograd.gradcheck(_by_params, values)


def test_patch_merging_shapes_and_order():
    merge = PatchMerging(2)
    with torch.no_grad():
        merge.reduction.weight.zero_()
        merge.reduction.bias.zero_()
        # output 0 reads the x1 part (rows 1::2, cols 0::2)
        merge.reduction.weight[0, 2] = 1.0
    x = torch.arange(4 * 6 * 2, dtype=torch.float32).view(1, 4, 6, 2)
    out = merge(x)
    assert out.shape == (1, 2, 3, 4)
    assert torch.equal(out[..., 0], x[:, 1::2, 0::2, 0])
    with pytest.raises(ShapeError):
        merge(torch.zeros(1, 3, 4, 2))

    unmerge = ReversePatchMerging(2)
    assert unmerge(out).shape == (1, 4, 6, 2)


def test_reconstruction_mse_is_finite():
    codec = SemanticCodec.from_config(TINY)
    images = torch.rand(2, 3, 16, 16)
    assert np.isfinite(reconstruction_mse(images, codec))


def _images(n=4):
    return [s.image for s in generate_synthetic(n, 16, 2, seed=3)]


def test_train_sem_codec_reduces_loss():
    config = TrainingConfig(learning_rate=3e-3, batch_size=2, epochs=5, seed=0)
    codec, history = train_sem_codec(_images(), config, TINY)
    assert len(history) == 6
    assert history[-1] < history[0]
    assert not codec.training


def test_train_sem_codec_is_deterministic():
    config = TrainingConfig(learning_rate=1e-3, batch_size=2, epochs=1, seed=2)
    a, history_a = train_sem_codec(_images(), config, TINY)
    b, history_b = train_sem_codec(_images(), config, TINY)
    assert history_a == history_b
    for key, value in a.state_dict().items():
        assert torch.equal(b.state_dict()[key], value)
    with pytest.raises(ConfigurationError):
        train_sem_codec([], config, TINY)


def test_patch_embed_follows_patch_order():
    seed_everything(0)
    codec = SemanticCodec.from_config(TINY)
    image = np.random.default_rng(1).uniform(size=(16, 16, 3))
    swapped = image.copy()
    swapped[0:2, 0:2], swapped[0:2, 2:4] = image[0:2, 2:4], image[0:2, 0:2]
    with torch.no_grad():
        a = patch_embed(image, codec).tokens
        b = patch_embed(swapped, codec).tokens
    assert torch.allclose(a[0, 0, 0], b[0, 0, 1])
    assert torch.allclose(a[0, 0, 1], b[0, 0, 0])
    assert torch.equal(a[0, 1:], b[0, 1:])


def test_train_sem_codec_zero_learning_rate():
    config = TrainingConfig(learning_rate=0.0, batch_size=2, epochs=2, seed=4)
    codec, _ = train_sem_codec(_images(), config, TINY)
    seed_everything(4)
    fresh = SemanticCodec.from_config(TINY)
    for key, value in fresh.state_dict().items():
        assert torch.equal(codec.state_dict()[key], value)


@pytest.mark.slow
def test_toy_autoencoder_halves_reconstruction_error():
    images = [s.image for s in generate_synthetic(32, 16, 3, seed=8)]
    config = TrainingConfig(learning_rate=3e-3, batch_size=8, epochs=60, seed=0)
    _, history = train_sem_codec(images, config, TINY)
    assert history[-1] < 0.5 * history[0]
