import numpy as np
import pytest

from src.errors import ConfigurationError, ShapeError
from src.evaluation import EvalModel
from src.segmentation import SegmentationMap
from src.selection import (
    TASK_ONLY,
    BlurPolicy,
    TaskSpec,
    build_task_mask,
    mean_blur,
    payload_size,
    select,
)

POLICY = BlurPolicy.from_lists([-1e9, 12, 16, 20, 24], [0, 15, 9, 5, 1])
TASK = TaskSpec(frozenset({1}), (0, 0, 0))


def _blur_oracle(image, k):
    r = k // 2
    padded = np.pad(image.astype(np.float64), ((r, r), (r, r), (0, 0)), mode="edge")
    out = np.zeros(image.shape, dtype=np.float64)
    for i in range(image.shape[0]):
        for j in range(image.shape[1]):
            out[i, j] = padded[i : i + k, j : j + k].mean(axis=(0, 1))
    return out


def _scene(size=32, seed=0):
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, size=(size, size, 3)).astype(np.float64) / 255.0
    classes = np.zeros((size, size), dtype=int)
    classes[size // 4 : size // 2, size // 4 : size // 2] = 1
    classes[-4:, :] = 2
    return image, SegmentationMap(classes, 3)


def test_build_task_mask():
    _, seg_map = _scene(8)
    mask = build_task_mask(seg_map, TASK)
    assert mask.dtype == bool
    assert mask.sum() == 4
    assert build_task_mask(seg_map, TaskSpec(frozenset({1, 2}))).sum() == 4 + 32
    with pytest.raises(ConfigurationError):
        build_task_mask(seg_map, TaskSpec(frozenset({5})))


def test_mean_blur_matches_oracle():
    image, _ = _scene(12)
    for k in (3, 5, 9):
        assert np.allclose(mean_blur(image, k), _blur_oracle(image, k))


def test_mean_blur_identity_and_dtype():
    image, _ = _scene(8)
    assert np.array_equal(mean_blur(image, 1), image)
    image_8bit = (image * 255).astype(np.uint8)
    blurred = mean_blur(image_8bit, 3)
    assert blurred.dtype == np.uint8
    assert np.array_equal(blurred, np.rint(_blur_oracle(image_8bit, 3)).astype(np.uint8))


def test_mean_blur_errors():
    image, _ = _scene(8)
    with pytest.raises(ConfigurationError):
        mean_blur(image, 4)
    with pytest.raises(ConfigurationError):
        mean_blur(image, 9)
    with pytest.raises(ShapeError):
        mean_blur(image[..., 0], 3)


def test_tier_for():
    assert POLICY.tier_for(-50.0) == 0
    assert POLICY.tier_for(11.99) == 0
    assert POLICY.tier_for(12.0) == 1
    assert POLICY.tier_for(17.0) == 2
    assert POLICY.tier_for(100.0) == 4
    with pytest.raises(ConfigurationError):
        POLICY.tier_for(-2e9)
    with pytest.raises(ConfigurationError):
        POLICY.tier_for(float("nan"))
    assert POLICY.tier_with_kernel(9) == 2


@pytest.mark.parametrize(
    "thresholds, kernels",
    [
        ([0, 10, 10], [5, 3, 1]),
        ([0, 10], [4, 1]),
        ([0, 10, 20], [3, 5, 1]),
        ([0, 10], [5, 3]),
        ([0, 10], [5]),
        ([], []),
    ],
)
def test_invalid_policies(thresholds, kernels):
    with pytest.raises(ConfigurationError):
        BlurPolicy.from_lists(thresholds, kernels)


def test_select_top_tier_is_unchanged():
    image, seg_map = _scene()
    selected = select(image, seg_map, TASK, 10.0, EvalModel(30.0, 0.0, 0.0), POLICY)
    assert selected.tier_used == 4
    assert selected.kernel == 1
    assert np.array_equal(selected.pixels, image)


def test_select_task_only():
    image, seg_map = _scene()
    fill = TaskSpec(frozenset({1}), (255, 0, 0))
    selected = select(image, seg_map, fill, -10.0, EvalModel(5.0, 0.0, 0.0), POLICY)
    assert selected.tier_used == 0
    assert selected.kernel == TASK_ONLY
    mask = selected.mask
    assert np.array_equal(selected.pixels[mask], image[mask])
    assert np.all(selected.pixels[~mask] == [1.0, 0.0, 0.0])


def test_select_blurs_background_only():
    image, seg_map = _scene()
    selected = select(image, seg_map, TASK, 0.0, EvalModel(17.0, 0.0, 0.0), POLICY)
    assert selected.kernel == 9
    expected = np.where(selected.mask[..., None], image, mean_blur(image, 9))
    assert np.allclose(selected.pixels, expected)
    assert selected.predicted_quality == pytest.approx(17.0)


def test_select_uses_features():
    image, seg_map = _scene()
    # x_c = 1 at the top of the SNR range pushes the prediction above 24
    model = EvalModel(10.0, 0.0, 20.0)
    assert select(image, seg_map, TASK, 10.0, model, POLICY).tier_used == 4
    assert select(image, seg_map, TASK, -10.0, model, POLICY).tier_used == 0


def test_select_override_and_clipped_kernel():
    image, seg_map = _scene(8)
    selected = select(image, seg_map, TASK, 0.0, EvalModel(30.0, 0.0, 0.0), POLICY, tier_override=1)
    assert selected.kernel == 15
    expected = np.where(selected.mask[..., None], image, mean_blur(image, 7))
    assert np.allclose(selected.pixels, expected)
    with pytest.raises(ConfigurationError):
        select(image, seg_map, TASK, 0.0, EvalModel(30.0, 0.0, 0.0), POLICY, tier_override=5)


def test_select_shape_mismatch():
    image, seg_map = _scene(8)
    with pytest.raises(ShapeError):
        select(image[:4], seg_map, TASK, 0.0, EvalModel(30.0, 0.0, 0.0), POLICY)


def test_payload_shrinks_with_blur():
    image, seg_map = _scene(64)
    sizes = [
        payload_size(select(image, seg_map, TASK, 0.0, EvalModel(0.0, 0.0, 0.0), POLICY, tier_override=t).pixels)
        for t in range(5)
    ]
    assert sizes[0] < sizes[1] < sizes[4]
    assert sizes[2] < sizes[4]
    assert payload_size(image) == sizes[4]
    assert payload_size(image) == payload_size(image)


def test_task_spec_validation():
    with pytest.raises(ConfigurationError):
        TaskSpec(frozenset())
    with pytest.raises(ConfigurationError):
        TaskSpec(frozenset({1}), (0, 0, 300))
