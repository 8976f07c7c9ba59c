import numpy as np
import pytest
from sklearn.linear_model import LinearRegression

from src.errors import ConfigurationError, IngestionError, NumericalFailureError, ShapeError
from src.evaluation import (
    EvalFeatures,
    EvalModel,
    TrainSample,
    descend,
    extract_features,
    fit,
    gradient,
    init_model,
    load_samples,
    loss,
    normalise_snr,
    predict,
    save_samples,
)
from src.segmentation import SegmentationMap
from src.selection import TaskSpec


def _linear_samples(n=60, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        x_s, x_c = rng.uniform(0, 1, size=2)
        y = 5 + 2 * x_s - x_c + noise * rng.normal()
        samples.append(TrainSample(EvalFeatures(x_s, x_c), y))
    return samples


def test_predict():
    assert predict(EvalModel(1.0, 2.0, 3.0), EvalFeatures(0.5, 1.0)) == pytest.approx(5.0)
    assert predict(EvalModel(1.0, 2.0, 3.0), EvalFeatures(1.0, 1.0)) == pytest.approx(6.0)


def test_loss():
    samples = [TrainSample(EvalFeatures(0.0, 0.0), 2.0), TrainSample(EvalFeatures(1.0, 1.0), 6.0)]
    assert loss(EvalModel(0.0, 0.0, 0.0), samples) == pytest.approx(20.0)
    assert loss(EvalModel(2.0, 0.0, 0.0), samples) == pytest.approx(8.0)
    assert loss(EvalModel(2.0, 2.0, 2.0), samples) == pytest.approx(0.0)
    assert loss(EvalModel(1.0, 0.0, 0.0), [TrainSample(EvalFeatures(0.3, 0.7), 3.0)]) == pytest.approx(4.0)


def test_gradient_single_sample():
    f = EvalFeatures(0.25, 0.5)
    model = EvalModel(0.0, 0.0, 0.0)
    r = 4.0
    g = gradient(model, [TrainSample(f, r)])
    assert g == pytest.approx((-2 * r, -2 * r * 0.25, -2 * r * 0.5))


def test_gradient_matches_finite_differences():
    samples = _linear_samples(20, noise=0.3)
    model = EvalModel(0.4, -1.2, 2.0)
    g = gradient(model, samples)
    h = 1e-6
    for j in range(3):
        up = model.weights.copy()
        down = model.weights.copy()
        up[j] += h
        down[j] -= h
        numeric = (loss(EvalModel.from_weights(up), samples) - loss(EvalModel.from_weights(down), samples)) / (2 * h)
        assert g[j] == pytest.approx(numeric, rel=1e-5, abs=1e-7)


def test_fit_recovers_linear_weights():
    samples = _linear_samples()
    model = fit(samples, alpha=0.05, epochs=5000, seed=0)
    x = np.array([[s.features.x_s, s.features.x_c] for s in samples])
    y = np.array([s.y for s in samples])
    oracle = LinearRegression().fit(x, y)
    assert model.w0 == pytest.approx(oracle.intercept_, rel=0.01)
    assert model.w1 == pytest.approx(oracle.coef_[0], rel=0.01)
    assert model.w2 == pytest.approx(oracle.coef_[1], rel=0.01)
    assert model.weights == pytest.approx([5.0, 2.0, -1.0], rel=0.01)
    assert model.alpha == 0.05


def test_descend_zero_rate_keeps_weights():
    samples = _linear_samples(10)
    start = init_model(3)
    model, history = descend(samples, start, alpha=0.0, epochs=50)
    assert np.array_equal(model.weights, start.weights)
    assert len(history) == 51
    assert len(set(history)) == 1


def test_descend_loss_decreases():
    samples = _linear_samples(10)
    _, history = descend(samples, init_model(0), alpha=0.05, epochs=200)
    assert all(b <= a for a, b in zip(history, history[1:]))


def test_descend_divergence():
    with pytest.raises(NumericalFailureError) as e:
        descend(_linear_samples(10), init_model(0), alpha=1e6, epochs=2000)
    assert e.value.details["alpha"] == 1e6
    with pytest.raises(ConfigurationError):
        descend(_linear_samples(10), init_model(0), alpha=-0.1, epochs=1)


def test_fit_needs_three_samples():
    with pytest.raises(ConfigurationError):
        fit(_linear_samples(2), 0.05, 10, 0)


def test_loss_empty():
    with pytest.raises(ConfigurationError):
        loss(EvalModel(0.0, 0.0, 0.0), [])


def test_init_model_is_seeded():
    assert init_model(1) == init_model(1)
    assert np.all(np.abs(init_model(1).weights) < 0.1)


def test_normalise_snr():
    assert normalise_snr(0.0, (-10.0, 10.0)) == pytest.approx(0.5)
    assert normalise_snr(-10.0, (-10.0, 10.0)) == pytest.approx(0.0)
    assert normalise_snr(25.0, (-10.0, 10.0)) == pytest.approx(1.0)


def test_extract_features():
    classes = np.zeros((4, 4), dtype=int)
    classes[:2] = 1
    seg_map = SegmentationMap(classes, 2)
    f = extract_features(np.zeros((4, 4, 3)), seg_map, TaskSpec(frozenset({1})), 0.0)
    assert (f.x_s, f.x_c) == pytest.approx((0.5, 0.5))
    with pytest.raises(ShapeError):
        extract_features(np.zeros((4, 5, 3)), seg_map, TaskSpec(frozenset({1})), 0.0)


def test_non_finite_inputs():
    with pytest.raises(ConfigurationError):
        EvalFeatures(float("nan"), 0.0)
    with pytest.raises(ConfigurationError):
        TrainSample(EvalFeatures(0.1, 0.2), float("inf"))


def test_samples_file(tmp_path):
    samples = _linear_samples(5)
    path = tmp_path / "eval_samples.csv"
    save_samples(samples, path)
    loaded = load_samples(path)
    assert [s.y for s in loaded] == pytest.approx([s.y for s in samples])

    path.write_text("x_s,y\n0.1,3\n")
    with pytest.raises(IngestionError):
        load_samples(path)
