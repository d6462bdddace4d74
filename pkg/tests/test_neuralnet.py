import json

import numpy as np
import pytest
from arsenal.maths import compare

import examples
from shm.nonlin.dataset import make_lagged, normalize, split
from shm.nonlin.neuralnet import (
    MODEL_VERSION,
    DegenerateTargets,
    DimensionMismatch,
    MlpModel,
    NonFiniteLoss,
    TrainConfig,
    forward,
    load_model,
    loss_and_grad,
    nmse,
    objective,
    part_nmse,
    predict,
    recalibrate,
    save_model,
    train,
)
from shm.nonlin.util import MalformedFile

quick = TrainConfig(max_epochs=20, batch_size=64, learning_rate=1e-2, patience=5, seed=0)


def test_forward_matches_batch():
    m = examples.random_model(3, 5, 2, seed=1)
    X = np.random.default_rng(0).standard_normal((7, 3))
    P = predict(m, X)
    assert P.shape == (7, 2)
    for x, p in zip(X, P):
        assert np.allclose(forward(m, x), p)
    assert np.allclose(m(X), P)


def test_forward_by_hand():
    m = examples.random_model(2, 4, 1, seed=3)
    x = np.array([0.4, -1.3])
    hidden = []
    for i in range(4):
        z = m.bias_hidden[i] + sum(m.weights_hidden[i, j] * x[j] for j in range(2))
        hidden.append(np.tanh(z))
    want = m.bias_out[0] + sum(m.weights_out[0, i] * hidden[i] for i in range(4))
    assert forward(m, x).shape == (1,)
    assert forward(m, x)[0] == pytest.approx(want, abs=1e-12)
    assert predict(m, x[None, :])[0, 0] == pytest.approx(want, abs=1e-12)


def test_dimension_checks():
    m = examples.random_model(3, 5)
    with pytest.raises(DimensionMismatch):
        forward(m, np.ones(4))
    with pytest.raises(DimensionMismatch):
        forward(m, np.ones((2, 3)))
    with pytest.raises(DimensionMismatch):
        predict(m, np.ones((2, 2)))
    with pytest.raises(DimensionMismatch):
        MlpModel(np.ones((5, 3)), np.ones(4), np.ones((1, 5)), np.ones(1))
    with pytest.raises(ValueError):
        MlpModel(np.full((5, 3), np.nan), np.ones(5), np.ones((1, 5)), np.ones(1))


def test_init():
    m = MlpModel.init(8, 100, 1, seed=0)
    assert (m.input_dim, m.hidden_dim, m.output_dim) == (8, 100, 1)
    assert np.all(m.bias_hidden == 0) and np.all(m.bias_out == 0)
    assert np.abs(m.weights_hidden).max() <= np.sqrt(6 / 108)
    assert np.array_equal(MlpModel.init(8, 100, 1, seed=0).weights_out, m.weights_out)


def fd_parameter_gradient(m, X, Y, l2, eps=1e-5):
    out = []
    for i, p in enumerate(m.params):
        g = np.empty_like(p)
        for j in range(p.size):
            a = m.copy()
            b = m.copy()
            a.params[i].flat[j] += eps
            b.params[i].flat[j] -= eps
            g.flat[j] = (objective(a, X, Y, l2) - objective(b, X, Y, l2)) / (2 * eps)
        out.append(g)
    return out


def test_backprop():
    m = examples.random_model(3, 5, 2, seed=2, scale=0.5)
    rng = np.random.default_rng(3)
    X = rng.standard_normal((10, 3))
    Y = rng.standard_normal((10, 2))
    l2 = 0.01

    loss, grads = loss_and_grad(m, X, Y, l2)
    assert loss == pytest.approx(objective(m, X, Y, l2))

    want = fd_parameter_gradient(m, X, Y, l2)
    have = {(i, j): g.flat[j] for i, g in enumerate(grads) for j in range(g.size)}
    want = {(i, j): g.flat[j] for i, g in enumerate(want) for j in range(g.size)}
    assert compare(have, want, verbose=0).max_err <= 1e-6


def test_backprop_on_small_models():
    rng = np.random.default_rng(5)
    for seed in range(100):
        m = examples.random_model(2, 4, 1, seed=seed)
        X = rng.standard_normal((8, 2))
        Y = rng.standard_normal((8, 1))
        _, grads = loss_and_grad(m, X, Y, 1e-3)
        for have, want in zip(grads, fd_parameter_gradient(m, X, Y, 1e-3)):
            assert np.allclose(have, want, rtol=1e-6, atol=1e-8), seed


def test_nmse():
    assert nmse([1, 2, 4], [1, 2, 3]) == pytest.approx(50.0)
    y = np.random.default_rng(0).standard_normal(100)
    assert nmse(np.full(100, y.mean()), y) == pytest.approx(100.0)
    assert nmse(y, y) == 0
    with pytest.raises(DegenerateTargets):
        nmse([1, 2, 3], [2, 2, 2])
    with pytest.raises(ValueError):
        nmse([1, 2], [1, 2, 3])


def test_nmse_affine_invariance():
    rng = np.random.default_rng(1)
    y = rng.standard_normal(50)
    p = y + 0.3 * rng.standard_normal(50)
    assert nmse(-4 * p + 7, -4 * y + 7) == pytest.approx(nmse(p, y))


def test_train_config_checks():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, patience=20)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    TrainConfig(max_epochs=0)


def test_train_keeps_best_snapshot():
    D = examples.noise_dataset()
    m0 = MlpModel.init(D.input_dim, 8, 1, seed=0)
    before = [p.copy() for p in m0.params]

    m, report = train(m0, D, quick)
    assert all(np.array_equal(p, q) for p, q in zip(m0.params, before))
    assert 1 <= report.epochs_run <= quick.max_epochs
    assert len(report.loss_history) == report.epochs_run
    assert 0 <= report.best_epoch <= report.epochs_run
    assert report.nmse_validation == pytest.approx(part_nmse(m, D, "validation"))
    assert m.normalization == D.normalization and m.l2_weight == quick.l2_weight

    if report.best_epoch > 0:
        val = [v for _, v in report.loss_history]
        assert val[report.best_epoch - 1] == min(val)

    # same seed, same result
    m2, report2 = train(m0, D, quick)
    assert all(np.array_equal(p, q) for p, q in zip(m.params, m2.params))
    assert report2.loss_history == report.loss_history


def test_full_batch_descent_decreases_loss():
    D = examples.noise_dataset()
    cfg = TrainConfig(
        max_epochs=50, batch_size=len(D.rows("train")), learning_rate=1e-3, momentum=0.0, patience=50
    )
    _, report = train(MlpModel.init(D.input_dim, 8, seed=1), D, cfg)
    loss = [t for t, _ in report.loss_history]
    assert len(loss) == 50
    assert np.all(np.diff(loss) <= 0)


def test_heavy_weight_decay_gives_mean_predictor():
    D = examples.noise_dataset()
    # step of 1 / (2 l2) cancels the decayed weights each update
    cfg = TrainConfig(
        max_epochs=5, batch_size=64, learning_rate=5e-7, l2_weight=1e6, momentum=0.0, patience=5
    )
    m, report = train(MlpModel.init(D.input_dim, 8, seed=0), D, cfg)
    assert report.best_epoch > 0
    assert np.abs(m.weights_hidden).max() < 1e-4
    assert np.abs(m.weights_out).max() < 1e-4
    assert report.nmse_train == pytest.approx(100, abs=1)
    assert report.nmse_validation == pytest.approx(100, abs=5)
    assert report.nmse_test == pytest.approx(100, abs=5)


def test_zero_epochs_returns_start():
    D = examples.noise_dataset()
    m0 = MlpModel.init(D.input_dim, 8, 1, seed=0)
    m, report = train(m0, D, TrainConfig(max_epochs=0))
    assert all(np.array_equal(p, q) for p, q in zip(m.params, m0.params))
    assert report.epochs_run == 0 and report.loss_history == []


def test_train_fits_linear_recursion():
    model, report, data = examples.trained_recursion_model()
    print(report)
    assert report.passes()
    assert max(report.nmse) < 1.0


def test_train_needs_normalized_data():
    D = split(make_lagged(examples.noise_records(), 2, 1))
    with pytest.raises(ValueError):
        train(MlpModel.init(D.input_dim, 8), D, quick)
    with pytest.raises(DimensionMismatch):
        train(MlpModel.init(3, 8), examples.noise_dataset(), quick)


def test_divergent_training():
    D = examples.noise_dataset()
    cfg = TrainConfig(max_epochs=100, learning_rate=1e4, momentum=0.0, patience=100)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteLoss):
        train(MlpModel.init(D.input_dim, 8, seed=0), D, cfg)


def test_recalibrate_uses_frozen_statistics():
    base = examples.noise_dataset(seed=0)
    m, _ = train(MlpModel.init(base.input_dim, 8), base, quick)

    raw = split(make_lagged(examples.noise_records(seed=1), 2, 1), seed=1)
    with pytest.raises(ValueError):
        recalibrate(m, normalize(raw), quick)

    new = normalize(raw, stats=base.normalization)
    r, _ = recalibrate(m, new, TrainConfig(max_epochs=0))
    assert all(np.array_equal(p, q) for p, q in zip(r.params, m.params))
    r, report = recalibrate(m, new, quick)
    assert r.normalization == base.normalization
    assert report.nmse_validation <= part_nmse(m, new, "validation") + 1e-9


def test_recalibrate_on_unchanged_data():
    model, report, data = examples.trained_recursion_model()
    cfg = TrainConfig(
        max_epochs=30, batch_size=256, learning_rate=1e-3, l2_weight=examples.recursion_train.l2_weight,
        patience=10, seed=1,
    )
    r, again = recalibrate(model, data, cfg)
    assert np.allclose(again.nmse, report.nmse, atol=0.5)
    assert again.nmse_validation <= report.nmse_validation + 1e-9

    before = np.concatenate([p.ravel() for p in model.params])
    after = np.concatenate([p.ravel() for p in r.params])
    assert np.linalg.norm(after - before) / np.linalg.norm(before) < 0.1


def test_model_file(tmp_path):
    D = examples.noise_dataset()
    m, _ = train(MlpModel.init(D.input_dim, 8), D, quick)
    path = save_model(m, tmp_path / "dof1.json", normalization_ref="datasets/baseline/dof1.npz")
    n = load_model(path)
    assert np.array_equal(predict(n, D.inputs), predict(m, D.inputs))
    assert n.normalization == m.normalization and n.l2_weight == m.l2_weight

    d = json.loads(path.read_text())
    assert d["normalization_ref"] == "datasets/baseline/dof1.npz"
    assert d["hidden_activation"] == "tanh" and d["output_activation"] == "linear"

    d["version"] = "mlp-model/0"
    path.write_text(json.dumps(d))
    with pytest.raises(MalformedFile) as e:
        load_model(path)
    assert "mlp-model/0" in str(e.value) and MODEL_VERSION in str(e.value)

    d["version"] = MODEL_VERSION
    d["bias_hidden"] = d["bias_hidden"][:-1]
    path.write_text(json.dumps(d))
    with pytest.raises(MalformedFile):
        load_model(path)

    del d["weights_out"]
    path.write_text(json.dumps(d))
    with pytest.raises(MalformedFile) as e:
        load_model(path)
    assert "weights_out" in str(e.value)


if __name__ == "__main__":
    from arsenal import testing_framework

    testing_framework(globals())
