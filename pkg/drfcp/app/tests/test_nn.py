import json

import numpy as np
import pytest

from drfcp.app.exceptions import DataError, DivergenceError, TrainingDivergence
from drfcp.app.learning.dataset import Dataset
from drfcp.app.learning.nn import (
    MlpConfig,
    MlpModel,
    Mode,
    OptimizerState,
    PlateauSchedule,
    TrainSchedule,
    adam_step,
    backward,
    forward,
    grad_check,
    loss_mse,
    loss_mse_grad,
    model_from_dict,
    model_to_dict,
    train,
)


def linear_model(weights, input_size=None):
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    config = MlpConfig(layer_sizes=(weights.shape[1],), dropout_prob=0.0)
    model = MlpModel.initialize(config, input_size or weights.shape[0])
    model.params["W0"] = weights.copy()
    return model


def linear_data(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = X @ np.array([1.0, -2.0, 0.5]) + 0.1 * rng.normal(size=n)
    return Dataset(X, y)


# -------------------------
# FORWARD
# -------------------------

def test_dropout_off_train_and_eval_agree():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(6, 4, 1), dropout_prob=0.0), 3)
    x = np.random.default_rng(1).normal(size=(5, 3))
    train_out, _ = forward(model, x, Mode.TRAIN, seed=7)
    eval_out, _ = forward(model, x, Mode.EVAL)
    np.testing.assert_array_equal(train_out, eval_out)


def test_identity_linear_layer_passes_input_through():
    model = linear_model(np.eye(3))
    x = np.array([[1.5, -2.0, 0.25]])
    out, _ = forward(model, x)
    np.testing.assert_array_equal(out, x)


def test_mc_dropout_is_deterministic_per_seed():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(16, 8, 1), dropout_prob=0.3), 4)
    x = np.random.default_rng(2).normal(size=(10, 4))
    first, _ = forward(model, x, Mode.MC_DROPOUT, seed=11)
    second, _ = forward(model, x, Mode.MC_DROPOUT, seed=11)
    other, _ = forward(model, x, Mode.MC_DROPOUT, seed=12)
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, other)


def test_eval_mode_ignores_dropout():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(16, 1), dropout_prob=0.5), 4)
    x = np.ones((3, 4))
    np.testing.assert_array_equal(forward(model, x, Mode.EVAL, seed=1)[0], forward(model, x, Mode.EVAL, seed=2)[0])


def test_mc_dropout_mean_matches_eval_output():
    # one hidden layer: the output is linear in the dropped activations
    model = MlpModel.initialize(MlpConfig(layer_sizes=(8, 1), dropout_prob=0.1, seed=3), 2)
    x = np.tile([[0.4, -1.2]], (10_000, 1))
    samples = forward(model, x, Mode.MC_DROPOUT, seed=5)[0][:, 0]
    expected = model.predict(x[:1])[0]
    standard_error = samples.std(ddof=1) / np.sqrt(len(samples))
    assert abs(samples.mean() - expected) <= 3 * standard_error + 1e-12


def test_forward_rejects_wrong_width():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(4, 1)), 3)
    with pytest.raises(DataError, match="does not match input size 3"):
        forward(model, np.zeros((2, 5)))


def test_predict_returns_vector_for_scalar_head():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(4, 1)), 3)
    assert model.predict(np.zeros((7, 3))).shape == (7,)


def test_batchnorm_running_stats():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(4, 1), dropout_prob=0.0, use_batchnorm=True), 2)
    x = np.random.default_rng(0).normal(loc=3.0, size=(32, 2))
    forward(model, x, Mode.TRAIN, seed=0, update_stats=False)
    np.testing.assert_array_equal(model.buffers["running_mean0"], np.zeros(4))

    forward(model, x, Mode.TRAIN, seed=0)
    assert not np.allclose(model.buffers["running_mean0"], 0.0)

    before = {k: v.copy() for k, v in model.buffers.items()}
    forward(model, x, Mode.EVAL)
    forward(model, x, Mode.MC_DROPOUT, seed=1)
    for name, value in before.items():
        np.testing.assert_array_equal(model.buffers[name], value)


@pytest.mark.parametrize("changes", [
    {"dropout_prob": 1.0},
    {"dropout_prob": -0.1},
    {"layer_sizes": (4, 0)},
    {"learning_rate": 0.0},
    {"activation": "swish"},
])
def test_config_validation(changes):
    with pytest.raises(DataError):
        MlpConfig(**changes)


def test_schedule_validation():
    with pytest.raises(DataError):
        TrainSchedule(patience_lr=5, patience_stop=4)
    with pytest.raises(DataError):
        TrainSchedule(lr_decay_factor=1.0)


# -------------------------
# LOSS AND GRADIENTS
# -------------------------

def test_zero_residuals_give_zero_loss_and_gradients():
    model = linear_model([[0.5], [-1.0]])
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    targets = model.predict(x)
    outputs, caches = forward(model, x)
    assert loss_mse(outputs, targets) == 0.0
    grads = backward(model, caches, loss_mse_grad(outputs, targets))
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


def test_single_weight_hand_derivative():
    model = linear_model([[2.0]])
    outputs, caches = forward(model, [[1.0]])
    assert loss_mse(outputs, [0.0]) == pytest.approx(4.0)
    grads = backward(model, caches, loss_mse_grad(outputs, [0.0]))
    assert grads["W0"][0, 0] == pytest.approx(4.0)


def test_non_finite_loss_signals_divergence():
    with pytest.raises(DivergenceError):
        loss_mse(np.array([[1e200]]), [-1e200])


def test_grad_check_linear_model_is_exact():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(1,), dropout_prob=0.0, seed=4), 3)
    rng = np.random.default_rng(4)
    assert grad_check(model, rng.normal(size=(6, 3)), targets=rng.normal(size=6)) < 1e-8


def test_grad_check_sigmoid_network():
    config = MlpConfig(layer_sizes=(5, 4, 1), dropout_prob=0.0, activation="sigmoid", seed=9)
    model = MlpModel.initialize(config, 3)
    rng = np.random.default_rng(9)
    assert grad_check(model, rng.normal(size=(8, 3)), 1e-5, targets=rng.normal(size=8)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_random_networks(seed):
    rng = np.random.default_rng(400 + seed)
    hidden = tuple(int(w) for w in rng.integers(2, 9, size=int(rng.integers(1, 4))))
    config = MlpConfig(
        layer_sizes=hidden + (1,), dropout_prob=0.0, activation=str(rng.choice(["sigmoid", "tanh"])),
        use_batchnorm=bool(rng.random() < 0.5), seed=seed,
    )
    model = MlpModel.initialize(config, int(rng.integers(1, 6)))
    batch = rng.normal(size=(int(rng.integers(3, 12)), model.input_size))
    assert grad_check(model, batch, targets=rng.normal(size=batch.shape[0])) < 1e-4


def test_grad_check_through_training_batchnorm_and_dropout():
    config = MlpConfig(layer_sizes=(6, 5, 2), dropout_prob=0.2, use_batchnorm=True, activation="tanh", seed=1)
    model = MlpModel.initialize(config, 4)
    rng = np.random.default_rng(1)
    batch = rng.normal(size=(10, 4))
    goal = rng.normal(size=(10, 2))

    def loss_fn(outputs):
        return float(np.sum((outputs - goal) ** 2)), 2.0 * (outputs - goal)

    assert grad_check(model, batch, loss_fn=loss_fn, mode=Mode.TRAIN, seed=3) < 1e-4


def test_grad_check_detects_corrupted_gradient():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(4, 1), dropout_prob=0.0, activation="tanh"), 2)
    batch = np.random.default_rng(0).normal(size=(5, 2))
    outputs, caches = forward(model, batch)
    grads = backward(model, caches, loss_mse_grad(outputs, np.zeros(5)))
    grads["W0"] = grads["W0"] * 2.0 + 0.5
    assert grad_check(model, batch, analytic=grads) > 1e-2


def test_grad_check_samples_large_models():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(40, 1), dropout_prob=0.0, activation="tanh"), 30)
    batch = np.random.default_rng(0).normal(size=(4, 30))
    assert grad_check(model, batch, max_parameters=50) < 1e-4


# -------------------------
# ADAM
# -------------------------

def test_adam_zero_gradient_is_a_fixed_point():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(3, 1)), 2)
    before = model.copy()
    grads = {k: np.zeros_like(p) for k, p in model.params.items()}
    adam_step(model, grads, OptimizerState.for_model(model), 1e-3)
    for name in model.params:
        np.testing.assert_array_equal(model.params[name], before.params[name])


def test_adam_first_step_moves_by_learning_rate():
    model = linear_model([[1.0], [1.0]])
    state = OptimizerState.for_model(model)
    grads = {"W0": np.array([[0.3], [-5.0]]), "b0": np.array([0.0])}
    adam_step(model, grads, state, 1e-3)
    np.testing.assert_allclose(model.params["W0"], [[1.0 - 1e-3], [1.0 + 1e-3]], rtol=0, atol=1e-9)
    assert state.step == 1


def test_adam_is_deterministic():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(3, 1)), 2)
    grads = {k: np.full_like(p, 0.7) for k, p in model.params.items()}
    state = OptimizerState.for_model(model)
    a, sa = adam_step(model.copy(), grads, state.copy(), 1e-2)
    b, sb = adam_step(model.copy(), grads, state.copy(), 1e-2)
    for name in model.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
        np.testing.assert_array_equal(sa.v[name], sb.v[name])


def test_adam_rejects_non_finite_gradient():
    model = linear_model([[1.0]])
    state = OptimizerState.for_model(model)
    with pytest.raises(DivergenceError, match="W0"):
        adam_step(model, {"W0": np.array([[np.nan]]), "b0": np.zeros(1)}, state, 1e-3)
    assert state.step == 0


# -------------------------
# SCHEDULE AND TRAINING
# -------------------------

def test_plateau_decreasing_losses_never_decay():
    plateau = PlateauSchedule(TrainSchedule(), 1e-4)
    decisions = [plateau.step(1.0 / epoch) for epoch in range(1, 30)]
    assert all(d.improved for d in decisions)
    assert plateau.learning_rate == 1e-4


def test_plateau_constant_losses_decay_then_stop():
    plateau = PlateauSchedule(TrainSchedule(patience_lr=5, patience_stop=10), 1e-4)
    decisions = {epoch: plateau.step(0.5) for epoch in range(1, 12)}
    assert decisions[1].improved
    assert [e for e, d in decisions.items() if d.lr_decayed] == [6]
    assert [e for e, d in decisions.items() if d.stop] == [11]
    assert decisions[6].learning_rate == pytest.approx(1e-5)


def test_plateau_decrease_of_exactly_min_delta_improves():
    plateau = PlateauSchedule(TrainSchedule(min_delta=0.25), 1e-3)
    assert plateau.step(2.0).improved
    assert plateau.step(1.75).improved
    assert not plateau.step(1.625).improved
    assert plateau.bad_epochs == 1

    plateau = PlateauSchedule(TrainSchedule(), 1e-3)
    plateau.step(1.0)
    assert plateau.step(1.0 - 1e-6).improved


def test_train_constant_validation_loss_follows_schedule():
    def flat(outputs, targets):
        return 0.25, np.zeros_like(outputs)

    model = MlpModel.initialize(MlpConfig(layer_sizes=(4, 1), dropout_prob=0.0, batch_size=8), 3)
    data = linear_data(20, 0)
    best, history = train(model, data, data, TrainSchedule(max_epochs=50), loss_fn=flat)
    assert history.events() == [(6, "lr_decay"), (11, "stop")]
    assert len(history.records) == 11
    assert history.best_epoch == 1
    assert history.records[6].learning_rate == pytest.approx(1e-5)
    np.testing.assert_array_equal(best.params["W0"], model.params["W0"])


def test_train_returns_best_validation_snapshot():
    config = MlpConfig(layer_sizes=(8, 1), dropout_prob=0.1, learning_rate=1e-2, batch_size=16, seed=2)
    train_set, val_set = linear_data(120, 1), linear_data(40, 2)
    best, history = train(MlpModel.initialize(config, 3), train_set, val_set, TrainSchedule(patience_lr=2, patience_stop=4, max_epochs=40))
    best_loss = loss_mse(best.predict(val_set.features), val_set.targets)
    assert best_loss <= min(r.val_loss for r in history.records) + 1e-6
    assert best_loss < float(np.var(val_set.targets))


def test_train_is_deterministic():
    config = MlpConfig(layer_sizes=(6, 1), learning_rate=1e-2, batch_size=16, seed=5)
    data = linear_data(64, 3)
    schedule = TrainSchedule(max_epochs=5)
    a, _ = train(MlpModel.initialize(config, 3), data, data, schedule)
    b, _ = train(MlpModel.initialize(config, 3), data, data, schedule)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])


def test_train_divergence_carries_history():
    calls = {"n": 0}

    def exploding(outputs, targets):
        calls["n"] += 1
        if calls["n"] > 3:
            raise DivergenceError("loss is nan")
        return 1.0, np.zeros_like(outputs)

    model = MlpModel.initialize(MlpConfig(layer_sizes=(2, 1), batch_size=100), 3)
    data = linear_data(10, 0)
    with pytest.raises(TrainingDivergence) as excinfo:
        train(model, data, data, TrainSchedule(), loss_fn=exploding)
    # epoch 1 used one train batch and one validation pass
    assert len(excinfo.value.history.records) == 1


def test_train_rejects_empty_sets():
    model = MlpModel.initialize(MlpConfig(layer_sizes=(2, 1)), 3)
    empty = Dataset(np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(DataError):
        train(model, linear_data(5, 0), empty, TrainSchedule())


# -------------------------
# PERSISTENCE
# -------------------------

def test_model_json_round_trip_preserves_predictions():
    config = MlpConfig(layer_sizes=(5, 3, 1), use_batchnorm=True, seed=8)
    model = MlpModel.initialize(config, 4)
    x = np.random.default_rng(8).normal(size=(20, 4))
    forward(model, x, Mode.TRAIN, seed=0)
    restored = model_from_dict(json.loads(json.dumps(model_to_dict(model))))
    np.testing.assert_array_equal(restored.predict(x), model.predict(x))
    assert restored.config == config


def test_model_from_dict_rejects_unknown_version():
    payload = model_to_dict(MlpModel.initialize(MlpConfig(layer_sizes=(1,)), 2))
    payload["format_version"] = "other/9"
    with pytest.raises(DataError, match="unsupported network format"):
        model_from_dict(payload)
