import dataclasses
import math

import numpy as np
import pytest

from common.structs import (
    Activation,
    Distribution,
    DistributionError,
    Family,
    FamilySpec,
    Loss,
    Party,
    TrainConfig,
)
from modules import (
    analysis,
    network,
    qdist,
    trainer,
)

TINY = TrainConfig(
    batch_size=300,
    eval_batch_size=2000,
    depth=2,
    width=8,
    activation=Activation.Tanh,
    training_steps=30,
    restarts=1,
    early_stop=False,
)


def _random_distribution(rng, cardinality: int = 4) -> Distribution:
    return Distribution(cardinality, rng.dirichlet(np.ones(cardinality ** 3)))


def test_kl_of_identical_distributions_is_zero():
    dist = qdist.fritz_family(0.6)
    assert trainer.kl_divergence(dist, dist) == pytest.approx(0, abs=1e-15)


def test_kl_point_mass_against_uniform():
    value = trainer.kl_divergence(Distribution.point_mass(4, 1, 2, 3), Distribution.uniform(4))
    assert value == pytest.approx(math.log(64), abs=1e-12)


def test_kl_is_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert trainer.kl_divergence(_random_distribution(rng), _random_distribution(rng)) >= 0


def test_kl_rejects_unsupported_outcome():
    with pytest.raises(DistributionError):
        trainer.kl_divergence(Distribution.uniform(2), Distribution.point_mass(2, 0, 0, 0))


def test_loss_terms_values():
    target = np.full((2, 2, 2), 1 / 8)
    probs = Distribution.point_mass(2, 0, 0, 0).tensor * 0.3 + 0.7 / 8
    mse, _ = trainer.loss_terms(Loss.MSE, target, probs)
    mae, _ = trainer.loss_terms(Loss.MAE, target, probs)
    assert mse == pytest.approx(np.sum((probs - target) ** 2))
    assert mae == pytest.approx(np.sum(np.abs(probs - target)))


def _kink_margin(model, batch) -> float:
    # Smallest |pre-activation| over the hidden layers of every party
    margin = np.inf
    for party in Party:
        net = model.net(party)
        hidden = batch.inputs(party)
        for weight, bias in zip(net.weights[:-1], net.biases[:-1]):
            pre = hidden @ weight + bias
            margin = min(margin, float(np.abs(pre).min()))
            hidden = np.maximum(pre, 0.0)
    return margin


@pytest.mark.parametrize("loss, activation, models", [
    (Loss.KL, Activation.Tanh, 20),
    (Loss.MSE, Activation.Tanh, 3),
    (Loss.KL, Activation.ReLU, 5),
], ids=["kl-tanh", "mse-tanh", "kl-relu"])
def test_gradients_match_finite_differences(loss, activation, models):
    rng = np.random.default_rng(1234)
    cfg = TrainConfig(depth=2, width=4, activation=activation)
    checked = 0
    while checked < models:
        model = network.init_model(4, cfg, rng)
        # Nonzero biases so every parameter gets a generic gradient
        for param in model.parameters():
            param += rng.normal(scale=0.1, size=param.shape)
        target = _random_distribution(rng)
        batch = network.sample_latents(50, rng)
        # A finite difference straddling a ReLU kink is not a derivative
        if activation is Activation.ReLU and _kink_margin(model, batch) < 1e-3:
            continue
        _, analytic = trainer.loss_and_gradients(model, target, batch, loss)

        step = 1e-5
        for param, grad in zip(model.parameters(), analytic):
            numeric = np.zeros_like(param)
            for index in np.ndindex(param.shape):
                original = param[index]
                param[index] = original + step
                plus, _ = trainer.loss_and_gradients(model, target, batch, loss)
                param[index] = original - step
                minus, _ = trainer.loss_and_gradients(model, target, batch, loss)
                param[index] = original
                numeric[index] = (plus - minus) / (2 * step)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)
        checked += 1


def test_gradient_vanishes_at_matching_target():
    # Constant nets reproduce their own mixture, which makes the logits stationary
    rng = np.random.default_rng(4)
    model = network.init_model(4, TrainConfig(depth=1, width=3), rng)
    for net in (model.net_a, model.net_b, model.net_c):
        for weight in net.weights:
            weight[:] = 0
        net.biases[-1][:] = rng.normal(size=4)
    batch = network.sample_latents(20, rng)
    target = network.model_distribution(model, batch)
    _, grads = trainer.loss_and_gradients(model, target, batch)
    for grad in grads:
        np.testing.assert_allclose(grad, 0, atol=1e-10)


def test_step_size_halves_each_quarter():
    cfg = TrainConfig(training_steps=100, learning_rate=1e-3)
    assert trainer.step_size(cfg, 0) == 1e-3
    assert trainer.step_size(cfg, 24) == 1e-3
    assert trainer.step_size(cfg, 25) == 5e-4
    assert trainer.step_size(cfg, 50) == 2.5e-4
    assert trainer.step_size(cfg, 99) == 1.25e-4


def test_early_stop_needs_patience_stale_windows():
    stopper = trainer.EarlyStop(window=10, tolerance=1e-7, patience=3)
    results = [stopper.update(1.0) for _ in range(40)]
    assert results.index(True) == 39
    stopper = trainer.EarlyStop(window=10, tolerance=1e-7, patience=3)
    assert not any(stopper.update(1.0 / (step + 1)) for step in range(200))


def test_training_on_uniform_target_converges():
    cfg = TrainConfig(
        batch_size=1000,
        eval_batch_size=20000,
        depth=2,
        width=16,
        learning_rate=5e-3,
        training_steps=500,
        early_stop=False,
    )
    rng = np.random.default_rng(9)
    target = Distribution.uniform(4)
    model, history = trainer.train_run(network.init_model(4, cfg, rng), target, cfg, rng)
    assert len(history) == 500
    learned = network.model_distribution(model, network.evaluation_batch(cfg.eval_batch_size, cfg.eval_seed))
    assert trainer.kl_divergence(target, learned) < 1e-3


def test_training_is_deterministic_per_seed():
    target = qdist.fritz_family(0.9)
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(77)
        model, history = trainer.train_run(network.init_model(4, TINY, rng), target, TINY, rng)
        runs.append((model, history))
    (first, first_history), (second, second_history) = runs
    assert first_history == second_history
    for a, b in zip(first.parameters(), second.parameters()):
        np.testing.assert_array_equal(a, b)


def test_non_finite_loss_aborts():
    rng = np.random.default_rng(0)
    model = network.init_model(4, TINY, rng)
    model.net_a.weights[0][0, 0] = np.nan
    state = trainer.init_optimizer(model)
    with pytest.raises(trainer.TrainingAborted) as info:
        trainer.train_step(model, Distribution.uniform(4), network.sample_latents(10, rng), state, TINY)
    assert info.value.diagnostics["step"] == 0


def test_fit_model_raises_when_every_run_aborts():
    rng = np.random.default_rng(0)
    broken = network.init_model(4, TINY, rng)
    broken.net_b.biases[-1][0] = np.inf
    with pytest.raises(trainer.TrainingError):
        trainer.fit_model(Distribution.uniform(4), dataclasses.replace(TINY, restarts=0), warm_start=broken)


def test_fit_model_reports_evaluation_distance():
    target = qdist.family_distribution(FamilySpec(Family.ElegantDetector), 0.5)
    model, distance = trainer.fit_model(target, TINY)
    learned = network.model_distribution(model, network.evaluation_batch(TINY.eval_batch_size, TINY.eval_seed))
    assert distance == network.euclidean_distance(target, learned)


def test_more_restarts_never_hurt():
    target = qdist.fritz_family(1.0)
    _, one = trainer.fit_model(target, TINY)
    _, three = trainer.fit_model(target, dataclasses.replace(TINY, restarts=3))
    assert three <= one


def test_warm_start_is_not_modified():
    rng = np.random.default_rng(5)
    start = network.init_model(4, TINY, rng)
    snapshot = [param.copy() for param in start.parameters()]
    trainer.fit_model(qdist.fritz_family(0.3), dataclasses.replace(TINY, restarts=0), warm_start=start)
    for before, after in zip(snapshot, start.parameters()):
        np.testing.assert_array_equal(before, after)


@pytest.mark.slow
def test_self_representable_targets_are_learned():
    rng = np.random.default_rng(2024)
    cfg = TrainConfig(training_steps=4000, restarts=2)
    for _ in range(5):
        source = network.init_model(4, TrainConfig(depth=2, width=8), rng)
        target = network.model_distribution(source, network.sample_latents(200000, rng))
        _, distance = trainer.fit_model(target, cfg)
        assert distance < 0.01


@pytest.mark.slow
def test_fritz_below_exit_is_learned():
    _, distance = trainer.fit_model(qdist.fritz_family(0.5), TrainConfig())
    assert distance < 0.01


@pytest.mark.slow
def test_fritz_at_full_visibility_matches_flat_boundary_estimate():
    spec = FamilySpec(Family.FritzVisibility)
    _, distance = trainer.fit_model(qdist.fritz_family(1.0), TrainConfig())
    expected = analysis.analytic_distance(spec, 1.0, 1 / math.sqrt(2), 90)
    assert abs(distance - expected) < 0.2 * expected
