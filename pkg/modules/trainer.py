import dataclasses
import logging

import numpy as np
import scipy.special

from common.structs import (
    Distribution,
    DistributionError,
    LatentBatch,
    Loss,
    Party,
    TrainConfig,
    TriangleError,
    TriangleModel,
)
from external import error
from modules import (
    network,
    utils,
)

SCHEDULE_PHASES = 4

logger = logging.getLogger(__name__)


class TrainingAborted(TriangleError):
    def __init__(self, message: str, diagnostics: dict = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingError(TriangleError):
    pass


@dataclasses.dataclass(slots=True)
class AdamState:
    step: int
    first: list[np.ndarray]
    second: list[np.ndarray]


@dataclasses.dataclass(slots=True)
class EarlyStop:
    window: int
    tolerance: float
    patience: int
    best: float = np.inf
    stale: int = 0
    _total: float = 0.0
    _count: int = 0

    def update(self, loss: float) -> bool:
        # True once `patience` consecutive windows fail to improve the best window mean
        self._total += loss
        self._count += 1
        if self._count < self.window:
            return False
        mean = self._total / self._count
        self._total, self._count = 0.0, 0
        if mean < self.best - self.tolerance:
            self.best = mean
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def kl_divergence(p_t: Distribution, p_m: Distribution) -> float:
    if p_t.cardinality != p_m.cardinality:
        raise DistributionError(f"Cardinality mismatch: {p_t.cardinality} vs {p_m.cardinality}")
    if np.any((p_m.probs == 0) & (p_t.probs > 0)):
        raise DistributionError("Model assigns zero probability to an outcome the target supports")
    return float(scipy.special.rel_entr(p_t.probs, p_m.probs).sum())


def loss_terms(loss: Loss, target: np.ndarray, probs: np.ndarray) -> tuple[float, np.ndarray]:
    # Returns the loss and its gradient with respect to the mixture entries
    match loss:
        case Loss.KL:
            grad = -np.divide(target, probs, out=np.zeros_like(probs), where=target > 0)
            return float(scipy.special.rel_entr(target, probs).sum()), grad
        case Loss.MSE:
            diff = probs - target
            return float(np.sum(diff ** 2)), 2 * diff
        case Loss.MAE:
            diff = probs - target
            return float(np.sum(np.abs(diff))), np.sign(diff)
    raise ValueError(f"Unknown loss {loss}")


def loss_and_gradients(model: TriangleModel, target: Distribution, batch: LatentBatch, loss: Loss = Loss.KL) -> tuple[float, list[np.ndarray]]:
    # Gradients follow the order of model.parameters()
    if model.cardinality != target.cardinality:
        raise ValueError(f"Model has {model.cardinality} outcomes, target has {target.cardinality}")
    passes = {party: network.forward_pass(model.net(party), batch.inputs(party)) for party in Party}
    probs_a, probs_b, probs_c = (passes[party][0] for party in Party)
    mixture = network.mixture_tensor(probs_a, probs_b, probs_c)
    value, grad_mixture = loss_terms(loss, target.tensor, mixture)
    n = batch.size
    grad_outputs = (
        np.einsum("abc,nb,nc->na", grad_mixture, probs_b, probs_c, optimize=True) / n,
        np.einsum("abc,na,nc->nb", grad_mixture, probs_a, probs_c, optimize=True) / n,
        np.einsum("abc,na,nb->nc", grad_mixture, probs_a, probs_b, optimize=True) / n,
    )
    grads = []
    for party, grad_probs in zip(Party, grad_outputs):
        probs, activations = passes[party]
        grads.extend(network.backward_pass(model.net(party), probs, activations, grad_probs))
    return value, grads


def init_optimizer(model: TriangleModel) -> AdamState:
    params = list(model.parameters())
    return AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def step_size(cfg: TrainConfig, step: int) -> float:
    # Halved after every quarter of the run
    phase = min(SCHEDULE_PHASES - 1, step * SCHEDULE_PHASES // cfg.training_steps)
    return cfg.learning_rate * 0.5 ** phase


def train_step(model: TriangleModel, target: Distribution, batch: LatentBatch, state: AdamState, cfg: TrainConfig) -> tuple[TriangleModel, AdamState, float]:
    value, grads = loss_and_gradients(model, target, batch, cfg.loss)
    if not np.isfinite(value) or not all(np.all(np.isfinite(grad)) for grad in grads):
        bad = [i for i, grad in enumerate(grads) if not np.all(np.isfinite(grad))]
        raise TrainingAborted(
            f"Non-finite loss or gradient at step {state.step}",
            {"step": state.step, "loss": value, "non_finite_parameters": bad},
        )
    lr = step_size(cfg, state.step)
    state.step += 1
    t = state.step
    for param, grad, first, second in zip(model.parameters(), grads, state.first, state.second):
        first *= cfg.beta1
        first += (1 - cfg.beta1) * grad
        second *= cfg.beta2
        second += (1 - cfg.beta2) * grad ** 2
        first_hat = first / (1 - cfg.beta1 ** t)
        second_hat = second / (1 - cfg.beta2 ** t)
        param -= lr * first_hat / (np.sqrt(second_hat) + cfg.epsilon)
    return model, state, value


def train_run(model: TriangleModel, target: Distribution, cfg: TrainConfig, rng: np.random.Generator) -> tuple[TriangleModel, list[float]]:
    state = init_optimizer(model)
    stopper = EarlyStop(cfg.early_stop_window, cfg.early_stop_tolerance, cfg.early_stop_patience)
    history = []
    for step in range(cfg.training_steps):
        batch = network.sample_latents(cfg.batch_size, rng)
        model, state, value = train_step(model, target, batch, state, cfg)
        history.append(value)
        if cfg.early_stop and stopper.update(value):
            logger.debug(f"Early stop at step {step + 1}, best window loss {stopper.best:.3e}")
            break
    return model, history


def fit_model(target: Distribution, cfg: TrainConfig, warm_start: TriangleModel = None) -> tuple[TriangleModel, float]:
    runs = [(index, None) for index in range(cfg.restarts)]
    if warm_start is not None:
        if warm_start.cardinality != target.cardinality:
            raise ValueError(f"Warm start has {warm_start.cardinality} outcomes, target has {target.cardinality}")
        runs.append((cfg.restarts, warm_start))
    if not runs:
        raise ValueError("Nothing to train: restarts is 0 and no warm start was given")
    eval_batch = network.evaluation_batch(cfg.eval_batch_size, cfg.eval_seed)
    best_model, best_distance = None, np.inf
    aborted = []
    for index, start in runs:
        rng = np.random.default_rng(utils.derive_seed(cfg.rng_seed, index))
        model = network.copy_model(start) if start is not None else network.init_model(target.cardinality, cfg, rng)
        kind = "warm" if start is not None else "restart"
        try:
            model, history = train_run(model, target, cfg, rng)
        except TrainingAborted as exc:
            logger.warning(f"{kind.title()} run {index} aborted: {error.text(exc)}")
            aborted.append(exc)
            continue
        distance = network.euclidean_distance(target, network.model_distribution(model, eval_batch))
        logger.info(f"{kind.title()} run {index}: {len(history)} steps, final loss {history[-1]:.3e}, d_M {distance:.5f}")
        if distance < best_distance:
            best_model, best_distance = model, distance
    if best_model is None:
        raise TrainingError(f"All {len(runs)} training runs aborted, last: {aborted[-1].message}")
    return best_model, float(best_distance)
