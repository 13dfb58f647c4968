"""
Closest classical triangle model to a binary-outcome target. Response tables are
enumerated while that stays small; larger alphabets use a relaxation that only
gives an upper bound.
"""
import itertools
import logging

import numpy as np

from common.structs import (
    ClassicalModel,
    Distribution,
    OracleReport,
    TrainConfig,
    TriangleError,
)
from modules import (
    network,
    trainer,
    utils,
)

ORACLE_CARDINALITY = 2
MAX_HIDDEN_CARDINALITY = ORACLE_CARDINALITY ** 3 - ORACLE_CARDINALITY
MAX_ENUMERATED_TABLES = 2 ** 12
STARTS = 20
ITERATIONS = 500
STEP_SIZE = 0.05
SCREEN_STARTS = 4
SCREEN_ITERATIONS = 100
SHORTLIST = 32
WEIGHT_ITERATIONS = 1000
POLISH_ITERATIONS = 200
POLISH_ROUNDS = 20

# weights alpha, beta, gamma; responses a[beta, gamma], b[gamma, alpha], c[alpha, beta]
MIXTURE = "sx,sy,sz,syza,szxb,sxyc->sabc"
GRADIENTS = (
    "sabc,sy,sz,syza,szxb,sxyc->sx",
    "sabc,sx,sz,syza,szxb,sxyc->sy",
    "sabc,sx,sy,syza,szxb,sxyc->sz",
    "sabc,sx,sy,sz,szxb,sxyc->syza",
    "sabc,sx,sy,sz,syza,sxyc->szxb",
    "sabc,sx,sy,sz,syza,szxb->sxyc",
)
# Linear map from one source's weights to the joint outcome, the other two held fixed
WEIGHT_BLOCKS = ("sxyzo,sy,sz->sxo", "sxyzo,sx,sz->syo", "sxyzo,sx,sy->szo")

logger = logging.getLogger(__name__)


class OracleError(TriangleError, ValueError):
    pass


def project_simplex(values: np.ndarray) -> np.ndarray:
    # Euclidean projection of every vector along the last axis onto the probability simplex
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    ordered = -np.sort(-values, axis=-1)
    cumulative = np.cumsum(ordered, axis=-1) - 1
    support = ordered - cumulative / np.arange(1, n + 1) > 0
    last = n - 1 - np.argmax(support[..., ::-1], axis=-1)
    theta = np.take_along_axis(cumulative, last[..., None], axis=-1) / (last[..., None] + 1)
    return np.maximum(values - theta, 0.0)


def classical_tensor(model: ClassicalModel) -> np.ndarray:
    params = _stack(_params(model))
    return np.einsum(MIXTURE, *params)[0]


def classical_distribution(model: ClassicalModel) -> Distribution:
    return Distribution.from_tensor(classical_tensor(model))


def random_classical_model(cardinality: int, hidden_cardinality: int, rng: np.random.Generator, deterministic: bool = True) -> ClassicalModel:
    k, o = hidden_cardinality, cardinality
    weights = [rng.dirichlet(np.ones(k)) for _ in range(3)]
    if deterministic:
        responses = [np.eye(o)[rng.integers(o, size=(k, k))] for _ in range(3)]
    else:
        responses = [rng.dirichlet(np.ones(o), size=(k, k)) for _ in range(3)]
    return ClassicalModel(*weights, *responses)


def enumerable(cardinality: int, hidden_cardinality: int) -> bool:
    return cardinality ** (3 * hidden_cardinality ** 2) <= MAX_ENUMERATED_TABLES


def deterministic_tables(cardinality: int, hidden_cardinality: int) -> np.ndarray:
    # Outcome tables [A, B, C] of shape (n, 3, k, k), one per orbit under relabeling each source's symbols
    o, k = cardinality, hidden_cardinality
    cells = 3 * k * k
    places = o ** np.arange(cells - 1, -1, -1)
    codes = np.arange(o ** cells)
    tables = (codes[:, None] // places % o).reshape(-1, 3, k, k)
    canonical = codes.copy()
    for perms in itertools.product(itertools.permutations(range(k)), repeat=3):
        alpha, beta, gamma = (np.argsort(perm) for perm in perms)
        relabeled = np.stack((
            tables[:, 0][:, beta[:, None], gamma[None, :]],
            tables[:, 1][:, gamma[:, None], alpha[None, :]],
            tables[:, 2][:, alpha[:, None], beta[None, :]],
        ), axis=1)
        canonical = np.minimum(canonical, relabeled.reshape(-1, cells) @ places)
    return tables[canonical == codes]


def readout(tables: np.ndarray, cardinality: int) -> np.ndarray:
    # (n, k, k, k, o^3): 1 where hidden symbols (x, y, z) produce the joint outcome
    eye = np.eye(cardinality)
    joint = np.einsum("nyza,nzxb,nxyc->nxyzabc", eye[tables[:, 0]], eye[tables[:, 1]], eye[tables[:, 2]])
    return joint.reshape(*joint.shape[:4], -1)


def _params(model: ClassicalModel) -> list[np.ndarray]:
    return [
        model.weights_alpha, model.weights_beta, model.weights_gamma,
        model.response_a, model.response_b, model.response_c,
    ]


def _stack(params: list[np.ndarray]) -> list[np.ndarray]:
    return [np.asarray(param, dtype=float)[None] for param in params]


def _unstack(params: list[np.ndarray], index: int) -> ClassicalModel:
    return ClassicalModel(*(param[index].copy() for param in params))


def _objective(params: list[np.ndarray], target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    residual = np.einsum(MIXTURE, *params) - target
    return np.sum(residual ** 2, axis=(1, 2, 3)), residual


def _gradients(params: list[np.ndarray], residual: np.ndarray, count: int) -> list[np.ndarray]:
    grads = []
    for i, subscripts in enumerate(GRADIENTS[:count]):
        others = params[:i] + params[i + 1:]
        grads.append(2 * np.einsum(subscripts, residual, *others))
    return grads


def descend(params: list[np.ndarray], target: np.ndarray, iterations: int = ITERATIONS, step: float = STEP_SIZE, fixed_responses: bool = False) -> tuple[list[np.ndarray], np.ndarray]:
    # Leading axis indexes the starts; keeps the best iterate per start, starting point included
    current = [param.copy() for param in params]
    best = [param.copy() for param in params]
    best_values, residual = _objective(current, target)
    updated = 3 if fixed_responses else 6
    for _ in range(iterations):
        grads = _gradients(current, residual, updated)
        for i in range(updated):
            current[i] = project_simplex(current[i] - step * grads[i])
        values, residual = _objective(current, target)
        if np.any(improved := values < best_values):
            for param, candidate in zip(best, current):
                param[improved] = candidate[improved]
            best_values = np.where(improved, values, best_values)
    return best, best_values


def _weight_objective(weights: list[np.ndarray], readouts: np.ndarray, flat_target: np.ndarray) -> np.ndarray:
    joint = np.einsum("sx,sy,sz->sxyz", *weights)
    residual = np.einsum("sxyz,sxyzo->so", joint, readouts) - flat_target
    return np.sum(residual ** 2, axis=1)


def descend_weights(weights: list[np.ndarray], readouts: np.ndarray, target: np.ndarray, iterations: int = WEIGHT_ITERATIONS) -> tuple[list[np.ndarray], np.ndarray]:
    # Responses fixed through readouts (s, k, k, k, o^3). One source at a time the objective is a
    # convex quadratic, stepped by the inverse of its Lipschitz bound and projected.
    flat_target = target.reshape(-1)
    current = [weight.copy() for weight in weights]
    best = [weight.copy() for weight in weights]
    best_values = _weight_objective(current, readouts, flat_target)
    for _ in range(iterations):
        for i, subscripts in enumerate(WEIGHT_BLOCKS):
            linear = np.einsum(subscripts, readouts, *(current[:i] + current[i + 1:]))
            residual = np.einsum("sx,sxo->so", current[i], linear) - flat_target
            grad = 2 * np.einsum("sxo,so->sx", linear, residual)
            lipschitz = np.maximum(2 * np.sum(linear ** 2, axis=(1, 2)), 1e-12)
            current[i] = project_simplex(current[i] - grad / lipschitz[:, None])
        values = _weight_objective(current, readouts, flat_target)
        if np.any(improved := values < best_values):
            for weight, candidate in zip(best, current):
                weight[improved] = candidate[improved]
            best_values = np.where(improved, values, best_values)
    return best, best_values


def _weight_starts(tables: int, starts: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    # First start of every table is the uniform point
    weights = []
    for _ in range(3):
        weight = rng.dirichlet(np.ones(k), size=(tables, starts))
        weight[:, 0] = 1 / k
        weights.append(weight.reshape(-1, k))
    return weights


def _random_starts(count: int, k: int, o: int, rng: np.random.Generator) -> list[np.ndarray]:
    weights = [rng.dirichlet(np.ones(k), size=count) for _ in range(3)]
    responses = [rng.dirichlet(np.ones(o), size=(count, k, k)) for _ in range(3)]
    return weights + responses


def _uniform_start(k: int, o: int) -> list[np.ndarray]:
    return [np.full((1, k), 1 / k) for _ in range(3)] + [np.full((1, k, k, o), 1 / o) for _ in range(3)]


def _pad(model: ClassicalModel, k: int) -> list[np.ndarray]:
    # Extra symbols get zero weight and outcome 0, leaving the distribution unchanged
    o = model.cardinality
    extra = k - model.hidden_cardinality
    params = [np.concatenate((w, np.zeros(extra))) for w in _params(model)[:3]]
    for response in _params(model)[3:]:
        padded = np.zeros((k, k, o))
        padded[..., 0] = 1
        padded[:model.hidden_cardinality, :model.hidden_cardinality] = response
        params.append(padded)
    return _stack(params)


def _round(params: list[np.ndarray]) -> list[np.ndarray]:
    o = params[3].shape[-1]
    return params[:3] + [np.eye(o)[np.argmax(response, axis=-1)] for response in params[3:]]


def _flips(model: ClassicalModel) -> list[np.ndarray]:
    # Every model differing from `model` in one response cell
    base = _params(model)
    o = model.cardinality
    candidates = []
    for party in range(3):
        table = base[3 + party]
        for cell in np.ndindex(table.shape[:2]):
            current = int(np.argmax(table[cell]))
            for outcome in range(o):
                if outcome == current:
                    continue
                flipped = [param.copy() for param in base]
                flipped[3 + party][cell] = np.eye(o)[outcome]
                candidates.append(flipped)
    return [np.stack(column) for column in zip(*candidates)]


def _polish(model: ClassicalModel, value: float, target: np.ndarray) -> tuple[ClassicalModel, float]:
    for _ in range(POLISH_ROUNDS):
        best, values = descend(_flips(model), target, POLISH_ITERATIONS, fixed_responses=True)
        index = int(np.argmin(values))
        if values[index] >= value:
            break
        model, value = _unstack(best, index), float(values[index])
    return model, value


def _enumerate(target: np.ndarray, k: int, rng: np.random.Generator) -> tuple[ClassicalModel, float]:
    o = target.shape[0]
    tables = deterministic_tables(o, k)
    readouts = readout(tables, o)
    # Short screen of every table, then the full multistart on the most promising ones
    index = np.repeat(np.arange(len(tables)), SCREEN_STARTS)
    _, screened = descend_weights(_weight_starts(len(tables), SCREEN_STARTS, k, rng), readouts[index], target, SCREEN_ITERATIONS)
    shortlist = np.argsort(screened.reshape(len(tables), SCREEN_STARTS).min(axis=1), kind="stable")[:SHORTLIST]
    index = np.repeat(shortlist, STARTS)
    weights, values = descend_weights(_weight_starts(len(shortlist), STARTS, k, rng), readouts[index], target)
    best = int(np.argmin(values))
    eye = np.eye(o)
    table = tables[index[best]]
    model = ClassicalModel(*(weight[best].copy() for weight in weights), *(eye[table[i]] for i in range(3)))
    logger.debug(f"Enumerated {len(tables)} response tables at hidden cardinality {k}")
    return model, float(values[best])


def _relax(target: np.ndarray, k: int, seed_model: ClassicalModel | None, rng: np.random.Generator) -> tuple[ClassicalModel, float]:
    # Upper bound only: deterministic tables are reached through their convex hull
    o = target.shape[0]
    first = _pad(seed_model, k) if seed_model is not None else _uniform_start(k, o)
    starts = [np.concatenate((a, b)) for a, b in zip(first, _random_starts(STARTS - 1, k, o, rng))]
    relaxed, relaxed_values = descend(starts, target)

    rounded, rounded_values = descend(_round(relaxed), target, fixed_responses=True)
    index = int(np.argmin(rounded_values))
    deterministic, deterministic_value = _polish(_unstack(rounded, index), float(rounded_values[index]), target)

    index = int(np.argmin(relaxed_values))
    if relaxed_values[index] < deterministic_value:
        return _unstack(relaxed, index), float(relaxed_values[index])
    return deterministic, deterministic_value


def _search(target: np.ndarray, k: int, seed_model: ClassicalModel | None, rng: np.random.Generator) -> tuple[ClassicalModel, float]:
    if not enumerable(target.shape[0], k):
        return _relax(target, k, seed_model, rng)
    model, value = _enumerate(target, k, rng)
    if seed_model is not None:
        padded = _pad(seed_model, k)
        previous = float(_objective(padded, target)[0][0])
        if previous < value:
            return _unstack(padded, 0), previous
    return model, value


def local_distance_profile(target: Distribution, hidden_cardinality: int = MAX_HIDDEN_CARDINALITY, seed: int = 0) -> list[tuple[float, ClassicalModel]]:
    """Best distance and model for every hidden cardinality 1..hidden_cardinality."""
    if target.cardinality != ORACLE_CARDINALITY:
        raise OracleError(f"Exhaustive oracle supports only {ORACLE_CARDINALITY} outcomes, target has {target.cardinality}")
    if not 1 <= hidden_cardinality <= MAX_HIDDEN_CARDINALITY:
        raise OracleError(f"Hidden cardinality {hidden_cardinality} outside [1, {MAX_HIDDEN_CARDINALITY}]")
    tensor = target.tensor
    profile = []
    model = None
    for k in range(1, hidden_cardinality + 1):
        model, value = _search(tensor, k, model, np.random.default_rng(utils.derive_seed(seed, k)))
        distance = float(np.sqrt(max(value, 0.0)))
        kind = "enumerated" if enumerable(target.cardinality, k) else "upper bound"
        logger.debug(f"Hidden cardinality {k}: distance {distance:.6f} ({kind})")
        profile.append((distance, model))
    return profile


def brute_force_local_distance(target: Distribution, hidden_cardinality: int = MAX_HIDDEN_CARDINALITY, seed: int = 0) -> tuple[float, ClassicalModel]:
    return local_distance_profile(target, hidden_cardinality, seed)[-1]


def nn_vs_oracle(target: Distribution, cfg: TrainConfig, hidden_cardinality: int = MAX_HIDDEN_CARDINALITY) -> OracleReport:
    if target.cardinality != ORACLE_CARDINALITY:
        raise OracleError(f"Oracle comparison needs a {ORACLE_CARDINALITY}-outcome target, got {target.cardinality}")
    d_oracle, classical = brute_force_local_distance(target, hidden_cardinality, seed=cfg.rng_seed)
    model, d_model = trainer.fit_model(target, cfg)
    report = OracleReport(d_model, d_oracle, model, classical)
    logger.info(f"d_M {d_model:.5f}, d_oracle {d_oracle:.5f}, gap {report.gap:+.5f}")
    # The returned classical model must reproduce the reported distance
    check = network.euclidean_distance(target, classical_distribution(classical))
    if abs(check - d_oracle) > 1e-9:
        logger.warning(f"Oracle model reproduces distance {check:.6f}, reported {d_oracle:.6f}")
    return report
