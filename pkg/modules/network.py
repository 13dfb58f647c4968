import functools
import json
import logging
import math
import pathlib

import numpy as np
import scipy.special

from common.structs import (
    Activation,
    Distribution,
    DistributionError,
    LatentBatch,
    Party,
    PartyNet,
    TrainConfig,
    TriangleError,
    TriangleModel,
)
from modules import store

CHECKPOINT_VERSION = 1
LATENTS = 2

logger = logging.getLogger(__name__)


class CheckpointError(TriangleError, ValueError):
    pass


def layer_sizes(cardinality: int, depth: int, width: int) -> tuple[int, ...]:
    return (LATENTS, *([width] * depth), cardinality)


def init_party_net(sizes: tuple[int, ...], activation: Activation, rng: np.random.Generator) -> PartyNet:
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        limit = math.sqrt(6 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return PartyNet(sizes, weights, biases, activation)


def init_model(cardinality: int, cfg: TrainConfig, rng: np.random.Generator) -> TriangleModel:
    sizes = layer_sizes(cardinality, cfg.depth, cfg.width)
    return TriangleModel(*(init_party_net(sizes, cfg.activation, rng) for _ in Party))


def copy_model(model: TriangleModel) -> TriangleModel:
    return TriangleModel(*(
        PartyNet(
            net.layer_sizes,
            [weight.copy() for weight in net.weights],
            [bias.copy() for bias in net.biases],
            net.activation,
        )
        for net in (model.net_a, model.net_b, model.net_c)
    ))


def sample_latents(size: int, rng: np.random.Generator) -> LatentBatch:
    alpha, beta, gamma = rng.random((3, size))
    return LatentBatch(alpha, beta, gamma)


@functools.lru_cache(maxsize=4)
def evaluation_batch(size: int, seed: int) -> LatentBatch:
    return sample_latents(size, np.random.default_rng(seed))


def _activate(net: PartyNet, pre: np.ndarray) -> np.ndarray:
    if net.activation is Activation.ReLU:
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def forward_pass(net: PartyNet, inputs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    # Returns the outcome probabilities and the per-layer activations needed by backward_pass
    activations = [inputs]
    hidden = inputs
    last = len(net.weights) - 1
    for i, (weight, bias) in enumerate(zip(net.weights, net.biases)):
        pre = hidden @ weight + bias
        if i == last:
            probs = scipy.special.softmax(pre, axis=-1)
        else:
            hidden = _activate(net, pre)
            activations.append(hidden)
    return probs, activations


def backward_pass(net: PartyNet, probs: np.ndarray, activations: list[np.ndarray], grad_probs: np.ndarray) -> list[np.ndarray]:
    # Gradients in the order of net.parameters(): w0, b0, w1, b1, ...
    grad_pre = probs * (grad_probs - np.sum(grad_probs * probs, axis=-1, keepdims=True))
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = activations[i].T @ grad_pre
        grads[2 * i + 1] = grad_pre.sum(axis=0)
        if i == 0:
            break
        grad_hidden = grad_pre @ net.weights[i].T
        hidden = activations[i]
        if net.activation is Activation.ReLU:
            grad_pre = grad_hidden * (hidden > 0)
        else:
            grad_pre = grad_hidden * (1 - hidden ** 2)
    return grads


def forward(net: PartyNet, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float)
    probs, _ = forward_pass(net, inputs.reshape(-1, LATENTS))
    return probs.reshape(*inputs.shape[:-1], net.cardinality)


def party_outputs(model: TriangleModel, batch: LatentBatch) -> dict[Party, np.ndarray]:
    return {party: forward_pass(model.net(party), batch.inputs(party))[0] for party in Party}


def mixture_tensor(probs_a: np.ndarray, probs_b: np.ndarray, probs_c: np.ndarray) -> np.ndarray:
    # Monte Carlo average of p_A(a|beta gamma) p_B(b|gamma alpha) p_C(c|alpha beta)
    return np.einsum("na,nb,nc->abc", probs_a, probs_b, probs_c, optimize=True) / probs_a.shape[0]


def model_distribution(model: TriangleModel, batch: LatentBatch) -> Distribution:
    outputs = party_outputs(model, batch)
    return Distribution.from_tensor(mixture_tensor(outputs[Party.A], outputs[Party.B], outputs[Party.C]))


def euclidean_distance(p: Distribution, q: Distribution) -> float:
    if p.cardinality != q.cardinality:
        raise DistributionError(f"Cardinality mismatch: {p.cardinality} vs {q.cardinality}")
    return float(np.linalg.norm(p.probs - q.probs))


def save_model(model: TriangleModel, path: pathlib.Path, cfg: TrainConfig = None, force: bool = True):
    data = {
        "version": CHECKPOINT_VERSION,
        "cardinality": model.cardinality,
        "activation": model.net_a.activation.cli,
        "parties": {
            party.cli: {
                "layer_sizes": list(model.net(party).layer_sizes),
                "weights": [float(x) for weight in model.net(party).weights for x in weight.reshape(-1)],
                "biases": [float(x) for bias in model.net(party).biases for x in bias],
            }
            for party in Party
        },
        "config": cfg.to_dict() if cfg else None,
    }
    store.write_text_atomic(path, json.dumps(data, indent=1) + "\n", force=force)


def read_checkpoint(path: pathlib.Path) -> tuple[TriangleModel, TrainConfig | None]:
    path = pathlib.Path(path)
    raw = path.read_text(encoding="utf-8")
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno} (offset {exc.pos}): {exc.msg}")
    if not isinstance(data, dict):
        raise CheckpointError(f"{path}: expected a JSON object at offset 0")
    if (found := data.get("version")) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version mismatch, expected {CHECKPOINT_VERSION}, found {found}")
    try:
        cardinality = int(data["cardinality"])
        activation = Activation.from_cli(data["activation"])
        nets = [_parse_party(data["parties"][party.cli], cardinality, activation, f"{path}: party {party.cli}") for party in Party]
        cfg = TrainConfig.from_dict(data["config"]) if data.get("config") else None
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: {exc}")
    return TriangleModel(*nets), cfg


def load_model(path: pathlib.Path) -> TriangleModel:
    return read_checkpoint(path)[0]


def _parse_party(data: dict, cardinality: int, activation: Activation, where: str) -> PartyNet:
    sizes = tuple(int(size) for size in data["layer_sizes"])
    if len(sizes) < 2 or sizes[0] != LATENTS or sizes[-1] != cardinality:
        raise CheckpointError(f"{where}: layer sizes {sizes} do not map {LATENTS} latents to {cardinality} outcomes")
    flat_weights = np.array(data["weights"], dtype=float)
    flat_biases = np.array(data["biases"], dtype=float)
    expected_weights = sum(a * b for a, b in zip(sizes, sizes[1:]))
    expected_biases = sum(sizes[1:])
    if flat_weights.size != expected_weights:
        raise CheckpointError(f"{where}: {flat_weights.size} weights for layer sizes {sizes}, expected {expected_weights}")
    if flat_biases.size != expected_biases:
        raise CheckpointError(f"{where}: {flat_biases.size} biases for layer sizes {sizes}, expected {expected_biases}")
    weights, biases = [], []
    weight_offset = bias_offset = 0
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        weights.append(flat_weights[weight_offset:weight_offset + fan_in * fan_out].reshape(fan_in, fan_out))
        biases.append(flat_biases[bias_offset:bias_offset + fan_out])
        weight_offset += fan_in * fan_out
        bias_offset += fan_out
    return PartyNet(sizes, weights, biases, activation)
