import dataclasses
import enum
import math
import pathlib

import numpy as np

PROB_NEGATIVE_TOLERANCE = 1e-12
PROB_SUM_TOLERANCE = 1e-9
HERMITIAN_TOLERANCE = 1e-10
TRACE_TOLERANCE = 1e-10
PSD_TOLERANCE = 1e-9


class TriangleError(Exception):
    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class DistributionError(TriangleError, ValueError):
    pass


class SetupError(TriangleError, ValueError):
    pass


class IntEnumHack(enum.IntEnum):
    def __new__(cls, value, attrs: dict = None):
        self = int.__new__(cls, value)
        self._value_ = value
        # Add additional attributes
        if isinstance(attrs, dict):
            for key, value in attrs.items():
                setattr(self, key, value)
        return self
    def __init__(self, *args, **kwargs):
        cls = type(self)
        # Add index for use with _member_names_
        self._index_ = len(cls._member_names_)  # self is added later, so the length is up to the previous item, so not len() - 1

    @classmethod
    def from_cli(cls, token: str):
        for member in cls:
            if getattr(member, "cli", None) == token:
                return member
        choices = ", ".join(member.cli for member in cls)
        raise ValueError(f"Unknown {cls.__name__.lower()} '{token}' (expected one of: {choices})")


Party = IntEnumHack("Party", [
    ("A", (1, {"cli": "A", "latents": ("beta", "gamma")})),
    ("B", (2, {"cli": "B", "latents": ("gamma", "alpha")})),
    ("C", (3, {"cli": "C", "latents": ("alpha", "beta")})),
])


Noise = IntEnumHack("Noise", [
    ("Clean",      (1, {"cli": "none"})),
    ("Visibility", (2, {"cli": "visibility"})),
    ("Detector",   (3, {"cli": "detector"})),
])


Family = IntEnumHack("Family", [
    ("FritzVisibility",   (1, {"cli": "fritz-visibility",   "base": "fritz",   "noise": Noise.Visibility, "low": 0.0, "high": 1.0})),
    ("ElegantVisibility", (2, {"cli": "elegant-visibility", "base": "elegant", "noise": Noise.Visibility, "low": 0.0, "high": 1.0})),
    ("ElegantDetector",   (3, {"cli": "elegant-detector",   "base": "elegant", "noise": Noise.Detector,   "low": 0.0, "high": 1.0})),
    ("RenouScan",         (4, {"cli": "renou-scan",         "base": "renou",   "noise": Noise.Clean,      "low": 0.5, "high": 1.0})),
    ("RenouVisibility",   (5, {"cli": "renou-visibility",   "base": "renou",   "noise": Noise.Visibility, "low": 0.0, "high": 1.0})),
    ("RenouDetector",     (6, {"cli": "renou-detector",     "base": "renou",   "noise": Noise.Detector,   "low": 0.0, "high": 1.0})),
])


Activation = IntEnumHack("Activation", [
    ("ReLU", (1, {"cli": "relu"})),
    ("Tanh", (2, {"cli": "tanh"})),
])


Loss = IntEnumHack("Loss", [
    ("KL",  (1, {"cli": "kl"})),
    ("MSE", (2, {"cli": "mse"})),
    ("MAE", (3, {"cli": "mae"})),
])


Command = IntEnumHack("Command", [
    ("GenTarget", (1, {"cli": "gen-target"})),
    ("Train",     (2, {"cli": "train"})),
    ("Sweep",     (3, {"cli": "sweep"})),
    ("FitExit",   (4, {"cli": "fit-exit"})),
    ("Oracle",    (5, {"cli": "oracle"})),
    ("Responses", (6, {"cli": "responses"})),
])


def _check_hermitian_psd(matrix: np.ndarray, what: str):
    if not np.allclose(matrix, matrix.conj().T, rtol=0, atol=HERMITIAN_TOLERANCE):
        raise SetupError(f"{what} is not Hermitian")
    smallest = np.linalg.eigvalsh(matrix).min()
    if smallest < -PSD_TOLERANCE:
        raise SetupError(f"{what} is not positive semidefinite (smallest eigenvalue {smallest:.3e})")


@dataclasses.dataclass(slots=True, eq=False)
class TwoQubitState:
    rho: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=complex)
        if self.rho.shape != (4, 4):
            raise SetupError(f"Two-qubit state must be 4x4, got {self.rho.shape}")
        _check_hermitian_psd(self.rho, "State")
        trace = np.trace(self.rho)
        if abs(trace - 1) > TRACE_TOLERANCE:
            raise SetupError(f"State trace is {trace.real:.12f}, expected 1")


@dataclasses.dataclass(slots=True, eq=False)
class PartyMeasurement:
    elements: list[np.ndarray]

    def __post_init__(self):
        self.elements = [np.asarray(element, dtype=complex) for element in self.elements]
        if len(self.elements) < 2:
            raise SetupError("Measurement needs at least two outcomes")
        for i, element in enumerate(self.elements):
            if element.shape != (4, 4):
                raise SetupError(f"Measurement element {i} must be 4x4, got {element.shape}")
            _check_hermitian_psd(element, f"Measurement element {i}")
        if not np.allclose(sum(self.elements), np.eye(4), rtol=0, atol=HERMITIAN_TOLERANCE):
            raise SetupError("Measurement elements do not sum to the identity")

    @property
    def stacked(self):
        return np.stack(self.elements)


@dataclasses.dataclass(slots=True, eq=False)
class TriangleQuantumSetup:
    # alpha links Bob-Charlie, beta links Alice-Charlie, gamma links Alice-Bob
    source_alpha: TwoQubitState
    source_beta: TwoQubitState
    source_gamma: TwoQubitState
    meas_a: PartyMeasurement
    meas_b: PartyMeasurement
    meas_c: PartyMeasurement
    outcome_cardinality: int = 4

    def __post_init__(self):
        for party, meas in zip(Party, (self.meas_a, self.meas_b, self.meas_c)):
            if len(meas.elements) != self.outcome_cardinality:
                raise SetupError(
                    f"Party {party.name} measurement has {len(meas.elements)} outcomes, "
                    f"expected {self.outcome_cardinality}"
                )


@dataclasses.dataclass(slots=True, eq=False)
class Distribution:
    cardinality: int
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float).reshape(-1)
        if probs.size != self.cardinality ** 3:
            raise DistributionError(
                f"Distribution over {self.cardinality} outcomes needs {self.cardinality ** 3} entries, got {probs.size}"
            )
        if not np.all(np.isfinite(probs)):
            raise DistributionError("Distribution has non-finite entries")
        if (smallest := probs.min()) < -PROB_NEGATIVE_TOLERANCE:
            raise DistributionError(f"Distribution has negative entry {smallest:.3e}")
        probs = np.maximum(probs, 0.0)
        total = probs.sum()
        if abs(total - 1) > PROB_SUM_TOLERANCE:
            raise DistributionError(f"Distribution sums to {total:.12f}, expected 1")
        probs /= total
        probs.flags.writeable = False
        self.probs = probs

    @classmethod
    def from_tensor(cls, tensor: np.ndarray):
        tensor = np.asarray(tensor, dtype=float)
        return cls(tensor.shape[0], tensor.reshape(-1))

    @classmethod
    def uniform(cls, cardinality: int):
        return cls(cardinality, np.full(cardinality ** 3, 1 / cardinality ** 3))

    @classmethod
    def point_mass(cls, cardinality: int, a: int, b: int, c: int):
        tensor = np.zeros((cardinality,) * 3)
        tensor[a, b, c] = 1.0
        return cls.from_tensor(tensor)

    @property
    def tensor(self):
        return self.probs.reshape((self.cardinality,) * 3)

    def marginal(self, party: Party):
        axes = tuple(i for i in range(3) if i != party._index_)
        return self.tensor.sum(axis=axes)

    def outcomes(self):
        o = self.cardinality
        for index in range(o ** 3):
            yield index // (o * o), (index // o) % o, index % o


@dataclasses.dataclass(slots=True)
class FamilySpec:
    family: Family
    renou_u_squared: float = None

    def __post_init__(self):
        if self.family in (Family.RenouVisibility, Family.RenouDetector):
            if self.renou_u_squared is None:
                raise ValueError(f"Family {self.family.cli} requires renou_u_squared")
        if self.renou_u_squared is not None and not 0.5 <= self.renou_u_squared <= 1.0:
            raise ValueError(f"renou_u_squared {self.renou_u_squared} outside [0.5, 1]")

    @property
    def low(self):
        return self.family.low

    @property
    def high(self):
        return self.family.high

    def contains(self, param: float):
        return self.low <= param <= self.high

    @property
    def label(self):
        if self.family in (Family.RenouVisibility, Family.RenouDetector):
            return f"{self.family.cli} (u2={self.renou_u_squared:g})"
        return self.family.cli


@dataclasses.dataclass(slots=True)
class TrainConfig:
    batch_size: int = 8000
    depth: int = 5
    width: int = 30
    activation: Activation = Activation.ReLU
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    training_steps: int = 2000
    restarts: int = 4
    eval_batch_size: int = 80000
    rng_seed: int = 0
    eval_seed: int = 1_000_003
    loss: Loss = Loss.KL
    early_stop: bool = True
    early_stop_window: int = 100
    early_stop_tolerance: float = 1e-7
    early_stop_patience: int = 3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_batch_size < self.batch_size:
            raise ValueError(f"eval_batch_size {self.eval_batch_size} is smaller than batch_size {self.batch_size}")
        if self.depth < 1 or self.width < 1:
            raise ValueError(f"depth and width must be >= 1, got {self.depth} and {self.width}")
        if self.training_steps < 1:
            raise ValueError(f"training_steps must be >= 1, got {self.training_steps}")
        if self.restarts < 0:
            raise ValueError(f"restarts must be >= 0, got {self.restarts}")
        self.rng_seed = int(self.rng_seed) & 0xFFFFFFFFFFFFFFFF

    def to_dict(self):
        data = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            data[field.name] = value.cli if isinstance(value, IntEnumHack) else value
        return data

    @classmethod
    def from_dict(cls, data: dict):
        names = {field.name for field in dataclasses.fields(cls)}
        if unknown := set(data) - names:
            raise ValueError(f"Unknown training config keys: {', '.join(sorted(unknown))}")
        data = dict(data)
        if "activation" in data:
            data["activation"] = Activation.from_cli(data["activation"])
        if "loss" in data:
            data["loss"] = Loss.from_cli(data["loss"])
        return cls(**data)


@dataclasses.dataclass(slots=True)
class LatentBatch:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            values = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if values.size and (values.min() < 0 or values.max() > 1):
                raise ValueError(f"Latent {name} has entries outside [0, 1]")
            setattr(self, name, values)
        if not self.alpha.size == self.beta.size == self.gamma.size:
            raise ValueError("Latent vectors must have equal length")

    @property
    def size(self):
        return self.alpha.size

    def inputs(self, party: Party):
        first, second = party.latents
        return np.stack((getattr(self, first), getattr(self, second)), axis=1)


@dataclasses.dataclass(slots=True, eq=False)
class PartyNet:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: Activation = Activation.ReLU

    def __post_init__(self):
        self.layer_sizes = tuple(int(size) for size in self.layer_sizes)
        if len(self.layer_sizes) < 2 or self.layer_sizes[0] != 2:
            raise ValueError(f"Party net must map 2 latents to outcomes, got layer sizes {self.layer_sizes}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("Party net needs one weight matrix and bias per layer")
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes, self.layer_sizes[1:])):
            if self.weights[i].shape != (fan_in, fan_out) or self.biases[i].shape != (fan_out,):
                raise ValueError(
                    f"Layer {i} has shapes {self.weights[i].shape}/{self.biases[i].shape}, "
                    f"expected {(fan_in, fan_out)}/{(fan_out,)}"
                )

    @property
    def cardinality(self):
        return self.layer_sizes[-1]

    def parameters(self):
        for weight, bias in zip(self.weights, self.biases):
            yield weight
            yield bias


@dataclasses.dataclass(slots=True, eq=False)
class TriangleModel:
    # net_a reads (beta, gamma), net_b reads (gamma, alpha), net_c reads (alpha, beta)
    net_a: PartyNet
    net_b: PartyNet
    net_c: PartyNet

    def __post_init__(self):
        if not self.net_a.cardinality == self.net_b.cardinality == self.net_c.cardinality:
            raise ValueError("All party nets must share the outcome cardinality")

    @property
    def cardinality(self):
        return self.net_a.cardinality

    def net(self, party: Party) -> PartyNet:
        return (self.net_a, self.net_b, self.net_c)[party._index_]

    def parameters(self):
        for party in Party:
            yield from self.net(party).parameters()


@dataclasses.dataclass(slots=True, eq=False)
class ClassicalModel:
    # Discrete hidden symbols; response_a[beta, gamma, a], response_b[gamma, alpha, b], response_c[alpha, beta, c]
    weights_alpha: np.ndarray
    weights_beta: np.ndarray
    weights_gamma: np.ndarray
    response_a: np.ndarray
    response_b: np.ndarray
    response_c: np.ndarray

    @property
    def hidden_cardinality(self):
        return self.weights_alpha.size

    @property
    def cardinality(self):
        return self.response_a.shape[-1]

    @property
    def deterministic(self):
        return all(
            np.all((response == 0) | (response == 1))
            for response in (self.response_a, self.response_b, self.response_c)
        )


@dataclasses.dataclass(slots=True, eq=False)
class SweepPoint:
    param: float
    target: Distribution
    raw_distance: float = math.nan
    smoothed_distance: float = math.nan
    model: TriangleModel = None
    model_file: pathlib.Path = None
    model_param: float = None
    failed: bool = False
    error: str = ""


@dataclasses.dataclass(slots=True, eq=False)
class SweepResult:
    family: FamilySpec
    config: TrainConfig
    points: list[SweepPoint]

    def __post_init__(self):
        grid = self.grid
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("Sweep grid must be strictly increasing")
        if any(not self.family.contains(param) for param in grid):
            raise ValueError(f"Sweep grid leaves the range [{self.family.low}, {self.family.high}] of {self.family.label}")

    @property
    def grid(self):
        return [point.param for point in self.points]

    @property
    def completed(self):
        return all(not point.failed for point in self.points)


@dataclasses.dataclass(slots=True)
class ExitFit:
    v_star_hat: float
    theta_hat_degrees: float
    residual: float
    lattice_v_star: tuple[float, float, int]
    lattice_theta: tuple[float, float, int]


@dataclasses.dataclass(slots=True)
class NoExit:
    max_distance: float
    threshold: float
    message: str = "no exit detected"


@dataclasses.dataclass(slots=True, eq=False)
class ResponseSample:
    party: Party
    resolution: int
    samples_per_point: int
    latent1: np.ndarray
    latent2: np.ndarray
    outcomes: np.ndarray

    @property
    def records(self):
        return np.column_stack((self.latent1, self.latent2, self.outcomes))


@dataclasses.dataclass(slots=True, eq=False)
class OracleReport:
    d_model: float
    d_oracle: float
    model: TriangleModel
    classical: ClassicalModel

    @property
    def gap(self):
        return self.d_model - self.d_oracle


@dataclasses.dataclass(slots=True)
class RunConfig:
    command: Command
    family: FamilySpec = None
    v: float = None
    u2: float = None
    grid: list[float] = None
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    out: pathlib.Path = None
    seed: int = 0
    jobs: int = 1
    force: bool = False
    bidirectional: bool = False
    target: pathlib.Path = None
    model: pathlib.Path = None
    sweep: pathlib.Path = None
    party: Party = Party.B
    resolution: int = 100
    samples: int = 30
    svg: bool = False
    hidden_cardinality: int = 6
    verbose: bool = False
    config_file: pathlib.Path = None

    def to_dict(self):
        data = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, IntEnumHack):
                value = value.cli
            elif isinstance(value, FamilySpec):
                value = {"family": value.family.cli, "renou_u_squared": value.renou_u_squared}
            elif isinstance(value, TrainConfig):
                value = value.to_dict()
            elif isinstance(value, pathlib.Path):
                value = str(value)
            data[field.name] = value
        return data


