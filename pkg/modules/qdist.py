import functools
import logging
import math

import numpy as np

from common.structs import (
    Distribution,
    Family,
    FamilySpec,
    Noise,
    PartyMeasurement,
    SetupError,
    TriangleQuantumSetup,
    TwoQubitState,
)

MATRIX_TOLERANCE = 1e-12
KET_NORM_TOLERANCE = 1e-10

KET_0 = np.array([1, 0], dtype=complex)
KET_1 = np.array([0, 1], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)
IDENTITY_4 = np.eye(4, dtype=complex)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)

PSI_MINUS = (np.kron(KET_0, KET_1) - np.kron(KET_1, KET_0)) / math.sqrt(2)
PHI_PLUS = (np.kron(KET_0, KET_0) + np.kron(KET_1, KET_1)) / math.sqrt(2)

# Bloch directions of the tetrahedron vertices
TETRAHEDRON = np.array([
    [1, 1, 1],
    [1, -1, -1],
    [-1, 1, -1],
    [-1, -1, 1],
]) / math.sqrt(3)

# Laid-down order [A_beta, C_beta, A_gamma, B_gamma, B_alpha, C_alpha] -> party order
# [A_beta, A_gamma, B_gamma, B_alpha, C_alpha, C_beta]
SOURCE_TO_PARTY_ORDER = (0, 5, 1, 2, 3, 4)

logger = logging.getLogger(__name__)


def kron(*matrices: np.ndarray) -> np.ndarray:
    return functools.reduce(np.kron, matrices)


def matrices_close(a: np.ndarray, b: np.ndarray, atol: float = MATRIX_TOLERANCE):
    return a.shape == b.shape and np.allclose(a, b, rtol=0, atol=atol)


def projector(ket: np.ndarray) -> np.ndarray:
    ket = np.asarray(ket, dtype=complex)
    return np.outer(ket, ket.conj())


def observable_projector(observable: np.ndarray, outcome: int) -> np.ndarray:
    # Outcome 0 is the +1 eigenspace, outcome 1 the -1 eigenspace
    return (IDENTITY_2 + (-1) ** outcome * observable) / 2


def qubit_count(m: np.ndarray) -> int:
    dim = m.shape[0]
    if m.ndim != 2 or m.shape[1] != dim or dim < 1 or dim & (dim - 1):
        raise SetupError(f"Matrix of shape {m.shape} does not act on a whole number of qubits")
    return dim.bit_length() - 1


def permute_qubits(m: np.ndarray, perm: tuple[int, ...]) -> np.ndarray:
    # Moves qubit i to position perm[i]
    n = qubit_count(m)
    if sorted(perm) != list(range(n)):
        raise SetupError(f"{perm} is not a permutation of {n} qubits")
    inverse = [0] * n
    for source, destination in enumerate(perm):
        inverse[destination] = source
    tensor = m.reshape((2,) * (2 * n))
    axes = inverse + [n + axis for axis in inverse]
    return tensor.transpose(axes).reshape(m.shape)


def werner_state(base: np.ndarray, v: float) -> TwoQubitState:
    _check_unit(v, "v")
    base = np.asarray(base, dtype=complex)
    if abs(np.linalg.norm(base) - 1) > KET_NORM_TOLERANCE:
        raise SetupError(f"Werner base ket has norm {np.linalg.norm(base):.12f}")
    return TwoQubitState(v * projector(base) + (1 - v) * IDENTITY_4 / 4)


def noisy_povm(m: PartyMeasurement, v: float) -> PartyMeasurement:
    _check_unit(v, "v")
    return PartyMeasurement([v * element + (1 - v) * IDENTITY_4 / 4 for element in m.elements])


def born_distribution(setup: TriangleQuantumSetup) -> Distribution:
    laid = kron(setup.source_beta.rho, setup.source_gamma.rho, setup.source_alpha.rho)
    rho = permute_qubits(laid, SOURCE_TO_PARTY_ORDER).reshape((4,) * 6)
    # p(abc) = Tr[(A_a x B_b x C_c) rho]
    probs = np.einsum(
        "aij,bkl,cmn,jlnikm->abc",
        setup.meas_a.stacked,
        setup.meas_b.stacked,
        setup.meas_c.stacked,
        rho,
        optimize=True,
    )
    imaginary = np.abs(probs.imag).max()
    if imaginary > 1e-9:
        raise SetupError(f"Born rule produced complex probabilities (max imaginary part {imaginary:.3e})")
    return Distribution.from_tensor(probs.real)


def classical_correlated_state() -> TwoQubitState:
    return TwoQubitState((projector(np.kron(KET_0, KET_0)) + projector(np.kron(KET_1, KET_1))) / 2)


@functools.cache
def _fritz_measurements():
    # a = 2s + r: s read from the beta qubit picks Z (s=0) or X (s=1) on the gamma qubit
    alice_observables = (PAULI_Z, PAULI_X)
    bob_observables = ((PAULI_X + PAULI_Z) / math.sqrt(2), (PAULI_X - PAULI_Z) / math.sqrt(2))
    bits = (projector(KET_0), projector(KET_1))
    alice, bob, charlie = [], [], []
    for basis_bit in range(2):
        for result in range(2):
            # Alice holds [beta, gamma], Bob holds [gamma, alpha], Charlie holds [alpha, beta]
            alice.append(kron(bits[basis_bit], observable_projector(alice_observables[basis_bit], result)))
            bob.append(kron(observable_projector(bob_observables[basis_bit], result), bits[basis_bit]))
            charlie.append(kron(bits[basis_bit], bits[result]))
    return PartyMeasurement(alice), PartyMeasurement(bob), PartyMeasurement(charlie)


def fritz_family(v: float) -> Distribution:
    _check_unit(v, "v")
    alice, bob, charlie = _fritz_measurements()
    classical = classical_correlated_state()
    setup = TriangleQuantumSetup(
        source_alpha=classical,
        source_beta=classical,
        source_gamma=werner_state(PSI_MINUS, v),
        meas_a=alice,
        meas_b=bob,
        meas_c=charlie,
    )
    return born_distribution(setup)


def conditional_correlators(dist: Distribution) -> np.ndarray:
    # E[s, t] = sum_rq (-1)^(r+q) p(r, q | s, t) in the Fritz encoding a = 2s + r, b = 2t + q
    tensor = dist.tensor.sum(axis=2).reshape(2, 2, 2, 2)  # s, r, t, q
    correlators = np.zeros((2, 2))
    for s in range(2):
        for t in range(2):
            block = tensor[s, :, t, :]
            total = block.sum()
            if total <= 0:
                raise SetupError(f"Basis sector ({s}, {t}) has zero probability")
            signs = np.array([[1, -1], [-1, 1]])
            correlators[s, t] = (signs * block).sum() / total
    return correlators


def chsh_value(dist: Distribution) -> float:
    correlators = conditional_correlators(dist).reshape(-1)
    total = correlators.sum()
    return float(max(abs(total - 2 * correlator) for correlator in correlators))


def bloch_ket(direction: np.ndarray) -> np.ndarray:
    # +1 eigenstate of direction . sigma, real nonnegative first amplitude
    x, y, z = np.asarray(direction, dtype=float) / np.linalg.norm(direction)
    first = math.sqrt(max(0.0, (1 + z) / 2))
    if first < 1e-15:
        return KET_1.copy()
    return np.array([first, complex(x, y) / (2 * first)], dtype=complex)


@functools.cache
def elegant_basis() -> tuple[np.ndarray, ...]:
    basis = []
    for direction in TETRAHEDRON:
        product = np.kron(bloch_ket(direction), bloch_ket(-direction))
        # Rephase so <m,-m|psi-> = i/sqrt(2), which keeps the four eigenstates orthonormal
        overlap = np.vdot(product, PSI_MINUS)
        product *= overlap / abs(overlap) / 1j
        ket = math.sqrt(3 / 2) * product + 1j * (math.sqrt(3) - 1) / 2 * PSI_MINUS
        ket.flags.writeable = False
        basis.append(ket)
    return tuple(basis)


@functools.cache
def _elegant_measurement() -> PartyMeasurement:
    return PartyMeasurement([projector(ket) for ket in elegant_basis()])


def elegant_family(noise: Noise, v: float) -> Distribution:
    _check_unit(v, "v")
    measurement = _elegant_measurement()
    if noise is Noise.Visibility:
        source = werner_state(PSI_MINUS, v)
    elif noise is Noise.Detector:
        source = werner_state(PSI_MINUS, 1.0)
        measurement = noisy_povm(measurement, v)
    else:
        raise ValueError(f"Elegant family has no noise model '{noise.cli}'")
    return born_distribution(TriangleQuantumSetup(source, source, source, measurement, measurement, measurement))


def renou_basis(u_squared: float) -> tuple[np.ndarray, ...]:
    if not 0.5 <= u_squared <= 1.0:
        raise ValueError(f"u^2 = {u_squared} outside [0.5, 1]")
    u = math.sqrt(u_squared)
    w = math.sqrt(max(0.0, 1 - u_squared))
    ket_00, ket_01, ket_10, ket_11 = np.eye(4, dtype=complex)
    return (ket_01, ket_10, u * ket_00 + w * ket_11, w * ket_00 - u * ket_11)


def renou_family(u_squared: float, noise: Noise, v: float = 1.0) -> Distribution:
    measurement = PartyMeasurement([projector(ket) for ket in renou_basis(u_squared)])
    if noise is Noise.Clean:
        source = werner_state(PHI_PLUS, 1.0)
    elif noise is Noise.Visibility:
        source = werner_state(PHI_PLUS, v)
    elif noise is Noise.Detector:
        source = werner_state(PHI_PLUS, 1.0)
        measurement = noisy_povm(measurement, v)
    else:
        raise ValueError(f"Renou family has no noise model '{noise}'")
    if noise is not Noise.Clean:
        _check_unit(v, "v")
    return born_distribution(TriangleQuantumSetup(source, source, source, measurement, measurement, measurement))


def family_distribution(spec: FamilySpec, param: float) -> Distribution:
    # param is v for the noisy families and u^2 for the Renou scan
    if not spec.contains(param):
        raise ValueError(f"Parameter {param} outside [{spec.low}, {spec.high}] of {spec.label}")
    logger.debug(f"Computing {spec.label} target at {param:g}")
    match spec.family:
        case Family.FritzVisibility:
            return fritz_family(param)
        case Family.ElegantVisibility | Family.ElegantDetector:
            return elegant_family(spec.family.noise, param)
        case Family.RenouScan:
            return renou_family(param, Noise.Clean)
        case Family.RenouVisibility | Family.RenouDetector:
            return renou_family(spec.renou_u_squared, spec.family.noise, param)
    raise ValueError(f"Unknown family {spec.family}")


def _check_unit(value: float, name: str):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} = {value} outside [0, 1]")
