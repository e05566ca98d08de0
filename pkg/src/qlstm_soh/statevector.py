"""Dense statevector simulation for small qubit registers.

States are plain ``complex128`` arrays of length ``2**n``.  Any number of
leading batch axes is allowed, so ``(S, B, 2**n)`` holds ``S*B`` independent
registers that are evolved together.  Qubit 0 is the least significant bit
of the basis-state index.

Gate constructors accept scalars or arrays of angles; an array of shape
``(...)`` produces a stack of matrices of shape ``(..., 2, 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ValidationError

MAX_QUBITS = 14
_SQRT1_2 = 1.0 / np.sqrt(2.0)


# --------------------------------------------------------------------------
# Gates
# --------------------------------------------------------------------------

def h_gate() -> np.ndarray:
    return np.array([[_SQRT1_2, _SQRT1_2], [_SQRT1_2, -_SQRT1_2]], dtype=np.complex128)


def x_gate() -> np.ndarray:
    return np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.complex128)


def rx_gate(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    out = np.empty(theta.shape + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = c
    out[..., 0, 1] = -1j * s
    out[..., 1, 0] = -1j * s
    out[..., 1, 1] = c
    return out


def ry_gate(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    out = np.empty(theta.shape + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def rz_gate(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    out = np.zeros(theta.shape + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = np.exp(-0.5j * theta)
    out[..., 1, 1] = np.exp(0.5j * theta)
    return out


def rot_gate(alpha, beta, gamma) -> np.ndarray:
    """General rotation ``RZ(gamma) @ RY(beta) @ RZ(alpha)``."""
    return rz_gate(gamma) @ ry_gate(beta) @ rz_gate(alpha)


def is_unitary(u: np.ndarray, atol: float = 1e-12) -> bool:
    u = np.asarray(u)
    if u.shape[-2:] != (2, 2):
        return False
    prod = np.conj(np.swapaxes(u, -1, -2)) @ u
    return bool(np.all(np.abs(prod - np.eye(2)) <= atol))


# --------------------------------------------------------------------------
# State operations
# --------------------------------------------------------------------------

def n_qubits_of(state: np.ndarray) -> int:
    dim = state.shape[-1]
    n = dim.bit_length() - 1
    if dim != 1 << n or n < 1:
        raise ValidationError(f"state length {dim} is not a power of two")
    return n


def zero_state(n: int) -> np.ndarray:
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= MAX_QUBITS:
        raise ConfigError(f"qubit count must be in [1, {MAX_QUBITS}], got {n!r}")
    state = np.zeros(1 << n, dtype=np.complex128)
    state[0] = 1.0
    return state


def apply_1q(state: np.ndarray, gate: np.ndarray, target: int, check: bool = True) -> np.ndarray:
    """Apply a single-qubit gate (or a broadcastable stack of them) to ``target``.

    ``gate`` has shape ``(..., 2, 2)``; its leading axes broadcast against the
    leading (batch) axes of ``state``.
    """
    n = n_qubits_of(state)
    if not 0 <= target < n:
        raise IndexError(f"target qubit {target} out of range for {n} qubits")
    gate = np.asarray(gate, dtype=np.complex128)
    if check and not is_unitary(gate):
        raise ValidationError("gate matrix is not unitary")

    batch = state.shape[:-1]
    view = state.reshape(batch + (-1, 2, 1 << target))
    s0 = view[..., 0, :]
    s1 = view[..., 1, :]
    if gate.ndim > 2:
        # trailing singleton axes line the gate batch up with (hi, lo)
        u = gate[..., None, None, :, :]
        u00, u01, u10, u11 = u[..., 0, 0], u[..., 0, 1], u[..., 1, 0], u[..., 1, 1]
    else:
        u00, u01, u10, u11 = gate[0, 0], gate[0, 1], gate[1, 0], gate[1, 1]
    new0 = u00 * s0 + u01 * s1
    new1 = u10 * s0 + u11 * s1
    out = np.stack((new0, new1), axis=-2)
    return out.reshape(out.shape[:-3] + (1 << n,))


@lru_cache(maxsize=None)
def cnot_permutation(n: int, control: int, target: int) -> np.ndarray:
    """Index map ``p`` with ``(CNOT psi)[b] = psi[p[b]]``."""
    idx = np.arange(1 << n)
    flip = (idx >> control) & 1
    return idx ^ (flip << target)


@lru_cache(maxsize=None)
def bitflip_permutation(n: int, q: int) -> np.ndarray:
    return np.arange(1 << n) ^ (1 << q)


def apply_cnot(state: np.ndarray, control: int, target: int) -> np.ndarray:
    n = n_qubits_of(state)
    if control == target:
        raise ValidationError("CNOT control and target must differ")
    for q in (control, target):
        if not 0 <= q < n:
            raise IndexError(f"qubit {q} out of range for {n} qubits")
    return state[..., cnot_permutation(n, control, target)]


def apply_x(state: np.ndarray, q: int) -> np.ndarray:
    return state[..., bitflip_permutation(n_qubits_of(state), q)]


@lru_cache(maxsize=None)
def z_signs(n: int) -> np.ndarray:
    """``(2**n, n)`` matrix of Z eigenvalues: +1 where bit q is 0, -1 where it is 1."""
    idx = np.arange(1 << n)[:, None]
    bits = (idx >> np.arange(n)[None, :]) & 1
    return (1 - 2 * bits).astype(np.float64)


def probabilities(state: np.ndarray) -> np.ndarray:
    return state.real**2 + state.imag**2


def expect_z(state: np.ndarray, q: int) -> np.ndarray | float:
    n = n_qubits_of(state)
    if not 0 <= q < n:
        raise IndexError(f"qubit {q} out of range for {n} qubits")
    val = probabilities(state) @ z_signs(n)[:, q]
    return np.clip(val, -1.0, 1.0)


def expect_z_all(state: np.ndarray) -> np.ndarray:
    """Per-qubit <Z> for every register in the batch; shape ``(..., n)``."""
    n = n_qubits_of(state)
    return np.clip(probabilities(state) @ z_signs(n), -1.0, 1.0)


# --------------------------------------------------------------------------
# Bit-flip noise
# --------------------------------------------------------------------------

class NoiseMode(str, Enum):
    EXACT = "exact"
    TRAJECTORY = "trajectory"


class NoisePlacement(str, Enum):
    BEFORE_MEASUREMENT = "before_measurement"
    AFTER_EACH_LAYER = "after_each_layer"


@dataclass(frozen=True)
class NoiseSpec:
    p: float
    mode: NoiseMode = NoiseMode.EXACT
    placement: NoisePlacement = NoisePlacement.BEFORE_MEASUREMENT
    n_trajectories: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", NoiseMode(self.mode))
        object.__setattr__(self, "placement", NoisePlacement(self.placement))
        _check_p(self.p)
        if self.mode is NoiseMode.TRAJECTORY and self.n_trajectories < 1:
            raise ConfigError("trajectory mode needs n_trajectories >= 1")


def _check_p(p: float) -> None:
    if not (0.0 <= p <= 0.5):
        raise ValidationError(f"bit-flip probability must lie in [0, 0.5], got {p}")


def bitflip_attenuate(expectations, p: float, n_channels: int = 1) -> np.ndarray:
    """Exact effect of ``n_channels`` bit-flip channels on Pauli-Z readouts.

    X Z X = -Z, so each channel maps <Z> to (1 - 2p) <Z>.
    """
    _check_p(p)
    if n_channels < 0:
        raise ValidationError("n_channels must be non-negative")
    return np.asarray(expectations, dtype=np.float64) * (1.0 - 2.0 * p) ** n_channels


def bitflip_trajectory(state: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """One stochastic unravelling of the bit-flip channel on every qubit.

    With a batched ``state`` each register draws its own flips.
    """
    _check_p(p)
    n = n_qubits_of(state)
    if p == 0.0:
        return state
    flips = rng.random(state.shape[:-1] + (n,)) < p
    return apply_flip_mask(state, flips)


def apply_flip_mask(state: np.ndarray, flips: np.ndarray) -> np.ndarray:
    """Apply X on qubit q wherever ``flips[..., q]`` is set."""
    n = n_qubits_of(state)
    for q in range(n):
        mask = flips[..., q]
        if not mask.any():
            continue
        flipped = state[..., bitflip_permutation(n, q)]
        state = np.where(mask[..., None], flipped, state)
    return state
