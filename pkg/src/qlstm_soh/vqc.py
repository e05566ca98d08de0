"""Variational quantum circuit used inside each recurrent gate.

Circuit layout for ``n`` qubits and ``L`` layers::

    |0> - H - RY(arctan v) - RZ(arctan v^2) - [ring CNOT - ROT(a, b, c)] x L - <Z>

Gradients use the two-term parameter-shift rule for every rotation angle,
both the trainable ones and the input-encoding ones.  All shifted circuits
of one call are stacked along a leading axis and simulated together.

Several independent circuits with the same layout (the four gates of a
recurrent cell) can be evaluated in one call by giving ``params`` a leading
block axis: ``params`` of shape ``(G, L, n, 3)`` with encodings ``(G, B, n)``.

The last rotation layer acts on one qubit each, so <Z_q> only depends on
qubit q's reduced state just before it.  Readout therefore stops the dense
simulation after the last ring of CNOTs and finishes each qubit on its
2x2 reduced density matrix; the numbers are identical to a full evolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import statevector as sv
from .errors import ConfigError, ShapeError
from .statevector import NoiseMode, NoisePlacement, NoiseSpec

SHIFT = np.pi / 2

# Upper bound on amplitudes held by one stacked simulation chunk (~64 MB).
MAX_CHUNK_AMPLITUDES = 1 << 22

_Z = np.diag([1.0, -1.0]).astype(np.complex128)


@dataclass(frozen=True)
class VqcConfig:
    n_qubits: int
    n_layers: int = 1
    entangler: str = "ring_cnot"
    noise: NoiseSpec | None = None
    # "auto": single-layer circuits are read out from per-qubit Bloch vectors
    # (see _product_moments); "dense" always simulates the full register.
    backend: str = "auto"

    def __post_init__(self):
        if self.backend not in ("auto", "dense"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.entangler != "ring_cnot":
            raise ConfigError(f"unknown entangler {self.entangler!r}")
        if not 2 <= self.n_qubits <= sv.MAX_QUBITS:
            raise ConfigError(f"ring entangler needs 2..{sv.MAX_QUBITS} qubits, got {self.n_qubits}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        noise = self.noise
        if (
            noise is not None
            and noise.mode is NoiseMode.EXACT
            and noise.placement is NoisePlacement.AFTER_EACH_LAYER
            and self.n_qubits * (self.n_layers - 1) > 12
        ):
            raise ConfigError("exact per-layer noise is limited to n_qubits * (n_layers - 1) <= 12")

    @property
    def param_shape(self) -> tuple[int, int, int]:
        return (self.n_layers, self.n_qubits, 3)

    @property
    def n_params(self) -> int:
        return 3 * self.n_qubits * self.n_layers


@dataclass
class EncodedAngles:
    theta_y: np.ndarray
    theta_z: np.ndarray


@dataclass
class EvalStats:
    """Running count of evaluated circuits (one per parameter setting per sample)."""

    circuits: int = 0
    by_kind: dict = field(default_factory=dict)

    def add(self, kind: str, count: int) -> None:
        self.circuits += count
        self.by_kind[kind] = self.by_kind.get(kind, 0) + count

    def reset(self) -> None:
        self.circuits = 0
        self.by_kind.clear()


stats = EvalStats()


def init_params(config: VqcConfig, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
    return rng.uniform(-scale, scale, size=config.param_shape)


def encode_angles(v) -> EncodedAngles:
    v = np.asarray(v, dtype=np.float64)
    return EncodedAngles(np.arctan(v), np.arctan(v * v))


def encoding_derivatives(v) -> tuple[np.ndarray, np.ndarray]:
    """d(arctan v)/dv and d(arctan v^2)/dv."""
    v = np.asarray(v, dtype=np.float64)
    return 1.0 / (1.0 + v * v), 2.0 * v / (1.0 + v**4)


def parameter_shift(fn, theta: float, shift: float = SHIFT):
    """Two-term shift rule for a function of one Pauli-rotation angle."""
    return (fn(theta + shift) - fn(theta - shift)) / 2.0


# --------------------------------------------------------------------------
# Simulation kernels
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def ring_permutation(n: int) -> np.ndarray:
    """Composite index map of CNOT(0,1), CNOT(1,2), ..., CNOT(n-1,0) in that order."""
    comp = np.arange(1 << n)
    for i in range(n):
        comp = comp[sv.cnot_permutation(n, i, (i + 1) % n)]
    return comp


@lru_cache(maxsize=None)
def _flip_patterns(n: int) -> np.ndarray:
    """``(2**n, 2**n)`` table: row m is the index map of X applied on the bits of m."""
    idx = np.arange(1 << n)
    return idx[None, :] ^ idx[:, None]


def _flip_weights(n: int, p: float) -> np.ndarray:
    k = np.array([bin(m).count("1") for m in range(1 << n)])
    return p**k * (1.0 - p) ** (n - k)


@lru_cache(maxsize=None)
def _readout_tables(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index/sign tables for qubit moments of ``psi[..., ring]`` read from ``psi``.

    Folding the final CNOT ring into the tables saves one pass over the
    register.  Returns Z signs ``(2**n, n)`` and, per qubit, the indices of
    the bit-0 amplitudes and of their bit-1 partners.
    """
    ring = ring_permutation(n)
    idx = np.arange(1 << n)
    zero = np.stack([idx[((idx >> q) & 1) == 0] for q in range(n)])
    one = zero | (1 << np.arange(n))[:, None]
    signs = np.ascontiguousarray(sv.z_signs(n)[np.argsort(ring)])
    return signs, ring[zero], ring[one]


def qubit_factors(theta_y: np.ndarray, theta_z: np.ndarray) -> np.ndarray:
    """Single-qubit amplitudes ``(..., n, 2)`` of RZ(tz) RY(ty) H |0>."""
    half_y = theta_y / 2
    c, s = np.cos(half_y), np.sin(half_y)
    phase = np.exp(-0.5j * theta_z)
    factors = np.empty(theta_y.shape + (2,), dtype=np.complex128)
    factors[..., 0] = (c - s) * sv._SQRT1_2 * phase
    factors[..., 1] = (s + c) * sv._SQRT1_2 * np.conj(phase)
    return factors


def kron_factors(factors: np.ndarray) -> np.ndarray:
    """Dense product state from per-qubit amplitudes ``(..., n, 2)``; qubit 0 is the LSB."""
    n = factors.shape[-2]
    psi = factors[..., 0, :]
    for q in range(1, n):
        psi = (factors[..., q, :, None] * psi[..., None, :]).reshape(psi.shape[:-1] + (-1,))
    return psi


def product_state(theta_y: np.ndarray, theta_z: np.ndarray) -> np.ndarray:
    """Encoded register RZ(tz) RY(ty) H |0> on every qubit, as a dense state.

    Equivalent to applying the 3n encoding gates to ``zero_state(n)``; the
    tensor-product form avoids 3n passes over the full register.
    """
    return kron_factors(qubit_factors(theta_y, theta_z))


@lru_cache(maxsize=None)
def _product_tables(n: int):
    """Bloch-component selectors for the moments of a ring-permuted product state.

    The ring is an XOR-linear map on basis indices, ``ring[b] = A b`` over
    GF(2).  Row m of ``A^-1`` picks the qubits whose Z parities make up
    Z_m after the ring; column m of ``A`` is the X pattern that pairs the
    two halves of qubit m's coherence.  Selectors index rows of the
    ``(4n, N)`` table of per-qubit [norm, z, x, y]; a y factor carries an
    extra i, collected in ``phase``.
    """
    ring = ring_permutation(n)
    inv = np.argsort(ring)
    unit = 1 << np.arange(n)
    s = (inv[unit][None, :] >> np.arange(n)[:, None]) & 1  # s[m, q]
    w = (ring[unit][:, None] >> np.arange(n)[None, :]) & 1  # w[m, q]
    base = 4 * np.arange(n)[None, :]
    phase = 1j ** (w & s).sum(axis=1)
    return base + s, base + 2 * w, base + 2 * w + s, phase


def _select_prod(table: np.ndarray, sel: np.ndarray) -> np.ndarray:
    out = table[sel[:, 0]] * table[sel[:, 1]]
    for q in range(2, sel.shape[1]):
        out *= table[sel[:, q]]
    return out


def _product_moments(factors: np.ndarray):
    """Qubit moments (pop, norm, coh) of ``ring(kron(factors))`` without the dense state.

    For a product state every Z-parity expectation and every X-pattern
    overlap factorises over qubits, so each moment is a product of n
    single-qubit Bloch components.  Matches the dense route to rounding.
    """
    lead, n = factors.shape[:-2], factors.shape[-2]
    a = np.moveaxis(factors.reshape((-1, n, 2)), 0, -1)  # (n, 2, N)
    a0, a1 = a[:, 0], a[:, 1]
    p0 = a0.real**2 + a0.imag**2
    p1 = a1.real**2 + a1.imag**2
    c = a0 * np.conj(a1)
    comp = np.empty((n, 4, a.shape[-1]))
    comp[:, 0] = p0 + p1
    comp[:, 1] = p0 - p1
    comp[:, 2] = 2.0 * c.real
    comp[:, 3] = 2.0 * c.imag
    table = comp.reshape((4 * n, -1))
    sel_pop, sel_even, sel_odd, phase = _product_tables(n)
    pop = _select_prod(table, sel_pop)
    coh = 0.5 * (_select_prod(table, sel_even) + phase[:, None] * _select_prod(table, sel_odd))
    norm = comp[:, 0].prod(axis=0)
    return pop.T.reshape(lead + (n,)), norm.reshape(lead + (1,)), coh.T.reshape(lead + (n,))


def _rot_matrices(angles: np.ndarray) -> np.ndarray:
    return sv.rot_gate(angles[..., 0], angles[..., 1], angles[..., 2])


def _z_observables(angles: np.ndarray) -> np.ndarray:
    """Heisenberg-picture readout ``U^dag Z U`` for ROT angles ``(..., 3)``."""
    u = _rot_matrices(angles)
    return np.conj(np.swapaxes(u, -1, -2)) @ _Z @ u


@dataclass
class _Prepared:
    """Register state just before the final rotation layer.

    ``pop`` is p0 - p1 and ``norm`` p0 + p1 for every qubit, ``coh`` the
    off-diagonal element rho_01 of its reduced density matrix.  Leading
    axes beyond the circuit stack hold noise mixture components.
    """

    pop: np.ndarray
    norm: np.ndarray
    coh: np.ndarray
    weights: np.ndarray | None = None
    final_flips: np.ndarray | None = None


def _prepare(config: VqcConfig, psi: np.ndarray, early_rots: np.ndarray | None, flips) -> _Prepared:
    """Evolve through all but the final rotation layer and reduce to qubit moments.

    ``early_rots`` has shape ``(*gate_batch, L - 1, n, 2, 2)`` broadcasting
    against the state batch.  ``flips`` is ``None`` or a per-layer list of
    trajectory masks already shaped to broadcast against ``psi``'s batch.
    """
    n, n_layers = config.n_qubits, config.n_layers
    noise = config.noise
    noisy = noise is not None and noise.p > 0.0
    ring = ring_permutation(n)
    weights = None
    for layer in range(n_layers - 1):
        psi = psi[..., ring]
        for q in range(n):
            psi = sv.apply_1q(psi, early_rots[..., layer, q, :, :], q, check=False)
        if not noisy:
            continue
        if noise.mode is NoiseMode.TRAJECTORY:
            if flips[layer] is not None:
                psi = sv.apply_flip_mask(psi, flips[layer])
        elif noise.placement is NoisePlacement.AFTER_EACH_LAYER:
            # Exact mixture over every X pattern; new leading axis per channel.
            psi = np.moveaxis(psi[..., _flip_patterns(n)], -2, 0)
            w = _flip_weights(n, noise.p)
            weights = w if weights is None else np.multiply.outer(w, weights)

    signs, zero, one = _readout_tables(n)
    probs = sv.probabilities(psi)
    # one qubit at a time: gathering all n index rows at once costs n/2 register copies
    coh = np.stack([np.sum(psi[..., z] * np.conj(psi[..., o]), axis=-1) for z, o in zip(zero, one)], axis=-1)
    final = None
    if noisy and noise.mode is NoiseMode.TRAJECTORY:
        final = flips[n_layers - 1]
    return _Prepared(
        pop=probs @ signs,
        norm=probs.sum(axis=-1, keepdims=True),
        coh=coh,
        weights=weights,
        final_flips=final,
    )


def _readout(config: VqcConfig, prep: _Prepared, observables: np.ndarray) -> np.ndarray:
    """Per-qubit <Z> after the final rotations, given their ``U^dag Z U``.

    ``observables`` has shape ``(..., n, 2, 2)`` broadcasting against the
    prepared moments ``(..., n)``.
    """
    m00 = observables[..., 0, 0].real
    m11 = observables[..., 1, 1].real
    m10 = observables[..., 1, 0]
    p0 = 0.5 * (prep.norm + prep.pop)
    p1 = 0.5 * (prep.norm - prep.pop)
    z = m00 * p0 + m11 * p1 + 2.0 * (m10 * prep.coh).real
    noise = config.noise
    if prep.final_flips is not None:
        # X after the last rotation flips the sign of that qubit's readout.
        z = np.where(prep.final_flips, -z, z)
    if prep.weights is not None:
        k = prep.weights.ndim
        z = np.tensordot(prep.weights.reshape(-1), z.reshape((-1,) + z.shape[k:]), axes=1)
    if noise is not None and noise.mode is NoiseMode.TRAJECTORY and noise.p > 0.0:
        z = z.mean(axis=0)
    z = np.clip(z, -1.0, 1.0)
    if noise is not None and noise.mode is NoiseMode.EXACT and noise.p > 0.0:
        z = sv.bitflip_attenuate(z, noise.p, 1)
    return z


def _trajectory_flips(config: VqcConfig, batch: int, rng) -> list | None:
    """Flip masks ``(T, B, n)`` per layer (``None`` where no channel acts)."""
    noise = config.noise
    if noise is None or noise.mode is not NoiseMode.TRAJECTORY or noise.p == 0.0:
        return None
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    shape = (noise.n_trajectories, batch, config.n_qubits)
    if noise.placement is NoisePlacement.AFTER_EACH_LAYER:
        return [rng.random(shape) < noise.p for _ in range(config.n_layers)]
    return [None] * (config.n_layers - 1) + [rng.random(shape) < noise.p]


def _shape_flips(flips, batch_ndim: int):
    """Reshape ``(T, B, n)`` masks to ``(T, 1, ..., B, n)`` for a stack of given rank."""
    if flips is None:
        return None
    extra = (1,) * (batch_ndim - 1)
    return [None if f is None else f.reshape(f.shape[:1] + extra + f.shape[1:]) for f in flips]


def _prepare_stack(config: VqcConfig, psi: np.ndarray, early_rots, flips, kind: str) -> _Prepared:
    """Prepare a ``(G, S, B, 2**n)`` stack, chunking along S to bound memory.

    ``early_rots`` is ``None`` or ``(G, S or 1, L - 1, n, 2, 2)``.
    """
    g, s, b, dim = psi.shape
    traj = 1 if flips is None else config.noise.n_trajectories
    stats.add(kind, traj * g * s * b)
    if early_rots is not None:
        early_rots = early_rots[:, :, None]  # broadcast over samples
    if flips is not None:
        psi = psi[None]
        if early_rots is not None:
            early_rots = early_rots[None]
    shaped = _shape_flips(flips, 3)

    per_item = traj * g * b * dim
    step = max(1, MAX_CHUNK_AMPLITUDES // per_item)
    if s <= step:
        return _prepare(config, psi, early_rots, shaped)
    axis = 1 if flips is None else 2
    parts = []
    for start in range(0, s, step):
        sl = (slice(None),) * axis + (slice(start, start + step),)
        rots_c = early_rots
        if early_rots is not None and early_rots.shape[axis] != 1:
            rots_c = early_rots[sl]
        parts.append(_prepare(config, psi[sl], rots_c, shaped))
    return _concat_prepared(parts, axis)


def _concat_prepared(parts: list, axis: int) -> _Prepared:
    lead = 0 if parts[0].weights is None else parts[0].weights.ndim
    cat_axis = axis + lead
    return _Prepared(
        pop=np.concatenate([p.pop for p in parts], axis=cat_axis),
        norm=np.concatenate([p.norm for p in parts], axis=cat_axis),
        coh=np.concatenate([p.coh for p in parts], axis=cat_axis),
        weights=parts[0].weights,
        final_flips=parts[0].final_flips,
    )


def _prepare_register(config: VqcConfig, factors: np.ndarray, early_rots, flips, kind: str) -> _Prepared:
    """Moments for encoded registers given as per-qubit factors ``(G, S, B, n, 2)``."""
    if config.n_layers > 1 or config.backend == "dense":
        # expand to dense registers one chunk of the stack at a time
        g, s, b, n = factors.shape[:4]
        traj = 1 if flips is None else config.noise.n_trajectories
        step = max(1, MAX_CHUNK_AMPLITUDES // (traj * g * b << n))
        if s <= step:
            return _prepare_stack(config, kron_factors(factors), early_rots, flips, kind)
        parts = []
        for start in range(0, s, step):
            rots_c = early_rots
            if early_rots is not None and early_rots.shape[1] != 1:
                rots_c = early_rots[:, start : start + step]
            parts.append(_prepare_stack(config, kron_factors(factors[:, start : start + step]), rots_c, flips, kind))
        return _concat_prepared(parts, 1 if flips is None else 2)
    g, s, b = factors.shape[:3]
    traj = 1 if flips is None else config.noise.n_trajectories
    stats.add(kind, traj * g * s * b)
    final = None
    if flips is not None:
        factors = factors[None]
        final = _shape_flips(flips, 3)[-1]
    pop, norm, coh = _product_moments(factors)
    return _Prepared(pop=pop, norm=norm, coh=coh, final_flips=final)


# --------------------------------------------------------------------------
# Input normalisation
# --------------------------------------------------------------------------

def _check_params(config: VqcConfig, params) -> tuple[np.ndarray, bool]:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim not in (3, 4) or params.shape[-3:] != config.param_shape:
        raise ShapeError(f"params shape {params.shape} != {config.param_shape} (optionally blocked)")
    if not np.all(np.isfinite(params)):
        raise ShapeError("params must be finite")
    blocked = params.ndim == 4
    return (params if blocked else params[None]), blocked


def _check_enc(config: VqcConfig, enc: EncodedAngles, blocks: int, blocked: bool):
    ty = np.asarray(enc.theta_y, dtype=np.float64)
    tz = np.asarray(enc.theta_z, dtype=np.float64)
    if ty.shape != tz.shape or ty.ndim == 0 or ty.shape[-1] != config.n_qubits:
        raise ShapeError(f"encoded angles must end in n={config.n_qubits}, got {ty.shape}")
    single = False
    if blocked:
        if ty.ndim != 3 or ty.shape[0] != blocks:
            raise ShapeError(f"blocked params need encodings of shape ({blocks}, B, n), got {ty.shape}")
    else:
        if ty.ndim not in (1, 2):
            raise ShapeError(f"encoded angles must have shape (n,) or (B, n), got {ty.shape}")
        single = ty.ndim == 1
        ty = ty.reshape((1, -1, config.n_qubits))
        tz = tz.reshape((1, -1, config.n_qubits))
    return ty, tz, single


def _unblock(x: np.ndarray, blocked: bool, single: bool) -> np.ndarray:
    if blocked:
        return x
    x = x[0]
    return x[0] if single else x


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------

def vqc_forward(config: VqcConfig, params, enc: EncodedAngles, rng=None) -> np.ndarray:
    """Per-qubit <Z> readout with the batch layout of ``enc``."""
    params, blocked = _check_params(config, params)
    ty, tz, single = _check_enc(config, enc, params.shape[0], blocked)
    n_layers = config.n_layers
    flips = _trajectory_flips(config, ty.shape[1], rng)
    fac = qubit_factors(ty, tz)[:, None]  # (G, 1, B, n, 2)
    early = _rot_matrices(params[:, None, : n_layers - 1]) if n_layers > 1 else None
    prep = _prepare_register(config, fac, early, flips, "forward")
    obs = _z_observables(params[:, None, None, n_layers - 1])  # (G, 1, 1, n, 2, 2)
    z = _readout(config, prep, obs)[:, 0]
    return _unblock(z, blocked, single)


def vqc_grad(config: VqcConfig, params, enc: EncodedAngles, upstream, rng=None):
    """Vector-Jacobian product of :func:`vqc_forward` by parameter shifts.

    Returns ``(grad_params, grad_theta_y, grad_theta_z)``.  Parameter
    gradients are summed over the batch; encoding gradients stay per sample.
    Each scalar angle costs exactly two circuit evaluations per sample.  A
    final-layer angle on qubit q leaves every other qubit's readout
    unchanged, so only <Z_q> enters its shift difference.
    """
    params, blocked = _check_params(config, params)
    ty, tz, single = _check_enc(config, enc, params.shape[0], blocked)
    up = np.asarray(upstream, dtype=np.float64)
    if up.size != ty.size:
        raise ShapeError(f"upstream shape {up.shape} does not match readout shape")
    up = up.reshape(ty.shape)
    n, n_layers = config.n_qubits, config.n_layers
    g, b = ty.shape[0], ty.shape[1]
    flips = _trajectory_flips(config, b, rng)
    last = params[:, n_layers - 1]  # (G, n, 3)
    early = _rot_matrices(params[:, None, : n_layers - 1]) if n_layers > 1 else None
    obs = _z_observables(last[:, None, None])  # (G, 1, 1, n, 2, 2)
    grad_params = np.zeros_like(params)

    # Final layer: 6 shifted observables per qubit over the unshifted state.
    fac = qubit_factors(ty, tz)  # (G, B, n, 2)
    prep = _prepare_register(config, fac[:, None], early, flips, "shift_params")
    stats.add("shift_params", (6 * n - 1) * g * b)
    shifted = np.repeat(last[:, None], 6, axis=1)  # (G, 6, n, 3)
    for k in range(6):
        shifted[:, k, :, k // 2] += SHIFT if k % 2 == 0 else -SHIFT
    z_last = _readout(config, prep, _z_observables(shifted)[:, :, None])  # (G, 6, B, n)
    diff_last = (z_last[:, 0::2] - z_last[:, 1::2]) / 2.0  # (G, 3, B, n)
    grad_params[:, n_layers - 1] = np.einsum("gabq,gbq->gqa", diff_last, up)

    # Earlier layers: full evolution of 2 circuits per angle.
    if n_layers > 1:
        n_early = 3 * n * (n_layers - 1)
        flat = params[:, : n_layers - 1].reshape(g, -1)
        stack = np.repeat(flat[:, None, :], 2 * n_early, axis=1)
        rows = np.arange(n_early)
        stack[:, 2 * rows, rows] += SHIFT
        stack[:, 2 * rows + 1, rows] -= SHIFT
        rots = _rot_matrices(stack.reshape((g, 2 * n_early, n_layers - 1, n, 3)))
        psi = kron_factors(fac)
        psi_s = np.broadcast_to(psi[:, None], (g, 2 * n_early) + psi.shape[1:])
        prep_e = _prepare_stack(config, psi_s, rots, flips, "shift_params")
        z_e = _readout(config, prep_e, obs)  # (G, 2*n_early, B, n)
        diff_e = (z_e[:, 0::2] - z_e[:, 1::2]) / 2.0
        grad_early = np.einsum("gkbq,gbq->gk", diff_e, up)
        grad_params[:, : n_layers - 1] = grad_early.reshape((g, n_layers - 1, n, 3))

    # Encoding angles: each of the 2n angles shifted both ways.
    # Only one qubit's factor differs from the unshifted register per circuit.
    variants = qubit_factors(
        np.stack((ty + SHIFT, ty - SHIFT, ty, ty), axis=1),
        np.stack((tz, tz, tz + SHIFT, tz - SHIFT), axis=1),
    )  # (G, 4, B, n, 2)
    fac_x = np.repeat(fac[:, None], 4 * n, axis=1)  # (G, 4n, B, n, 2)
    for q in range(n):
        fac_x[:, 4 * q : 4 * q + 4, :, q] = variants[:, :, :, q]
    prep_x = _prepare_register(config, fac_x, early, flips, "shift_encoding")
    z_x = _readout(config, prep_x, obs)  # (G, 4n, B, n)
    diff_x = (z_x[:, 0::2] - z_x[:, 1::2]) / 2.0  # (G, 2n, B, n): y0, z0, y1, z1, ...
    contrib = np.einsum("gkbq,gbq->gbk", diff_x, up)
    grad_ty = contrib[..., 0::2]
    grad_tz = contrib[..., 1::2]

    if blocked:
        return grad_params, grad_ty, grad_tz
    gp = grad_params[0]
    if single:
        return gp, grad_ty[0, 0], grad_tz[0, 0]
    return gp, grad_ty[0], grad_tz[0]


def vqc_apply(config: VqcConfig, params, v, rng=None) -> np.ndarray:
    """Encode raw features ``v`` and run the circuit."""
    return vqc_forward(config, params, encode_angles(v), rng=rng)


def vqc_input_grad(config: VqcConfig, params, v, upstream, rng=None):
    """Gradients w.r.t. trainable angles and raw encoder inputs ``v``."""
    v = np.asarray(v, dtype=np.float64)
    g_par, g_ty, g_tz = vqc_grad(config, params, encode_angles(v), upstream, rng=rng)
    dy, dz = encoding_derivatives(v)
    return g_par, g_ty * dy + g_tz * dz
