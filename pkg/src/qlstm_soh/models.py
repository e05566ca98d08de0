"""Recurrent regressors: LSTM, GRU, QLSTM and the two ablation variants.

All cells consume ``v_t = concat(h_{t-1}, x_t)``.  Gate parameters of one
cell are stacked on a leading axis in the order f, i, c, o (z, r for the GRU)
so a single blocked affine computes every gate.  Each block is still an
independent parameter set; nothing is shared between gates.

Batch layout: windows ``(B, k, d)``, hidden state ``(B, H)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError, ValidationError
from .statevector import NoiseMode, NoiseSpec
from .vqc import VqcConfig

log = logging.getLogger(__name__)

GATES = ("f", "i", "c", "o")


class ModelKind(str, Enum):
    LSTM = "lstm"
    GRU = "gru"
    QLSTM = "qlstm"
    QE_LSTM = "qe_lstm"
    NG_LSTM = "ng_lstm"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    input_dim: int
    hidden_dim: int = 8
    n_qubits: int = 4
    n_layers: int = 1
    dropout: float = 0.0
    noise: NoiseSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("input_dim and hidden_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.kind is ModelKind.QLSTM and self.n_qubits > self.input_dim + self.hidden_dim:
            raise ConfigError("QLSTM projections compress d+H onto the qubits; n_qubits must be <= d+H")
        if self.kind is ModelKind.QE_LSTM and self.n_qubits > self.input_dim:
            # the embedding block projects x_t alone onto the register
            log.debug("QE-LSTM pre-projection expands %d features to %d qubits", self.input_dim, self.n_qubits)
        if self.is_quantum:
            self.vqc  # validates qubit/layer/noise combination

    @property
    def is_quantum(self) -> bool:
        return self.kind in (ModelKind.QLSTM, ModelKind.QE_LSTM)

    @property
    def vqc(self) -> VqcConfig:
        return VqcConfig(self.n_qubits, self.n_layers, noise=self.noise)


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, ad.Tensor] = field(default_factory=dict)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ShapeError(f"checkpoint blocks {sorted(state)} != model blocks {sorted(self.params)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"block {k}: shape {arr.shape} != {p.shape}")
            p.value = arr.copy()

    def __getitem__(self, key: str) -> ad.Tensor:
        return self.params[key]


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform Glorot init; leading axes beyond (out, in) are independent blocks."""
    fan_out, fan_in = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    d, h, n = spec.input_dim, spec.hidden_dim, spec.n_qubits
    v = d + h
    shapes: dict[str, tuple] = {}
    kind = spec.kind
    if kind is ModelKind.LSTM:
        shapes = {"gates.w": (4, h, v), "gates.b": (4, h)}
    elif kind is ModelKind.GRU:
        shapes = {"zr.w": (2, h, v), "zr.b": (2, h), "cand.w": (h, v), "cand.b": (h,)}
    elif kind is ModelKind.NG_LSTM:
        shapes = {
            "ng.w1": (4, h, v), "ng.b1": (4, h),
            "ng.ln_gain": (4, h), "ng.ln_bias": (4, h),
            "ng.w2": (4, h, h), "ng.b2": (4, h),
        }
    elif kind is ModelKind.QLSTM:
        shapes = {
            "q.w_pre": (4, n, v), "q.b_pre": (4, n),
            "q.theta": (4,) + spec.vqc.param_shape,
            "q.w_post": (4, h, n), "q.b_post": (4, h),
        }
    elif kind is ModelKind.QE_LSTM:
        shapes = {
            "qe.w_pre": (n, d), "qe.b_pre": (n,),
            "qe.theta": spec.vqc.param_shape,
            "qe.w_post": (d, n), "qe.b_post": (d,),
            "gates.w": (4, h, v), "gates.b": (4, h),
        }
    shapes["head.w"] = (1, h)
    shapes["head.b"] = (1,)

    params = {}
    for name, shape in shapes.items():
        leaf = name.split(".")[-1]
        if leaf == "theta":
            value = rng.uniform(-0.1, 0.1, size=shape)
        elif leaf == "ln_gain":
            value = np.ones(shape)
        elif leaf.startswith("w"):
            value = glorot(rng, shape)
        else:
            value = np.zeros(shape)
        params[name] = ad.parameter(value, name=name)
    return Model(spec, params)


def quantum_block_shape(model: Model) -> tuple[int, ...]:
    """Shape of one gate's circuit parameters (per gate for QLSTM, the embedding for QE-LSTM)."""
    kind = model.spec.kind
    if kind is ModelKind.QLSTM:
        return model["q.theta"].shape[1:]
    if kind is ModelKind.QE_LSTM:
        return model["qe.theta"].shape
    raise ConfigError(f"{kind.value} has no quantum block")


# --------------------------------------------------------------------------
# Cells
# --------------------------------------------------------------------------

class _Ctx:
    """Per-forward context: tape plus the seed source for noisy circuits."""

    def __init__(self, tape: ad.Tape, model: Model, noise_rng: np.random.Generator | None):
        self.tape = tape
        self.model = model
        noise = model.spec.noise
        self.stochastic = noise is not None and noise.mode is NoiseMode.TRAJECTORY and noise.p > 0
        if self.stochastic and noise_rng is None:
            noise_rng = np.random.default_rng(noise.seed)
        self.noise_rng = noise_rng

    def circuit_seed(self) -> int | None:
        if not self.stochastic:
            return None
        return int(self.noise_rng.integers(2**63))


def _lstm_update(tape, f, i, cand, o, c):
    c_new = ad.add(tape, ad.mul(tape, f, c), ad.mul(tape, i, cand))
    h_new = ad.mul(tape, o, ad.tanh(tape, c_new))
    return h_new, c_new


def _lstm_from_preacts(tape, pre: ad.Tensor, c):
    """``pre`` holds gate pre-activations ``(4, B, H)`` in f, i, c, o order."""
    f = ad.sigmoid(tape, ad.take(tape, pre, 0))
    i = ad.sigmoid(tape, ad.take(tape, pre, 1))
    cand = ad.tanh(tape, ad.take(tape, pre, 2))
    o = ad.sigmoid(tape, ad.take(tape, pre, 3))
    return _lstm_update(tape, f, i, cand, o, c)


def lstm_step(ctx: _Ctx, x, h, c):
    t, m = ctx.tape, ctx.model
    v = ad.concat(t, [h, x])
    return _lstm_from_preacts(t, ad.affine(t, v, m["gates.w"], m["gates.b"]), c)


def ng_step(ctx: _Ctx, x, h, c):
    t, m = ctx.tape, ctx.model
    v = ad.concat(t, [h, x])
    a = ad.affine(t, v, m["ng.w1"], m["ng.b1"])
    a = ad.gelu(t, ad.layernorm(t, a, m["ng.ln_gain"], m["ng.ln_bias"]))
    return _lstm_from_preacts(t, ad.affine(t, a, m["ng.w2"], m["ng.b2"]), c)


def qlstm_step(ctx: _Ctx, x, h, c):
    t, m = ctx.tape, ctx.model
    v = ad.concat(t, [h, x])
    angles_in = ad.affine(t, v, m["q.w_pre"], m["q.b_pre"])  # (4, B, n)
    z = ad.quantum_node(t, m.spec.vqc, m["q.theta"], angles_in, seed=ctx.circuit_seed())
    return _lstm_from_preacts(t, ad.affine(t, z, m["q.w_post"], m["q.b_post"]), c)


def qe_step(ctx: _Ctx, x, h, c):
    t, m = ctx.tape, ctx.model
    z = ad.quantum_node(t, m.spec.vqc, m["qe.theta"], ad.affine(t, x, m["qe.w_pre"], m["qe.b_pre"]),
                        seed=ctx.circuit_seed())
    x_emb = ad.affine(t, z, m["qe.w_post"], m["qe.b_post"])
    return lstm_step(ctx, x_emb, h, c)


def gru_step(ctx: _Ctx, x, h):
    t, m = ctx.tape, ctx.model
    v = ad.concat(t, [h, x])
    zr = ad.sigmoid(t, ad.affine(t, v, m["zr.w"], m["zr.b"]))
    z = ad.take(t, zr, 0)
    r = ad.take(t, zr, 1)
    v_r = ad.concat(t, [ad.mul(t, r, h), x])
    cand = ad.tanh(t, ad.affine(t, v_r, m["cand.w"], m["cand.b"]))
    return ad.add(t, ad.mul(t, ad.one_minus(t, z), h), ad.mul(t, z, cand))


_LSTM_LIKE = {
    ModelKind.LSTM: lstm_step,
    ModelKind.NG_LSTM: ng_step,
    ModelKind.QLSTM: qlstm_step,
    ModelKind.QE_LSTM: qe_step,
}


def sequence_forward(
    model: Model,
    windows,
    tape: ad.Tape | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    noise_rng: np.random.Generator | None = None,
    return_state: bool = False,
):
    """Run the cell over each window and apply the head; returns ``(B,)`` predictions.

    ``rng`` drives the dropout mask (training only).  Pass a tape to record
    for backward; without one a throwaway tape is used.
    """
    spec = model.spec
    xs = np.asarray(windows, dtype=np.float64)
    if xs.ndim == 2:
        xs = xs[None]
    if xs.ndim != 3 or xs.shape[2] != spec.input_dim:
        raise ShapeError(f"windows must be (B, k, {spec.input_dim}), got {np.shape(windows)}")
    batch, k, _ = xs.shape
    if k < 1:
        raise ValidationError("window length must be >= 1")
    tape = tape if tape is not None else ad.Tape()
    ctx = _Ctx(tape, model, noise_rng)
    h = ad.constant(np.zeros((batch, spec.hidden_dim)))
    c = ad.constant(np.zeros((batch, spec.hidden_dim)))
    for step in range(k):
        x = ad.constant(xs[:, step, :])
        if spec.kind is ModelKind.GRU:
            h = gru_step(ctx, x, h)
        else:
            h, c = _LSTM_LIKE[spec.kind](ctx, x, h, c)
    feat = h
    if training and spec.dropout > 0.0:
        if rng is None:
            raise ValidationError("training-mode dropout needs an rng")
        keep = 1.0 - spec.dropout
        mask = (rng.random(h.shape) < keep) / keep
        feat = ad.scale(tape, h, mask)
    y = ad.affine(tape, feat, model["head.w"], model["head.b"])
    y = ad.reshape(tape, y, (batch,))
    if return_state:
        return y, h, c
    return y


def predict(model: Model, windows, batch_size: int = 256, noise_rng=None) -> np.ndarray:
    """Eval-mode predictions as a plain array."""
    xs = np.asarray(windows, dtype=np.float64)
    out = [sequence_forward(model, xs[s : s + batch_size], noise_rng=noise_rng).value for s in range(0, len(xs), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)
