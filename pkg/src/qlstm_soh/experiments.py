"""Experiment protocols: model comparison, ablation, qubit sweep and noise sweep.

Every protocol runs the same pipeline per split: feature selection and
normalisation fitted on the training cells, sliding windows, then one
training run per (grid cell, seed).  A failing run is recorded and the grid
carries on.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, QlstmError
from .features import FeatureTable, SelectionReport, select_features
from .models import ModelKind, ModelSpec
from .partition import (
    Normalizer,
    SequenceDataset,
    SplitMode,
    SplitPlan,
    apply_normalizer,
    assert_disjoint,
    fit_normalizer,
    make_windows,
    partition_table,
    split_cells,
)
from .statevector import NoiseMode, NoisePlacement, NoiseSpec
from .training import Aggregate, Metrics, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

PROTOCOLS = ("compare", "ablate", "qubit_sweep", "noise_sweep")
COMPARE_MODELS = (ModelKind.QLSTM, ModelKind.LSTM, ModelKind.GRU)
ABLATE_MODELS = (ModelKind.LSTM, ModelKind.NG_LSTM, ModelKind.QE_LSTM, ModelKind.QLSTM)
QUBIT_GRID = (4, 6, 8, 10, 12)
NOISE_GRID = (0.0, 0.01, 0.02, 0.05)

# Presets for the public datasets; "synth" is the desk-scale default.
PRESETS = {
    "synth": {},
    "mit": {"hidden_dim": "128", "lr": "0.001", "batch_size": "64", "dropout": "0", "split_mode": "fixed"},
    "nca": {"hidden_dim": "128", "lr": "0.001", "batch_size": "64", "dropout": "0", "split_mode": "fixed"},
    "calce": {"hidden_dim": "128", "lr": "0.01", "batch_size": "64", "dropout": "0.2", "split_mode": "loocv"},
}


def _tuple(text: str, conv):
    return tuple(conv(s.strip()) for s in text.split(",") if s.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synth"
    q_nom: float = 1.1
    window: int = 10
    k_sel: int = 10
    mi_bins: int = 16
    split_mode: str = "fixed"
    train_fraction: float = 0.8
    split_seed: int = 0
    exclude_cells: tuple[str, ...] = ()
    model: str = "qlstm"
    hidden_dim: int = 8
    n_qubits: int = 4
    n_layers: int = 1
    dropout: float = 0.0
    noise_p: float = 0.0
    noise_mode: str = "exact"
    noise_placement: str = "before_measurement"
    n_trajectories: int = 1
    qubit_grid: tuple[int, ...] = QUBIT_GRID
    noise_grid: tuple[float, ...] = NOISE_GRID
    train: TrainConfig = field(default_factory=TrainConfig)

    _TRAIN_KEYS = {"epochs": int, "lr": float, "batch_size": int, "grad_clip_norm": float, "seeds": None,
                   "lr_decay_factor": float, "lr_decay_every": int}

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "ExperimentConfig":
        raw = dict(raw)
        dataset = raw.get("dataset", "synth").strip().lower()
        if dataset in PRESETS:
            raw = {**PRESETS[dataset], **raw}
        kw, tkw = {}, {}
        decay = list(TrainConfig().lr_decay)
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key in cls._TRAIN_KEYS:
                if key == "seeds":
                    tkw["seeds"] = _tuple(value, int)
                elif key == "lr_decay_factor":
                    decay[0] = float(value)
                elif key == "lr_decay_every":
                    decay[1] = int(value)
                else:
                    tkw[key] = cls._TRAIN_KEYS[key](value)
                continue
            if key not in fields or key == "train":
                raise ConfigError(f"unknown config key {key!r}")
            default = fields[key].default
            if key == "exclude_cells":
                kw[key] = _tuple(value, str)
            elif key == "qubit_grid":
                kw[key] = _tuple(value, int)
            elif key == "noise_grid":
                kw[key] = _tuple(value, float)
            elif isinstance(default, bool):
                kw[key] = _bool(value)
            elif isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            else:
                kw[key] = value.strip()
        tkw["lr_decay"] = (decay[0], decay[1])
        try:
            return cls(train=TrainConfig(**tkw), **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        SplitMode(self.split_mode)
        ModelKind(self.model)
        NoiseMode(self.noise_mode)
        NoisePlacement(self.noise_placement)

    def noise(self, p: float | None = None) -> NoiseSpec | None:
        p = self.noise_p if p is None else p
        if p == 0.0 and self.noise_mode == "exact":
            return None
        return NoiseSpec(p, self.noise_mode, self.noise_placement, self.n_trajectories)

    def model_spec(self, kind, input_dim: int, n_qubits: int | None = None, p: float | None = None) -> ModelSpec:
        kind = ModelKind(kind)
        quantum = kind in (ModelKind.QLSTM, ModelKind.QE_LSTM)
        return ModelSpec(kind, input_dim, self.hidden_dim, n_qubits or self.n_qubits, self.n_layers, self.dropout,
                         self.noise(p) if quantum else None)


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------

@dataclass
class Fold:
    plan: SplitPlan
    selection: SelectionReport
    normalizer: Normalizer
    train: SequenceDataset
    test: SequenceDataset


def apply_exclusions(table: FeatureTable, cfg: ExperimentConfig) -> FeatureTable:
    if not cfg.exclude_cells:
        return table
    keep = ~np.isin(table.cell_id, cfg.exclude_cells)
    log.info("excluding cells %s", ", ".join(cfg.exclude_cells))
    return table.subset(keep)


def make_plans(table: FeatureTable, cfg: ExperimentConfig, mode: str | None = None) -> list[SplitPlan]:
    return split_cells(table.cells, mode or cfg.split_mode, cfg.split_seed, cfg.train_fraction)


def prepare_fold(table: FeatureTable, plan: SplitPlan, cfg: ExperimentConfig) -> Fold:
    """Selection and scaling see only the plan's training cells."""
    train_t, test_t = partition_table(table, plan)
    selection = select_features(train_t, cfg.k_sel, cfg.mi_bins)
    norm = fit_normalizer(train_t)
    train_ds = make_windows(apply_normalizer(norm, train_t), cfg.window, selection.retained)
    test_ds = make_windows(apply_normalizer(norm, test_t), cfg.window, selection.retained)
    assert_disjoint(train_ds, test_ds)
    return Fold(plan, selection, norm, train_ds, test_ds)


@dataclass
class RunRecord:
    protocol: str
    model: str
    dataset: str
    n_qubits: int | None
    p: float | None
    seed: int
    fold: int
    test_cells: list
    mae: float | None = None
    rmse: float | None = None
    r2: float | None = None
    status: str = "ok"
    error: str | None = None
    seconds: float = 0.0
    history: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("history")
        return d


@dataclass
class ProtocolReport:
    protocol: str
    records: list[RunRecord]
    folds: list[Fold]

    @property
    def failures(self) -> list[RunRecord]:
        return [r for r in self.records if r.status != "ok"]

    @property
    def complete(self) -> bool:
        return not self.failures

    def grid_rows(self, by_fold: bool = False):
        """Seed aggregates per grid cell: (model, n_qubits, p[, fold]) -> Aggregate."""
        groups: dict = {}
        for r in self.records:
            if r.status != "ok":
                continue
            key = (r.model, r.n_qubits, r.p) + ((r.fold,) if by_fold else ())
            groups.setdefault(key, []).append(Metrics(r.mae, r.rmse, r.r2, 0))
        return {k: Aggregate.of(v) for k, v in groups.items()}


def run_single(fold: Fold, spec: ModelSpec, tcfg: TrainConfig, seed: int):
    result = train(spec, fold.train, tcfg, seed)
    metrics = evaluate(result.model, fold.test, fold.normalizer,
                       noise_seed=None if spec.noise is None else seed)
    return result, metrics


def _grid(protocol: str, cfg: ExperimentConfig):
    if protocol == "compare":
        return [(k, cfg.n_qubits, cfg.noise_p) for k in COMPARE_MODELS]
    if protocol == "ablate":
        return [(k, cfg.n_qubits, cfg.noise_p) for k in ABLATE_MODELS]
    if protocol == "qubit_sweep":
        return [(ModelKind.QLSTM, n, cfg.noise_p) for n in cfg.qubit_grid]
    if protocol == "noise_sweep":
        return [(ModelKind.QLSTM, cfg.n_qubits, p) for p in cfg.noise_grid]
    if protocol == "train":
        return [(ModelKind(cfg.model), cfg.n_qubits, cfg.noise_p)]
    raise ConfigError(f"unknown protocol {protocol!r}")


def run_protocol(protocol: str, table: FeatureTable, cfg: ExperimentConfig, out_dir=None,
                 keep_models: bool = False) -> ProtocolReport:
    grid = _grid(protocol, cfg)
    mode = "loocv" if protocol == "ablate" else cfg.split_mode
    table = apply_exclusions(table, cfg)
    plans = make_plans(table, cfg, mode)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")

    records, folds = [], []
    for fi, plan in enumerate(plans):
        fold = prepare_fold(table, plan, cfg)
        folds.append(fold)
        if out is not None:
            io.write_json(out / f"split_{fi}.json", plan.to_dict())
            io.write_json(out / f"selection_{fi}.json", io.selection_to_dict(fold.selection))
        d = len(fold.selection.retained)
        for kind, n_q, p in grid:
            quantum = kind in (ModelKind.QLSTM, ModelKind.QE_LSTM)
            for seed in cfg.train.seeds:
                rec = RunRecord(protocol, kind.value, cfg.dataset, n_q if quantum else None, p if quantum else None,
                                seed, fi, list(plan.test_cells))
                t0 = time.perf_counter()
                try:
                    spec = cfg.model_spec(kind, d, n_q, p)
                    result, m = run_single(fold, spec, cfg.train, seed)
                    rec.mae, rec.rmse, rec.r2 = m.mae, m.rmse, m.r2
                    rec.history = result.history
                    if m.r2 is None:
                        rec.error = m.r2_missing_reason
                    if out is not None and keep_models:
                        tag = f"{kind.value}_q{n_q}_p{p}_f{fi}_s{seed}"
                        io.save_checkpoint(out / f"ckpt_{tag}.json", result.model, fold.normalizer,
                                           fold.selection.retained, {"seed": seed, "history": result.history})
                except (QlstmError, ValueError, FloatingPointError, MemoryError) as exc:
                    log.error("%s %s n=%s p=%s seed=%s fold=%s failed: %s", protocol, kind.value, n_q, p, seed, fi, exc)
                    rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
                rec.seconds = time.perf_counter() - t0
                records.append(rec)
                if out is not None:
                    io.append_jsonl(metrics_path, [rec.to_json()])
                log.info("%s %s n=%s p=%s seed=%d fold=%d: %s", protocol, kind.value, n_q, p, seed, fi,
                         f"rmse={rec.rmse:.5f} r2={rec.r2}" if rec.status == "ok" else rec.status)

    report = ProtocolReport(protocol, records, folds)
    if out is not None:
        write_plot_data(report, out / f"{protocol}_plot.csv")
    return report


def write_plot_data(report: ProtocolReport, path) -> None:
    """Seed-mean +- std per grid cell, one row per x-axis value."""
    by_fold = report.protocol == "ablate"
    rows = []
    for key, agg in report.grid_rows(by_fold).items():
        model, n_q, p = key[:3]
        row = [model, n_q, p] + ([key[3]] if by_fold else [])
        for m in ("mae", "rmse", "r2"):
            row += [agg.mean[m], agg.std[m]]
        row.append(len(agg.per_seed))
        rows.append(row)
    header = ["model", "n_qubits", "p"] + (["fold"] if by_fold else [])
    header += ["mae_mean", "mae_std", "rmse_mean", "rmse_std", "r2_mean", "r2_std", "n_seeds"]
    io.write_table(path, header, rows)
