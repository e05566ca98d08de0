"""File formats: record/feature CSVs, JSON reports, checkpoints and key=value configs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, ValidationError
from .features import STEPS, FeatureTable, SelectionReport
from .models import Model, ModelSpec, init_model
from .partition import Normalizer
from .statevector import NoiseSpec

RECORD_COLUMNS = ("cell_id", "cycle_index", "step", "t_s", "current_a", "voltage_v")
CHECKPOINT_FORMAT = "qlstm-soh-checkpoint"
CHECKPOINT_VERSION = 1


def read_records(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"cell_id": str, "step": str}, float_precision="round_trip")
    missing = [c for c in RECORD_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    bad = set(df["step"].unique()) - set(STEPS)
    if bad:
        raise ValidationError(f"{path}: unknown step tags {sorted(bad)}")
    return df[list(RECORD_COLUMNS)]


def write_records(df: pd.DataFrame, path) -> None:
    df[list(RECORD_COLUMNS)].to_csv(path, index=False, float_format="%.10g")


def write_features(table: FeatureTable, path) -> None:
    table.to_frame().to_csv(path, index=False, float_format="%.17g")


def read_features(path) -> FeatureTable:
    return FeatureTable.from_frame(pd.read_csv(path, dtype={"cell_id": str}, float_precision="round_trip"))


def write_json(path, obj) -> None:
    # json writes floats with repr, so values round-trip exactly
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def selection_to_dict(rep: SelectionReport) -> dict:
    return {
        "mi_scores": rep.mi_scores.tolist(),
        "spearman": rep.spearman.tolist(),
        "retained": list(rep.retained),
        "bins": rep.bins,
        "n_rows": rep.n_rows,
        "train_cells": list(rep.train_cells),
    }


def selection_from_dict(d: dict) -> SelectionReport:
    return SelectionReport(np.asarray(d["mi_scores"], float), np.asarray(d["spearman"], float),
                           [int(i) for i in d["retained"]], int(d["bins"]), int(d["n_rows"]), list(d["train_cells"]))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def spec_to_dict(spec: ModelSpec) -> dict:
    noise = None
    if spec.noise is not None:
        n = spec.noise
        noise = {"p": n.p, "mode": n.mode.value, "placement": n.placement.value,
                 "n_trajectories": n.n_trajectories, "seed": n.seed}
    return {"kind": spec.kind.value, "input_dim": spec.input_dim, "hidden_dim": spec.hidden_dim,
            "n_qubits": spec.n_qubits, "n_layers": spec.n_layers, "dropout": spec.dropout, "noise": noise}


def spec_from_dict(d: dict) -> ModelSpec:
    noise = NoiseSpec(**d["noise"]) if d.get("noise") else None
    return ModelSpec(d["kind"], int(d["input_dim"]), int(d["hidden_dim"]), int(d["n_qubits"]),
                     int(d["n_layers"]), float(d["dropout"]), noise)


def save_checkpoint(path, model: Model, normalizer: Normalizer | None = None, features=None, meta=None) -> None:
    blocks = {name: {"shape": list(p.shape), "values": p.value.ravel().tolist()} for name, p in model.params.items()}
    write_json(path, {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec_to_dict(model.spec),
        "blocks": blocks,
        "normalizer": None if normalizer is None else normalizer.to_dict(),
        "features": None if features is None else [int(f) for f in features],
        "meta": meta or {},
    })


def load_checkpoint(path):
    """Returns ``(model, normalizer or None, features or None, meta)``."""
    d = read_json(path)
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a checkpoint file")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {d.get('version')}")
    spec = spec_from_dict(d["spec"])
    model = init_model(spec, np.random.default_rng(0))
    state = {k: np.asarray(b["values"], dtype=float).reshape(b["shape"]) for k, b in d["blocks"].items()}
    model.load_state_dict(state)
    norm = Normalizer.from_dict(d["normalizer"]) if d.get("normalizer") else None
    return model, norm, d.get("features"), d.get("meta", {})


# --------------------------------------------------------------------------
# Metrics output
# --------------------------------------------------------------------------

def append_jsonl(path, records) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])


# --------------------------------------------------------------------------
# key=value configs
# --------------------------------------------------------------------------

def parse_config(text: str) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment; later keys override earlier ones."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text())
