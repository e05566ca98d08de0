"""Command line entry point (``qlstm-soh``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io, perf
from .errors import QlstmError
from .experiments import ExperimentConfig, apply_exclusions, make_plans, prepare_fold, run_protocol, run_single
from .features import extract_features, select_features
from .partition import SplitPlan, apply_normalizer, make_windows, partition_table
from .synth import SynthSpec, synth_generate
from .training import evaluate

log = logging.getLogger("qlstm_soh")

PROTOCOL_COMMANDS = {
    "compare": "compare",
    "ablate": "ablate",
    "sweep-qubits": "qubit_sweep",
    "sweep-noise": "noise_sweep",
}


def _config(args) -> tuple[dict, ExperimentConfig]:
    raw = io.load_config(args.config) if args.config else {}
    if args.seed is not None:
        raw["seeds"] = str(args.seed)
    return raw, ExperimentConfig.from_mapping({k: v for k, v in raw.items() if not k.startswith("synth.")})


def _features(data: Path, cfg: ExperimentConfig):
    feat = data / "features.csv"
    if feat.exists():
        return io.read_features(feat)
    rec = data / "records.csv"
    if rec.exists():
        log.info("no features.csv in %s; extracting from records.csv", data)
        return extract_features(io.read_records(rec), cfg.q_nom)
    raise QlstmError(f"{data} holds neither features.csv nor records.csv")


def _plans(data: Path, table, cfg) -> list[SplitPlan]:
    manifests = sorted(data.glob("split_*.json"))
    if manifests:
        return [SplitPlan.from_dict(io.read_json(p)) for p in manifests]
    return make_plans(table, cfg)


def cmd_synth(args, raw, cfg) -> int:
    kw = {}
    for key, value in raw.items():
        if key.startswith("synth."):
            name = key[len("synth."):]
            if name == "cycles":
                lo, hi = (int(s) for s in value.split(","))
                kw[name] = (lo, hi)
            elif name == "life_normalize":
                kw[name] = value.strip().lower() in ("1", "true", "yes", "on")
            elif name in ("n_cells", "seed"):
                kw[name] = int(value)
            else:
                kw[name] = float(value)
    if args.seed is not None:
        kw["seed"] = args.seed
    spec = SynthSpec(**kw)
    df = synth_generate(spec)
    io.write_records(df, args.out / "records.csv")
    log.info("wrote %d records for %d cells", len(df), spec.n_cells)
    return 0


def cmd_extract(args, raw, cfg) -> int:
    table = extract_features(io.read_records(args.data / "records.csv"), cfg.q_nom)
    io.write_features(table, args.out / "features.csv")
    io.write_table(args.out / "skipped.csv", ["cell_id", "cycle_index", "reason"], table.skipped)
    log.info("%d cycles kept, %d skipped", len(table), len(table.skipped))
    return 0


def cmd_split(args, raw, cfg) -> int:
    table = apply_exclusions(_features(args.data, cfg), cfg)
    for i, plan in enumerate(make_plans(table, cfg)):
        io.write_json(args.out / f"split_{i}.json", plan.to_dict())
    return 0


def cmd_select(args, raw, cfg) -> int:
    table = apply_exclusions(_features(args.data, cfg), cfg)
    for i, plan in enumerate(_plans(args.data, table, cfg)):
        train_t, _ = partition_table(table, plan)
        rep = select_features(train_t, cfg.k_sel, cfg.mi_bins)
        io.write_json(args.out / f"selection_{i}.json", io.selection_to_dict(rep))
    return 0


def cmd_train(args, raw, cfg) -> int:
    table = apply_exclusions(_features(args.data, cfg), cfg)
    failed = 0
    for fi, plan in enumerate(_plans(args.data, table, cfg)):
        fold = prepare_fold(table, plan, cfg)
        spec = cfg.model_spec(cfg.model, len(fold.selection.retained))
        for seed in cfg.train.seeds:
            try:
                result, m = run_single(fold, spec, cfg.train, seed)
            except QlstmError as exc:
                log.error("fold %d seed %d failed: %s", fi, seed, exc)
                failed += 1
                continue
            io.save_checkpoint(args.out / f"ckpt_{cfg.model}_f{fi}_s{seed}.json", result.model, fold.normalizer,
                               fold.selection.retained,
                               {"seed": seed, "history": result.history, "split": plan.to_dict()})
            io.append_jsonl(args.out / "metrics.jsonl", [{
                "protocol": "train", "model": cfg.model, "dataset": cfg.dataset, "n_qubits": spec.n_qubits,
                "p": cfg.noise_p, "seed": seed, "fold": fi, **m.as_dict()}])
    return 1 if failed else 0


def cmd_eval(args, raw, cfg) -> int:
    table = apply_exclusions(_features(args.data, cfg), cfg)
    ckpts = sorted(args.data.glob("ckpt_*.json"))
    if not ckpts:
        raise QlstmError(f"no ckpt_*.json files in {args.data}")
    rows = []
    for path in ckpts:
        model, norm, feats, meta = io.load_checkpoint(path)
        if norm is None or feats is None or "split" not in meta:
            raise QlstmError(f"{path.name} lacks normalizer, feature list or split")
        plan = SplitPlan.from_dict(meta["split"])
        _, test_t = partition_table(table, plan)
        test = make_windows(apply_normalizer(norm, test_t), cfg.window, feats)
        m = evaluate(model, test, norm)
        rows.append({"checkpoint": path.name, "model": model.spec.kind.value, "seed": meta.get("seed"), **m.as_dict()})
    io.append_jsonl(args.out / "eval.jsonl", rows)
    return 0


def cmd_protocol(args, raw, cfg) -> int:
    table = _features(args.data, cfg)
    report = run_protocol(PROTOCOL_COMMANDS[args.command], table, cfg, args.out)
    n_fail = len(report.failures)
    if n_fail:
        log.error("%d of %d runs failed", n_fail, len(report.records))
    return 0 if report.complete else 1


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "split": cmd_split,
    "select": cmd_select,
    "train": cmd_train,
    "eval": cmd_eval,
    **{name: cmd_protocol for name in PROTOCOL_COMMANDS},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qlstm-soh", description="Hybrid quantum LSTM for battery SOH.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key=value config file")
        p.add_argument("--data", type=Path, default=Path("."), help="input directory")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, help="single seed overriding the configured seeds")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    perf.tune_allocator()
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        raw, cfg = _config(args)
        return COMMANDS[args.command](args, raw, cfg)
    except (QlstmError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
