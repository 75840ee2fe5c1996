"""Command-line front end: pretrain, quantize, purity, adapt, diagnose, export-data.

All stages share one run directory. Each stage writes ``<stage>.manifest.json``
before doing any work, then its artifacts:

    pretrain     model.fwd          float model + source statistics for every layer
    quantize     model_int8.fwd     int8 copy with statistics of the quantized model
    purity       purity.json        per-layer purity and the selected layer set
    adapt        metrics.jsonl, summary.json
    diagnose     grad_quality.jsonl, selection.jsonl, convergence.json, summary.csv
    export-data  *.bin              flat binary dumps of dataset splits

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from fwdadapt import config as C
from fwdadapt.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fwdadapt.data import Corruption, DataConfigError, SyntheticDataset, export_split, make_drls_sets
from fwdadapt.drls import SelectionError, select_layers
from fwdadapt.models import ParamSelection, build_model, quantize
from fwdadapt.sfaa import LossWeights, aligned_layers, compute_source_stats
from fwdadapt.stream import (AdaptConfig, JsonlSink, adapt_stream, evaluate_stream, final_accuracy, make_schedule,
                             materialize)
from fwdadapt.tensor import NonFiniteError

log = logging.getLogger("fwdadapt")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

MODEL_FILE, QUANT_FILE, PURITY_FILE = "model.fwd", "model_int8.fwd", "purity.json"


class MissingArtifact(RuntimeError):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _producer(stage: str, args) -> str:
    parts = ["fwdadapt", stage]
    if args.config:
        parts += ["--config", args.config]
    parts += ["--out", str(args.out_dir)]
    return " ".join(parts)


def _require(path: Path, stage: str, args) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; produce it with: {_producer(stage, args)}")
    return path


def _model_path(cfg, args) -> tuple[Path, str]:
    if cfg.quantized:
        return args.out_dir / QUANT_FILE, "quantize"
    return args.out_dir / MODEL_FILE, "pretrain"


def _manifest(stage: str, cfg, args, **extra) -> None:
    doc = {"stage": stage, "config": cfg.to_dict(), "config_hash": cfg.digest(),
           "seeds": {"data": cfg.data_seed, "run": cfg.seed}, **extra}
    _write_json(args.out_dir / f"{stage}.manifest.json", doc)


def _holdout_accuracy(model, ds, corruption=None, count=1024) -> float:
    x, y = ds.full_split("source_holdout", count, corruption)
    return float((model.forward(x)[0].argmax(axis=1) == y).mean())


def cmd_pretrain(cfg, args) -> dict:
    from fwdadapt.autodiff import sgd_train

    _manifest("pretrain", cfg, args)
    ds = SyntheticDataset(cfg.data_seed)
    x, y = ds.full_split("source_train")
    model, history = sgd_train(build_model(cfg.arch, cfg.seed), x, y, cfg.epochs, cfg.train_lr, cfg.seed,
                               cfg.train_batch)
    src, _ = ds.sample_batch("source_holdout", cfg.source_samples, seed=cfg.seed)
    stats = compute_source_stats(model, src, range(model.n_layers))
    acc = _holdout_accuracy(model, ds)
    save_checkpoint(args.out_dir / MODEL_FILE, model, stats, {"history": history, "holdout_accuracy": acc})
    return {"holdout_accuracy": acc, "epochs": cfg.epochs}


def cmd_quantize(cfg, args) -> dict:
    _manifest("quantize", cfg, args)
    ckpt = load_checkpoint(_require(args.out_dir / MODEL_FILE, "pretrain", args))
    q = quantize(ckpt.model)
    ds = SyntheticDataset(cfg.data_seed)
    src, _ = ds.sample_batch("source_holdout", cfg.source_samples, seed=cfg.seed)
    stats = compute_source_stats(q, src, range(q.n_layers))
    out = {"float_accuracy": _holdout_accuracy(ckpt.model, ds), "int8_accuracy": _holdout_accuracy(q, ds)}
    save_checkpoint(args.out_dir / QUANT_FILE, q, stats, out)
    return out


def cmd_purity(cfg, args) -> dict:
    _manifest("purity", cfg, args)
    path, stage = _model_path(cfg, args)
    model = load_checkpoint(_require(path, stage, args)).model
    ds = SyntheticDataset(cfg.data_seed)
    d_id, d_ood = make_drls_sets(ds, cfg.n_per_domain, Corruption(cfg.drls_corruption, cfg.drls_severity),
                                 cfg.seed)
    try:
        _, report = select_layers(model, d_id, d_ood, cfg.tau, cfg.freeze_shallow, cfg.seed)
    except SelectionError as exc:
        if exc.report is not None:
            (args.out_dir / PURITY_FILE).write_text(exc.report.to_json() + "\n")
        raise
    (args.out_dir / PURITY_FILE).write_text(report.to_json() + "\n")
    return {"purity": report.purity, "selected": report.selected}


def _resolve_layers(cfg, args, n_layers) -> list[int]:
    if cfg.layers is not None:
        return cfg.layers
    report = json.loads(_require(args.out_dir / PURITY_FILE, "purity", args).read_text())
    if not report["selected"]:
        raise SelectionError("purity report selects no layers; rerun purity with a lower tau or pass --layers")
    return report["selected"]


def _stream(cfg, ds):
    sched = make_schedule(cfg.schedule, cfg.corruptions, cfg.severity, cfg.seed, cfg.samples_per_corruption,
                          cfg.batch_size)
    return sched, materialize(sched, ds)


def cmd_adapt(cfg, args) -> dict:
    path, stage = _model_path(cfg, args)
    _require(path, stage, args)
    ckpt = load_checkpoint(path)
    model = ckpt.model
    layers = _resolve_layers(cfg, args, model.n_layers)
    if ckpt.stats is None:
        raise MissingArtifact(f"{path} carries no source statistics; produce it with: {_producer(stage, args)}")
    align = aligned_layers(layers, model.n_layers, cfg.align_layers) if cfg.weights().align > 0 else []
    ds = SyntheticDataset(cfg.data_seed)
    sched, stream = _stream(cfg, ds)
    _manifest("adapt", cfg, args, selected_layers=layers, aligned_layers=align, schedule_digest=sched.digest(),
              checkpoint=path.name)
    stats = ckpt.stats.subset(align) if align else None
    noadapt = final_accuracy(evaluate_stream(model, stream))
    with JsonlSink(args.out_dir / "metrics.jsonl", timing=cfg.timing) as sink:
        records = adapt_stream(model, ParamSelection(model, layers), stats, stream, cfg.adapt(), sink)
    summary = {"final_accuracy": final_accuracy(records), "noadapt_accuracy": noadapt,
               "forwards": records[-1].forwards, "skipped_steps": sum(r.skipped for r in records),
               "selected_layers": layers, "quantized": model.quantized}
    _write_json(args.out_dir / "summary.json", summary)
    return summary


def cmd_diagnose(cfg, args) -> dict:
    from fwdadapt import diagnostics as D

    path, stage = _model_path(cfg, args)
    ckpt = load_checkpoint(_require(path, stage, args))
    model, stats = ckpt.model, ckpt.stats
    if stats is None:
        raise MissingArtifact(f"{path} carries no source statistics; produce it with: {_producer(stage, args)}")
    layers = _resolve_layers(cfg, args, model.n_layers)
    ds = SyntheticDataset(cfg.data_seed)
    sched, stream = _stream(cfg, ds)
    _manifest("diagnose", cfg, args, selected_layers=layers, schedule_digest=sched.digest())
    w = cfg.weights()
    runs = {
        "ours": (layers, w),
        "naive": (list(range(model.n_layers)), LossWeights(1.0, 0.0)),
    }
    rows, summary = [], []
    for name, (lay, weights) in runs.items():
        st = stats.subset(aligned_layers(lay, model.n_layers, cfg.align_layers)) if weights.align > 0 else None
        adapt_cfg = AdaptConfig(cfg.zoo(), weights, cfg.steps_per_batch, cfg.queue_size, cfg.predict_first)
        trace = D.grad_quality_trace(model, lay, st, stream, adapt_cfg, cfg.diag_steps)
        for e in trace:
            rows.append({"method": name, **json.loads(e.to_json())})
        cos = [e.cosine for e in trace if e.cosine is not None]
        summary.append({"section": "grad_quality", "name": name, "value": float(np.median(cos)) if cos else None})
    D.write_jsonl(args.out_dir / "grad_quality.jsonl", rows)

    d_id, d_ood = make_drls_sets(ds, cfg.n_per_domain, Corruption(cfg.drls_corruption, cfg.drls_severity),
                                 cfg.seed)
    ood_batch, _ = ds.sample_batch("source_holdout", cfg.batch_size, Corruption(cfg.corruptions[0], cfg.severity),
                                   seed=cfg.seed + 1)
    sel_rows = D.selection_baselines(model, d_id, d_ood, ood_batch, stats, stream, cfg.adapt(),
                                     seeds=cfg.diag_seeds, freeze_shallow=cfg.freeze_shallow)
    D.write_jsonl(args.out_dir / "selection.jsonl", sel_rows)
    summary += [{"section": "selection", "name": r["selector"], "value": r["median"]} for r in sel_rows]

    after = model.copy()
    st = stats.subset(aligned_layers(layers, model.n_layers, cfg.align_layers))
    adapt_stream(after, ParamSelection(after, layers), st, stream, cfg.adapt())
    conv = D.feature_convergence(model, after, d_id, d_ood, cfg.seed)
    _write_json(args.out_dir / "convergence.json", conv)
    summary += [{"section": "convergence", "name": f"layer{l}", "value": a - b}
                for l, b, a in zip(conv["layers"], conv["before"], conv["after"])]
    D.write_csv(args.out_dir / "summary.csv", summary)
    return {"rows": len(summary)}


def cmd_export_data(cfg, args) -> dict:
    _manifest("export-data", cfg, args)
    ds = SyntheticDataset(cfg.data_seed)
    written = []
    x, y = ds.full_split("source_holdout")
    export_split(args.out_dir / "source_holdout.bin", x, y, ds.classes)
    written.append("source_holdout.bin")
    n = min(cfg.samples_per_corruption, ds.split_size("test"))
    for kind in cfg.corruptions:
        x, y = ds.full_split("test", n, Corruption(kind, cfg.severity, cfg.seed))
        name = f"test_{kind}_{cfg.severity}.bin"
        export_split(args.out_dir / name, x, y, ds.classes)
        written.append(name)
    return {"files": written}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "quantize": cmd_quantize,
    "purity": cmd_purity,
    "adapt": cmd_adapt,
    "diagnose": cmd_diagnose,
    "export-data": cmd_export_data,
}


def _layers_arg(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--layers expects comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fwdadapt", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory")
    common.add_argument("--k", type=int)
    common.add_argument("--c", type=float)
    common.add_argument("--lr", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--lambda1", type=float)
    common.add_argument("--lambda2", type=float)
    common.add_argument("--layers", type=_layers_arg, help="comma-separated layer indices (skips purity)")
    common.add_argument("--schedule")
    common.add_argument("--batch-size", type=int)
    common.add_argument("--quantized", action="store_true", default=None, help="use the int8 checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


FLAG_TO_FIELD = {"seed": "seed", "out": "out", "k": "k", "c": "c", "lr": "lr", "tau": "tau",
                 "lambda1": "lambda1", "lambda2": "lambda2", "layers": "layers", "schedule": "schedule",
                 "batch_size": "batch_size", "quantized": "quantized"}


def config_from_args(args) -> C.RunConfig:
    file_values = C.load_file(args.config) if args.config else {}
    overrides = {field: getattr(args, flag) for flag, field in FLAG_TO_FIELD.items()}
    return C.resolve(file_values, overrides)


def main(argv=None) -> int:
    # argparse exits with status 2 on bad flags, which matches the config-error code
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except (C.ConfigError, DataConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out_dir = Path(cfg.out)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = COMMANDS[args.command](cfg, args)
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (SelectionError, NonFiniteError, CheckpointError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (C.ConfigError, DataConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
