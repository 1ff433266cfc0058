"""Command-line front end.

Seven subcommands: gen, train, eval, compare, ablate, export-fused, and
gradcheck. Every run that writes artifacts also writes a RunManifest
JSON next to its primary output with the resolved argv, effective
parameters, and input hashes, so the run can be replayed and its reports
compared byte for byte. Exit codes: 0 on success, 1 for failed checks or
bad data, 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np

from .data import (
    file_sha256,
    read_dataset,
    stack_features,
    synth_generate,
    write_dataset,
    write_sidecar,
)
from .data import atomic_write_bytes
from .fusion import FusionConfig, STRATEGIES
from .gradcheck import CHECKED_OPS, DEFAULT_STEP, DEFAULT_TOLERANCE, run_gradcheck
from .model import ModelDims, load_model, save_model
from .train import (
    TrainConfig,
    compare_fusions,
    evaluate,
    render_csv,
    render_table,
    run_ablation,
    train,
)

__all__ = ["main", "build_parser", "argv_from_manifest", "read_manifest"]

logger = logging.getLogger("trifuse.cli")

_TOP_KEYS = (
    "epochs", "lr", "batch_size", "seed", "test_fraction",
    "hidden1", "hidden2", "precision", "beta1", "beta2", "adam_eps",
)
_FUSION_KEYS = ("strategy", "d_model", "d_f", "n_heads", "channel_mask", "pooling", "tensor_budget")


def _parse_mask(text: str) -> tuple[bool, bool, bool]:
    parts = text.split(",")
    if len(parts) != 3 or any(p.strip() not in ("0", "1") for p in parts):
        raise ValueError(f"channel mask must look like '1,1,0', got {text!r}")
    return tuple(p.strip() == "1" for p in parts)


def _parse_dims(text: str) -> ModelDims:
    parts = text.split(",")
    if len(parts) != 6:
        raise ValueError(f"dims must be six comma-separated integers, got {text!r}")
    values = [int(p) for p in parts]
    if any(v < 1 for v in values):
        raise ValueError(f"dims must be positive, got {text!r}")
    return ModelDims(*values)


def _format_flag_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join("1" if bool(v) else "0" for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _argv_for(command: str, flags: list[tuple[str, object]]) -> list[str]:
    argv = [command]
    for flag, value in flags:
        if value is None:
            continue
        argv.extend([f"--{flag}", _format_flag_value(value)])
    return argv


def _write_manifest(path: str, command: str, argv: list[str], parameters: dict,
                    inputs: dict, artifacts: dict, started_utc: str, wall: float) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "parameters": parameters,
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in inputs.items()},
        "artifacts": {name: str(p) for name, p in artifacts.items()},
        "started_utc": started_utc,
        "wall_clock_seconds": round(wall, 3),
    }
    atomic_write_bytes(path, (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def argv_from_manifest(manifest: dict, overrides: dict[str, str] | None = None) -> list[str]:
    """The stored argv, with flag values swapped for replays that must
    write somewhere else."""
    argv = list(manifest["argv"])
    for flag, value in (overrides or {}).items():
        key = f"--{flag}"
        if key in argv:
            argv[argv.index(key) + 1] = value
        else:
            argv.extend([key, value])
    return argv


def _merged_train_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    base = asdict(TrainConfig())
    base["fusion"]["channel_mask"] = list(base["fusion"]["channel_mask"])
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
        fusion_overrides = overrides.pop("fusion", {})
        for key in overrides:
            if key not in _TOP_KEYS:
                raise ValueError(f"unknown config key {key!r}")
        for key in fusion_overrides:
            if key not in _FUSION_KEYS:
                raise ValueError(f"unknown fusion config key {key!r}")
        base.update(overrides)
        base["fusion"].update(fusion_overrides)

    for key in _TOP_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    for key in _FUSION_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            base["fusion"][key] = value

    mask = base["fusion"]["channel_mask"]
    if isinstance(mask, str):
        mask = _parse_mask(mask)
    base["fusion"]["channel_mask"] = tuple(bool(v) for v in mask)
    fusion = FusionConfig(**base["fusion"])
    return TrainConfig(fusion=fusion, **{k: base[k] for k in _TOP_KEYS})


def _train_flags(args, config: TrainConfig) -> list[tuple[str, object]]:
    flags: list[tuple[str, object]] = [("data", args.data)]
    if getattr(args, "out", None) is not None:
        flags.append(("out", args.out))
    if getattr(args, "out_prefix", None) is not None:
        flags.append(("out-prefix", args.out_prefix))
    fusion = config.fusion
    flags.extend([
        ("strategy", fusion.strategy),
        ("epochs", config.epochs),
        ("lr", config.lr),
        ("batch-size", config.batch_size),
        ("seed", config.seed),
        ("test-fraction", config.test_fraction),
        ("d-model", fusion.d_model),
        ("d-f", fusion.d_f),
        ("n-heads", fusion.n_heads),
        ("channel-mask", fusion.channel_mask),
        ("pooling", fusion.pooling),
        ("tensor-budget", fusion.tensor_budget),
        ("hidden1", config.hidden1),
        ("hidden2", config.hidden2),
        ("precision", config.precision),
        ("beta1", config.beta1),
        ("beta2", config.beta2),
        ("adam-eps", config.adam_eps),
    ])
    return flags


def _config_parameters(config: TrainConfig) -> dict:
    out = asdict(config)
    out["fusion"]["channel_mask"] = list(config.fusion.channel_mask)
    return out


def _epoch_log_csv(result) -> str:
    import csv as _csv
    import io as _io

    metric_names = ("accuracy", "fake_precision", "fake_recall", "fake_f1",
                    "real_precision", "real_recall", "real_f1")
    buffer = _io.StringIO()
    writer = _csv.writer(buffer, lineterminator="\n")
    writer.writerow(["epoch", "train_loss"]
                    + [f"train_{m}" for m in metric_names]
                    + [f"test_{m}" for m in metric_names])
    for log in result.epochs:
        row = [str(log.epoch), f"{log.train_loss:.8f}"]
        row += [f"{getattr(log.train_metrics, m):.6f}" for m in metric_names]
        if log.test_metrics is None:
            row += [""] * len(metric_names)
        else:
            row += [f"{getattr(log.test_metrics, m):.6f}" for m in metric_names]
        writer.writerow(row)
    return buffer.getvalue()


def _write_report(prefix: str, rows) -> tuple[str, str]:
    csv_path = f"{prefix}.csv"
    txt_path = f"{prefix}.txt"
    atomic_write_bytes(csv_path, render_csv(rows).encode("utf-8"))
    atomic_write_bytes(txt_path, render_table(rows).encode("utf-8"))
    return csv_path, txt_path


def cmd_gen(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    clock = time.monotonic()
    dims = _parse_dims(args.dims)
    header, records = synth_generate(
        n=args.n,
        class_separation=args.class_separation,
        cross_modal_weight=args.cross_modal_weight,
        seed=args.seed,
        dims=dims,
        noise_std=args.noise_std,
        latent_dims=args.latent_dims,
    )
    write_dataset(header, records, args.out)
    sidecar = write_sidecar(args.out, {
        "source": "synthetic",
        "n": args.n,
        "class_separation": args.class_separation,
        "cross_modal_weight": args.cross_modal_weight,
        "seed": args.seed,
        "dims": args.dims,
        "noise_std": args.noise_std,
        "latent_dims": args.latent_dims,
    })
    flags = [
        ("out", args.out), ("n", args.n), ("class-separation", args.class_separation),
        ("cross-modal-weight", args.cross_modal_weight), ("seed", args.seed),
        ("dims", args.dims), ("noise-std", args.noise_std), ("latent-dims", args.latent_dims),
    ]
    _write_manifest(
        f"{args.out}.run.json", "gen", _argv_for("gen", flags),
        {name: value for name, value in flags},
        inputs={}, artifacts={"dataset": args.out, "sidecar": sidecar},
        started_utc=started, wall=time.monotonic() - clock,
    )
    fake = sum(r.label for r in records)
    print(f"wrote {len(records)} records ({fake} fake, {len(records) - fake} real) to {args.out}")
    return 0


def cmd_train(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    clock = time.monotonic()
    config = _merged_train_config(args)
    dataset = read_dataset(args.data)
    result = train(dataset, config)
    save_model(result.model, args.out)
    log_path = f"{args.out}.log.csv"
    atomic_write_bytes(log_path, _epoch_log_csv(result).encode("utf-8"))
    _write_manifest(
        f"{args.out}.run.json", "train", _argv_for("train", _train_flags(args, config)),
        _config_parameters(config),
        inputs={"data": args.data}, artifacts={"model": args.out, "epoch_log": log_path},
        started_utc=started, wall=time.monotonic() - clock,
    )
    final = result.final_metrics
    where = "test" if result.epochs[-1].test_metrics is not None else "train"
    print(
        f"trained {config.fusion.strategy} for {config.epochs} epochs: "
        f"{where} accuracy {final.accuracy:.4f}, fake F1 {final.fake_f1:.4f}"
    )
    return 0


def cmd_eval(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    clock = time.monotonic()
    model = load_model(args.model)
    _, records = read_dataset(args.data)
    metrics = evaluate(model, records)
    rows = [(model.config.fusion.strategy, metrics, None)]
    csv_path, txt_path = _write_report(args.out_prefix, rows)
    flags = [("model", args.model), ("data", args.data), ("out-prefix", args.out_prefix)]
    _write_manifest(
        f"{args.out_prefix}.run.json", "eval", _argv_for("eval", flags),
        {name: value for name, value in flags},
        inputs={"model": args.model, "data": args.data},
        artifacts={"report_csv": csv_path, "report_txt": txt_path},
        started_utc=started, wall=time.monotonic() - clock,
    )
    sys.stdout.write(render_table(rows))
    return 0


def cmd_compare(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    clock = time.monotonic()
    config = _merged_train_config(args)
    dataset = read_dataset(args.data)
    results = compare_fusions(dataset, config)
    rows = [(r.name, r.metrics, r.error) for r in results]
    csv_path, txt_path = _write_report(args.out_prefix, rows)
    _write_manifest(
        f"{args.out_prefix}.run.json", "compare", _argv_for("compare", _train_flags(args, config)),
        _config_parameters(config),
        inputs={"data": args.data},
        artifacts={"report_csv": csv_path, "report_txt": txt_path},
        started_utc=started, wall=time.monotonic() - clock,
    )
    sys.stdout.write(render_table(rows))
    return 0


def cmd_ablate(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    clock = time.monotonic()
    config = _merged_train_config(args)
    dataset = read_dataset(args.data)
    rows_full = run_ablation(dataset, config)
    rows = [(r.label, r.metrics, r.error) for r in rows_full]
    csv_path, txt_path = _write_report(args.out_prefix, rows)
    _write_manifest(
        f"{args.out_prefix}.run.json", "ablate", _argv_for("ablate", _train_flags(args, config)),
        _config_parameters(config),
        inputs={"data": args.data},
        artifacts={"report_csv": csv_path, "report_txt": txt_path},
        started_utc=started, wall=time.monotonic() - clock,
    )
    sys.stdout.write(render_table(rows))
    return 0


def cmd_export_fused(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    clock = time.monotonic()
    model = load_model(args.model)
    _, records = read_dataset(args.data)
    if not records:
        raise ValueError("export-fused: dataset has no records")

    import csv as _csv
    import io as _io

    width = model.config.fusion.fused_width()
    buffer = _io.StringIO()
    writer = _csv.writer(buffer, lineterminator="\n")
    writer.writerow(["id", "label"] + [f"f{i}" for i in range(width)])
    for start in range(0, len(records), 256):
        chunk = records[start:start + 256]
        feats, _ = stack_features(chunk)
        fused = model.fused_vector(feats)
        if fused.shape[1] != width:
            raise ValueError(f"fused width {fused.shape[1]} does not match configured {width}")
        for record, row in zip(chunk, fused):
            writer.writerow([str(record.id), str(record.label)] + [f"{v:.8e}" for v in row])
    atomic_write_bytes(args.out, buffer.getvalue().encode("utf-8"))

    flags = [("model", args.model), ("data", args.data), ("out", args.out)]
    _write_manifest(
        f"{args.out}.run.json", "export-fused", _argv_for("export-fused", flags),
        {name: value for name, value in flags},
        inputs={"model": args.model, "data": args.data},
        artifacts={"fused_csv": args.out},
        started_utc=started, wall=time.monotonic() - clock,
    )
    print(f"wrote {len(records)} fused vectors of width {width} to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    clock = time.monotonic()
    results = run_gradcheck(
        seed=args.seed, step=args.step, tolerance=args.tolerance, fault_op=args.inject_fault
    )
    lines = [f"{'op':24}{'max_rel_error':>16}  status"]
    for r in results:
        lines.append(f"{r.op:24}{r.max_rel_error:>16.3e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        lines.append(f"FAILED: {', '.join(failed)}")
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)

    if args.out_prefix:
        txt_path = f"{args.out_prefix}.txt"
        atomic_write_bytes(txt_path, report.encode("utf-8"))
        flags = [
            ("seed", args.seed), ("step", args.step), ("tolerance", args.tolerance),
            ("out-prefix", args.out_prefix), ("inject-fault", args.inject_fault),
        ]
        _write_manifest(
            f"{args.out_prefix}.run.json", "gradcheck", _argv_for("gradcheck", flags),
            {name: value for name, value in flags if value is not None},
            inputs={}, artifacts={"report_txt": txt_path},
            started_utc=started, wall=time.monotonic() - clock,
        )
    return 1 if failed else 0


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; explicit flags override it")
    sub.add_argument("--strategy", choices=STRATEGIES)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--test-fraction", type=float)
    sub.add_argument("--d-model", type=int)
    sub.add_argument("--d-f", type=int)
    sub.add_argument("--n-heads", type=int)
    sub.add_argument("--channel-mask", help="three 0/1 flags: text,image,imgtext")
    sub.add_argument("--pooling")
    sub.add_argument("--tensor-budget", type=int)
    sub.add_argument("--hidden1", type=int)
    sub.add_argument("--hidden2", type=int)
    sub.add_argument("--precision", choices=("single", "double"))
    sub.add_argument("--beta1", type=float)
    sub.add_argument("--beta2", type=float)
    sub.add_argument("--adam-eps", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trifuse",
        description="Train and inspect tri-modal fake news classifiers over pre-extracted features.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="generate a synthetic feature file")
    gen.add_argument("--out", required=True, help="output feature file")
    gen.add_argument("--n", type=int, required=True, help="number of records")
    gen.add_argument("--class-separation", type=float, default=1.0)
    gen.add_argument("--cross-modal-weight", type=float, default=0.5)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--dims", default="4,16,4,16,4,16", help="L_t,d_t,L_i,d_i,L_m,d_m")
    gen.add_argument("--noise-std", type=float, default=0.5)
    gen.add_argument("--latent-dims", type=int, default=4)
    gen.set_defaults(handler=cmd_gen)

    tr = commands.add_parser("train", help="train one model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True, help="output model file")
    _add_config_flags(tr)
    tr.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="score a model file on a feature file")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out-prefix", required=True, help="writes <prefix>.csv and <prefix>.txt")
    ev.set_defaults(handler=cmd_eval)

    cp = commands.add_parser("compare", help="train every fusion strategy and tabulate metrics")
    cp.add_argument("--data", required=True)
    cp.add_argument("--out-prefix", required=True)
    _add_config_flags(cp)
    cp.set_defaults(handler=cmd_compare)

    ab = commands.add_parser("ablate", help="sweep channel masks with fusion on and off")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out-prefix", required=True)
    _add_config_flags(ab)
    ab.set_defaults(handler=cmd_ablate)

    ex = commands.add_parser("export-fused", help="write fused vectors as CSV")
    ex.add_argument("--model", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--out", required=True)
    ex.set_defaults(handler=cmd_export_fused)

    gc = commands.add_parser("gradcheck", help="finite-difference check of every operation")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--step", type=float, default=DEFAULT_STEP)
    gc.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    gc.add_argument("--out-prefix")
    gc.add_argument("--inject-fault", choices=CHECKED_OPS, help="plant a gradient error in one op")
    gc.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.handler(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
