"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import ml
from .config import load_config
from .errors import InvalidConfig, ProxgateError
from .evaluation import (
    ExperimentConfig,
    EvaluationReport,
    ModelResult,
    closest_to_published,
    confusion,
    run_experiments,
    split,
    sweep,
    sweep_csv,
)
from .registry import DeviceIdentifiers, DeviceSignature, Group, Registry, parse_secret_hex
from .rssi import (
    Category,
    ColumnMapping,
    LabeledDataset,
    PathLossParams,
    WearSetting,
    combine_settings,
    dataset_from_samples,
    read_dataset,
    synth_dataset,
    write_csv,
)
from .store import Store

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DEFAULT_TAU_GRID = tuple(0.75 + 0.5 * i for i in range(9))  # 0.75 .. 4.75
DEFAULT_K_GRID = (1, 3, 5, 7)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# data sources


def _add_data_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="CSV in the canonical (or mapped) column layout")
    src.add_argument("--synthetic", action="store_true", help="generate log-distance data instead")
    p.add_argument("--mapping", type=Path, help="JSON column mapping for foreign CSV headers")
    p.add_argument("--tau", type=float, default=2.0, help="proximity threshold in metres")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=10_000, help="synthetic rows per category")
    p.add_argument("--sigma", type=float, default=3.0, help="synthetic shadowing sigma (dB)")
    p.add_argument("--exponent", type=float, default=2.0, help="synthetic path-loss exponent")
    p.add_argument("--rssi-1m", type=float, default=-59.0, help="synthetic RSSI at 1 m (dBm)")


def _mapping(args) -> ColumnMapping | None:
    if not getattr(args, "mapping", None):
        return None
    return ColumnMapping.from_dict(json.loads(args.mapping.read_text(encoding="utf-8")))


def _datasets(args) -> dict[str, LabeledDataset]:
    if args.synthetic:
        out = {}
        for offset, cat in enumerate((Category.CROSSWISE, Category.DIRECT)):
            params = PathLossParams(
                rssi_at_1m_dbm=args.rssi_1m,
                path_loss_exponent_n=args.exponent,
                shadowing_sigma_db=args.sigma,
                rng_seed=args.seed + offset,
            )
            out[cat.value] = synth_dataset(args.n, threshold_m=args.tau, params=params, category=cat)
        return out
    result = read_dataset(args.input, _mapping(args))
    samples = result.samples
    if all(s.setting is not None for s in samples):
        crosswise, direct = combine_settings(samples)
        out = {}
        for cat, part in ((Category.CROSSWISE, crosswise), (Category.DIRECT, direct)):
            if part:
                out[cat.value] = dataset_from_samples(part, args.tau, cat)
        return out
    return {Category.MIXED.value: dataset_from_samples(samples, args.tau, Category.MIXED)}


def _source_name(args) -> str:
    return "synthetic" if args.synthetic else Path(args.input).name


def _emit(text: str, output: Path | None) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        output.write_text(text, encoding="utf-8")


def _render(report: EvaluationReport, fmt: str) -> str:
    if fmt == "json":
        return report.to_json()
    if fmt == "csv":
        return report.to_csv()
    return report.render()


# ---------------------------------------------------------------------------
# commands


def _registry(args, clock=time.time) -> tuple[Registry, Store]:
    secret_hex = args.secret_hex or os.environ.get("PROXGATE_REGISTRY_SECRET_HEX")
    if args.config:
        cfg = load_config(args.config)
        secret_hex = secret_hex or cfg.registry_secret_hex
        db = args.db or cfg.database
    else:
        db = args.db or "proxgate.db"
    if not secret_hex:
        raise UsageError("registry secret required (--secret-hex, --config or PROXGATE_REGISTRY_SECRET_HEX)")
    store = Store(db)
    return Registry(parse_secret_hex(secret_hex), store=store, clock=clock), store


def cmd_register(args) -> int:
    extra = []
    for item in args.extra or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--extra expects name=value, got {item!r}")
        extra.append((name, value))
    ids = DeviceIdentifiers(uuid=args.uuid or "", imei=args.imei or "", device_id=args.device_id or "", extra=tuple(extra))
    group = Group.GROUP_ONE if args.group in ("one", "GroupOne") else Group.GROUP_TWO
    clock = time.time if args.timestamp is None else (lambda: args.timestamp)
    registry, store = _registry(args, clock)
    try:
        profile = registry.register_device(args.name, ids, group)
        if args.signed_in:
            registry.set_signed_in(profile.signature, True)
            profile = registry.lookup(profile.signature)
    finally:
        store.close()
    print(json.dumps(profile.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_signin(args) -> int:
    registry, store = _registry(args)
    try:
        sig = DeviceSignature.from_hex(args.signature)
        registry.set_signed_in(sig, not args.off)
        print(json.dumps(registry.lookup(sig).to_dict(), indent=2, sort_keys=True))
    finally:
        store.close()
    return EXIT_OK


def cmd_ingest(args) -> int:
    result = read_dataset(args.input, _mapping(args))
    summary = {
        "source": Path(args.input).name,
        "rows": result.rows,
        "samples": len(result.samples),
        "rejected_rows": [line for line, _ in result.rejected],
        "rows_by_setting": result.row_counts_by_setting(),
    }
    if all(s.setting is not None for s in result.samples):
        crosswise, direct = combine_settings(result.samples)
        summary["crosswise_rows"] = len({s.source_row for s in crosswise})
        summary["direct_rows"] = len({s.source_row for s in direct})
    if args.db:
        store = Store(args.db)
        try:
            store.insert_dataset_samples(summary["source"], result.samples)
        finally:
            store.close()
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    params = PathLossParams(
        rssi_at_1m_dbm=args.rssi_1m,
        path_loss_exponent_n=args.exponent,
        shadowing_sigma_db=args.sigma,
        rng_seed=args.seed,
    )
    grid = _floats(args.distances) if args.distances else None
    kwargs = {"distances": grid} if grid else {}
    data = synth_dataset(args.n, threshold_m=args.tau, params=params, **kwargs)
    settings = None
    if args.setting:
        settings = [WearSetting(args.setting)] * len(data)
    write_csv(args.output, data, settings)
    print(json.dumps({"output": str(args.output), "rows": len(data), "positives": int(data.labels.sum())}, sort_keys=True))
    return EXIT_OK


def _pick_category(datasets: dict[str, LabeledDataset], wanted: str | None) -> tuple[str, LabeledDataset]:
    if wanted:
        key = wanted.capitalize()
        if key not in datasets:
            raise UsageError(f"category {wanted!r} not present (have {sorted(datasets)})")
        return key, datasets[key]
    if len(datasets) != 1:
        raise UsageError(f"input has categories {sorted(datasets)}; choose one with --category")
    return next(iter(datasets.items()))


def cmd_train(args) -> int:
    datasets = _datasets(args)
    category, data = _pick_category(datasets, args.category)
    train, _, _, _ = split(data, args.train_fraction, args.seed)
    hyper = ml.LogisticHyper(learning_rate=args.learning_rate, epochs=args.epochs, l2=args.l2)
    model = ml.train(args.model, train, k=args.k, hyper=hyper)
    model.metadata.update(
        {
            "source": _source_name(args),
            "category": category,
            "provenance": data.provenance.value,
            "tau_m": args.tau,
            "seed": args.seed,
            "train_fraction": args.train_fraction,
            "train_rows": len(train),
        }
    )
    output = args.output or Path(f"{args.model.lower()}.json")
    ml.save_model(model, output)
    print(json.dumps({"model_id": ml.model_id(model), "output": str(output)}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    datasets = _datasets(args)
    if args.model:
        model = ml.load_model(args.model)
        meta = model.metadata
        seed = meta.get("seed", args.seed)
        fraction = meta.get("train_fraction", args.train_fraction)
        category, data = _pick_category(datasets, args.category or meta.get("category"))
        _, test, _, _ = split(data, fraction, seed)
        report = EvaluationReport(
            {category: {model.variant: ModelResult.from_confusion(confusion(model, test))}},
            {"seed": seed, "split_ratio": fraction, "tau_m": {category: data.proximity_threshold_m},
             "model_id": ml.model_id(model)},
        )
    else:
        config = ExperimentConfig(
            seed=args.seed,
            train_fraction=args.train_fraction,
            k=args.k,
            logistic=ml.LogisticHyper(args.learning_rate, args.epochs, args.l2),
        )
        if args.category:
            key, data = _pick_category(datasets, args.category)
            datasets = {key: data}
        report = run_experiments(datasets, config)
    _emit(_render(report, args.format), args.output)
    return EXIT_OK


def cmd_sweep(args) -> int:
    datasets = _datasets(args)
    config = ExperimentConfig(seed=args.seed, train_fraction=args.train_fraction)
    cells = sweep(datasets, _floats(args.tau_grid), _ints(args.k_grid), config)
    _emit(sweep_csv(cells), args.output)
    if args.summary:
        summary = {}
        for cat in datasets:
            if cat in ("Crosswise", "Direct"):
                try:
                    best = closest_to_published(cells, cat)
                except InvalidConfig:
                    continue
                summary[cat] = {
                    "tau_m": best.tau_m,
                    "k": best.k,
                    "mean_abs_delta_pct": best.mean_abs_delta,
                    "deltas_pct": best.deltas,
                }
        args.summary.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve

    config = load_config(args.config)
    serve(config)
    return EXIT_OK


def cmd_demo(args) -> int:
    from .demo import run_demo

    run_demo(
        args.scenario,
        distance_m=args.distance,
        seed=args.seed,
        sigma_db=args.sigma,
        action_confirmed=args.action_confirmed,
        data_sensitivity="Sensitive" if args.sensitive else "Insensitive",
        emit=print,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proxgate", description="Proximity-gated data sharing over BLE RSSI.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def registry_args(p):
        p.add_argument("--db", help="sqlite database path (default proxgate.db)")
        p.add_argument("--config", type=Path)
        p.add_argument("--secret-hex", help="64-hex-char registry secret")

    p = sub.add_parser("register", help="register a device")
    registry_args(p)
    p.add_argument("--name", required=True)
    p.add_argument("--group", required=True, choices=["one", "two", "GroupOne", "GroupTwo"])
    p.add_argument("--uuid")
    p.add_argument("--imei")
    p.add_argument("--device-id")
    p.add_argument("--extra", action="append", metavar="NAME=VALUE")
    p.add_argument("--signed-in", action="store_true")
    p.add_argument("--timestamp", type=float, help="registration time in seconds since the epoch (default: now)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("signin", help="set a device's signed-in flag")
    registry_args(p)
    p.add_argument("--signature", required=True)
    p.add_argument("--off", action="store_true")
    p.set_defaults(func=cmd_signin)

    p = sub.add_parser("ingest", help="load a dataset CSV and report per-setting counts")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--mapping", type=Path)
    p.add_argument("--db")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--exponent", type=float, default=2.0)
    p.add_argument("--rssi-1m", type=float, default=-59.0)
    p.add_argument("--distances", help="comma-separated distance grid in metres")
    p.add_argument("--setting", choices=["LL", "RR", "RL", "LR"])
    p.set_defaults(func=cmd_synth)

    def model_args(p):
        p.add_argument("--category", help="Crosswise, Direct or Mixed")
        p.add_argument("--train-fraction", type=float, default=0.8)
        p.add_argument("--k", type=int, default=5)
        p.add_argument("--learning-rate", type=float, default=0.1)
        p.add_argument("--epochs", type=int, default=500)
        p.add_argument("--l2", type=float, default=1e-4)

    p = sub.add_parser("train", help="train one model on the training split and save it as JSON")
    _add_data_args(p)
    model_args(p)
    p.add_argument("--model", required=True, type=str.upper, choices=["LR", "KNN", "GNB"])
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the split/train/test experiment and print result tables")
    _add_data_args(p)
    model_args(p)
    p.add_argument("--model", type=Path, help="evaluate a saved model instead of training")
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep the proximity threshold and k")
    _add_data_args(p)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--tau-grid", default=",".join(f"{t:g}" for t in DEFAULT_TAU_GRID))
    p.add_argument("--k-grid", default=",".join(str(k) for k in DEFAULT_K_GRID))
    p.add_argument("--output", type=Path)
    p.add_argument("--summary", type=Path, help="write the cell closest to the published tables as JSON")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", help="run the service-provider daemon")
    p.add_argument("--config", type=Path)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("demo", help="scripted end-to-end scenario against a live daemon")
    p.add_argument("--scenario", choices=["fig1a", "fig1b"], default="fig1a")
    p.add_argument("--distance", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--sensitive", action="store_true", help="mark the shared data as sensitive")
    p.add_argument("--action-confirmed", action="store_true")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"proxgate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProxgateError, OSError, ValueError) as exc:
        code = exc.code if isinstance(exc, ProxgateError) else type(exc).__name__
        print(f"proxgate: {code}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
