"""Command-line interface.

Commands: ``pretrain``, ``finetune``, ``predict``, ``recommend``,
``evaluate``. All randomness flows from ``--seed`` (default 0), so every
command is reproducible by default. Output files are written to a
temporary path and renamed, so failures never leave partial artifacts.

Exit codes: 0 ok, 2 config/manifest error, 3 data error, 4 training
failure, 5 schema mismatch.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import tempfile
from pathlib import Path

from . import dataio, evalharness, model, training
from .dataio import load_dataset, parse_manifest
from .encoding import PropertyValue
from .errors import ConfigError, DataError, SchemaError, TrainingError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_SCHEMA = 5


def _atomic_write(path, write_fn):
    """Write via temp file + rename so failures leave nothing behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_pairs(pairs, props_file=None) -> dict:
    """Raw name -> string value map from tokens and/or a key=value file."""
    raw: dict[str, str] = {}
    if props_file:
        for lineno, line in enumerate(Path(props_file).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{props_file}:{lineno}: expected name=value")
            name, value = (p.strip() for p in line.split("=", 1))
            raw[name] = value
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"property {pair!r} is not name=value")
        name, value = (p.strip() for p in pair.split("=", 1))
        raw[name] = value
    return raw


def _coerce_props(schema, raw: dict) -> dict:
    """Interpret raw strings according to the schema's property kinds."""
    kinds = dict(schema.essential + schema.optional)
    out = {}
    for name, value in raw.items():
        if kinds.get(name) == "natural":
            try:
                out[name] = PropertyValue.natural(int(float(value)))
            except ValueError:
                raise ConfigError(f"property {name!r} needs a natural number, "
                                  f"got {value!r}")
        else:
            out[name] = PropertyValue.text(value)
    return out


def _parse_context(spec: str, manifest) -> dataio.ContextKey:
    """Target context from name=value pairs, in manifest units."""
    raw = _parse_pairs([p for p in spec.split(",") if p.strip()])
    by_name = {p.name: p for p in manifest.essential}
    missing = set(by_name) - set(raw)
    if missing:
        raise ConfigError(f"--target-context is missing essential "
                          f"properties: {sorted(missing)}")
    unknown = set(raw) - set(by_name)
    if unknown:
        raise ConfigError(f"--target-context has non-essential properties: "
                          f"{sorted(unknown)}")
    items = []
    for p in manifest.essential:
        value = raw[p.name]
        if p.kind == "natural":
            try:
                items.append((p.name, int(round(float(value) * p.unit))))
            except ValueError:
                raise ConfigError(f"context property {p.name!r} needs a "
                                  f"number, got {value!r}")
        else:
            items.append((p.name, value))
    return dataio.ContextKey(tuple(items))


def _schema_from_manifest(manifest) -> model.PropertySchema:
    return model.PropertySchema(
        essential=tuple((p.name, p.kind) for p in manifest.essential),
        optional=tuple((p.name, p.kind) for p in manifest.optional),
    )


def cmd_pretrain(args) -> int:
    manifest = parse_manifest(args.manifest)
    if args.algo and manifest.algorithm != args.algo:
        raise ConfigError(
            f"manifest is for {manifest.algorithm!r}, not {args.algo!r}")
    if args.variant == "local":
        raise ConfigError("the local variant has no pre-training corpus; "
                          "use finetune with strategy local instead")
    records = load_dataset(args.data, manifest)
    print(dataio.summarize(records))
    if args.target_context:
        target = _parse_context(args.target_context, manifest)
        records = dataio.filter_for_variant(records, target, args.variant)
        print(f"variant {args.variant!r}: {len(records)} records after filtering")
    schema = _schema_from_manifest(manifest)
    space = training.SearchSpace(sample_count=args.search_samples)
    state, log = training.pretrain(records, schema, space=space,
                                   seed=args.seed, epochs=args.epochs)
    _atomic_write(args.out, lambda tmp: model.save(state, tmp))
    log_path = Path(args.out).with_suffix(".search.csv")
    _atomic_write(log_path, lambda tmp: _write_search_log(log, tmp))
    chosen = next(e for e in log if e.chosen)
    print(f"chosen config: dropout={chosen.dropout_rate} "
          f"lr={chosen.learning_rate} weight_decay={chosen.weight_decay} "
          f"val_mae={chosen.val_mae_seconds:.3f}s")
    print(f"fingerprint: {state.fingerprint()}")
    print(f"model written to {args.out}")
    return 0


def _write_search_log(log, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "dropout_rate", "learning_rate",
                         "weight_decay", "epochs", "final_train_loss",
                         "train_mae_seconds", "val_mae_seconds",
                         "wall_time_s", "status", "chosen"])
        for e in log:
            writer.writerow([e.config_id, e.dropout_rate, e.learning_rate,
                             e.weight_decay, e.epochs, repr(e.final_train_loss),
                             repr(e.train_mae_seconds), repr(e.val_mae_seconds),
                             f"{e.wall_time_s:.3f}", e.status, int(e.chosen)])


def cmd_finetune(args) -> int:
    state = model.load(args.model)
    records = load_dataset(args.samples, dataio.canonical_manifest_from_schema(
        state.schema, algorithm=""))
    tuned, report = training.finetune(state, records, strategy="pretrained",
                                      reuse=args.reuse, seed=args.seed)
    _atomic_write(args.out, lambda tmp: model.save(tuned, tmp))
    print(f"epochs: {report.epochs_run} best_epoch: {report.best_epoch} "
          f"best_mae: {report.best_mae_seconds:.3f}s "
          f"stopped: {report.stopping_reason}")
    print(f"fingerprint: {tuned.fingerprint()}")
    print(f"model written to {args.out}")
    return 0


def cmd_predict(args) -> int:
    state = model.load(args.model)
    props = _coerce_props(state.schema, _parse_pairs(args.props, args.props_file))
    pred = model.predict(state, args.scale_out, props)
    print(f"predicted_runtime_seconds: {pred.runtime_seconds:.3f}")
    if pred.negative_output:
        print("warning: model produced a negative runtime", file=sys.stderr)
    return 0


def cmd_recommend(args) -> int:
    state = model.load(args.model)
    props = _coerce_props(state.schema, _parse_pairs(args.props, args.props_file))
    try:
        lo, hi, step = (int(p) for p in args.range.split(":"))
    except ValueError:
        raise ConfigError(f"--range must be lo:hi:step, got {args.range!r}")
    if lo > hi or step < 1 or lo < 1:
        raise ConfigError(f"invalid candidate range {args.range!r}")
    candidates = list(range(lo, hi + 1, step))
    curve = [(x, model.predict(state, x, props).runtime_seconds)
             for x in candidates]
    print("scale_out,predicted_runtime_seconds")
    for x, runtime in curve:
        print(f"{x},{runtime:.3f}")
    qualifying = [x for x, runtime in curve if runtime <= args.target]
    if qualifying:
        print(f"recommended_scale_out: {min(qualifying)}")
    else:
        print("recommended_scale_out: none (target not achievable)")
    return 0


def cmd_evaluate(args) -> int:
    manifest = parse_manifest(args.manifest)
    records = load_dataset(args.data, manifest)
    schema = _schema_from_manifest(manifest)
    config = evalharness.ComparisonConfig(
        methods=tuple(args.methods.split(",")),
        n_train_values=tuple(_parse_int_list(args.n_train)),
        contexts=args.contexts,
        max_splits=args.max_splits,
        seed=args.seed,
        reuse=args.reuse,
        pretrain_epochs=args.pretrain_epochs,
        pretrain_space=training.SearchSpace(sample_count=args.search_samples),
        workers=args.workers,
    )
    table = evalharness.run_comparison(records, schema, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "metrics.csv",
                  lambda tmp: evalharness.write_metrics_csv(table, tmp))
    _atomic_write(out_dir / "ecdf.csv",
                  lambda tmp: evalharness.write_ecdf_csv(table, tmp))
    _atomic_write(out_dir / "contexts.csv",
                  lambda tmp: evalharness.write_context_legend(records, tmp))
    for key, agg in sorted(table.aggregate().items()):
        method, variant, n_train, task = key
        name = f"{method}/{variant}" if variant else method
        print(f"{name:>16} n={n_train} {task:>7}: "
              f"mre={agg['mre']:.3f} mae={agg['mae']:.1f}s ({agg['count']} splits)")
    print(f"results written to {out_dir}")
    return 0


def _parse_int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part and not part.startswith("-"):
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ConfigError(f"empty integer list {text!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jobcast",
        description="Runtime prediction for distributed dataflow jobs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pre-train a model on historical data")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--algo", default=None)
    p.add_argument("--variant", choices=("local", "filtered", "full"),
                   default="full")
    p.add_argument("--target-context", default=None,
                   help="comma-separated name=value pairs identifying the "
                        "context to exclude / filter against")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=training.MAX_EPOCHS)
    p.add_argument("--search-samples", type=int, default=12)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a pre-trained model to samples")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True,
                   help="CSV with scale_out, runtime_seconds, and one column "
                        "per schema property")
    p.add_argument("--reuse", choices=training.REUSE_STRATEGIES,
                   default="partial-unfreeze")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("predict", help="predict a runtime")
    p.add_argument("--model", required=True)
    p.add_argument("--scale-out", type=int, required=True)
    p.add_argument("--props", nargs="*", default=[])
    p.add_argument("--props-file", default=None)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("recommend", help="smallest scale-out meeting a target")
    p.add_argument("--model", required=True)
    p.add_argument("--target", type=float, required=True,
                   help="runtime target in seconds")
    p.add_argument("--range", required=True, help="candidate scale-outs lo:hi:step")
    p.add_argument("--props", nargs="*", default=[])
    p.add_argument("--props-file", default=None)
    p.set_defaults(fn=cmd_recommend)

    p = sub.add_parser("evaluate", help="run the comparison protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods", default="nnls,bell,local,full")
    p.add_argument("--n-train", default="1,2,3,4,5")
    p.add_argument("--contexts", type=int, default=7)
    p.add_argument("--max-splits", type=int, default=200)
    p.add_argument("--pretrain-epochs", type=int, default=training.MAX_EPOCHS)
    p.add_argument("--search-samples", type=int, default=12)
    p.add_argument("--reuse", choices=training.REUSE_STRATEGIES,
                   default="partial-unfreeze")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
