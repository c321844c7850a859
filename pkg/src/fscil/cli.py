"""Command-line interface.

Subcommands: gen-data, run, ablate, grad-check, report. Exit codes are
0 ok, 1 check failure, 2 usage, 3 data or file validation, 4 ordering
assertion. Configuration precedence is explicit flag > ablation bundle >
config file > preset default; the PRIVILEGE_SEED environment variable is
the seed fallback when neither flag nor file names one.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .errors import ConfigError, ParseError, StreamValidationError
from .gradcheck import run_full_suite
from .harness import (
    ABLATION_CELLS,
    ExperimentConfig,
    check_ablation_order,
    prepare_assets,
    run_ablation_suite,
    run_experiment,
)
from .objectives import ClassEmbeddingTable
from .protocol import (
    PRESETS,
    SEED_EMBEDDINGS,
    generate_synthetic,
    load_dataset,
    save_dataset,
    splitmix64,
)
from .report import (
    CSV_HEADER,
    merge_reports,
    read_run_report,
    write_csv,
    write_run_report,
)

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_ASSERT = 4

SEED_ENV = "PRIVILEGE_SEED"

_SPECIAL_FIELDS = ("preset", "seed")


def _config_field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(ExperimentConfig)}


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    """One optional flag per experiment field, defaulting to 'not given'."""
    for f in fields(ExperimentConfig):
        if f.name in _SPECIAL_FIELDS:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            parser.add_argument(
                flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None
            )
        elif isinstance(default, int):
            parser.add_argument(flag, dest=f.name, type=int, default=None)
        elif isinstance(default, float):
            parser.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=str, default=None)


def _parse_config_file(path: str, parser: argparse.ArgumentParser) -> dict:
    types = _config_field_types()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        parser.error(f"cannot read config file: {exc}")
    entries: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            parser.error(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key = key.strip().replace("-", "_")
        value = value.strip()
        if key not in types:
            parser.error(f"{path}:{lineno}: unknown config key {key!r}")
        target = types[key]
        try:
            if target is bool:
                lowered = value.lower()
                if lowered in ("true", "1", "yes"):
                    entries[key] = True
                elif lowered in ("false", "0", "no"):
                    entries[key] = False
                else:
                    raise ValueError(value)
            elif target is int:
                entries[key] = int(value)
            elif target is float:
                entries[key] = float(value)
            else:
                entries[key] = value
        except ValueError:
            parser.error(f"{path}:{lineno}: bad value for {key}: {value!r}")
    return entries


def _resolve_seed(
    flag_value: int | None, file_entries: dict, parser: argparse.ArgumentParser
) -> int:
    if flag_value is not None:
        return flag_value
    if "seed" in file_entries:
        return int(file_entries["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            parser.error(f"{SEED_ENV} must be an integer, got {env!r}")
    return 1


def _build_config(args, parser: argparse.ArgumentParser) -> ExperimentConfig:
    file_entries = _parse_config_file(args.config, parser) if args.config else {}
    preset = args.preset or file_entries.get("preset", "cifar-mini")
    seed = _resolve_seed(args.seed, file_entries, parser)
    overrides = {
        k: v for k, v in file_entries.items() if k not in _SPECIAL_FIELDS
    }
    ablation = getattr(args, "ablation", None)
    if ablation:
        if ablation not in ABLATION_CELLS:
            parser.error(
                f"unknown ablation cell {ablation!r}; have {sorted(ABLATION_CELLS)}"
            )
        overrides.update(ABLATION_CELLS[ablation])
    for f in fields(ExperimentConfig):
        if f.name in _SPECIAL_FIELDS:
            continue
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    try:
        cfg = ExperimentConfig.from_preset(preset, seed=seed, **overrides)
        cfg.validate()
    except ConfigError as exc:
        parser.error(str(exc))
    return cfg


# -- gen-data ------------------------------------------------------------------


def cmd_gen_data(args, parser: argparse.ArgumentParser) -> int:
    cfg = _build_config(args, parser)
    bundle = generate_synthetic(
        num_classes=cfg.num_classes,
        samples_per_class=cfg.samples_per_class,
        image_size=cfg.image_size,
        noise_sigma=cfg.noise_sigma,
        seed=cfg.seed,
        channels=cfg.channels,
    )
    embeddings = ClassEmbeddingTable.pseudo(
        list(range(bundle.num_classes)),
        bundle.class_names,
        dim=cfg.embed_dim,
        seed=splitmix64(cfg.seed, SEED_EMBEDDINGS),
    )
    embed_path = args.embeddings_out or (os.path.splitext(args.out)[0] + ".embeddings.txt")
    try:
        save_dataset(bundle, args.out)
        embeddings.save(embed_path)
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_DATA
    counts = np.bincount(bundle.labels, minlength=bundle.num_classes)
    for cid, name in enumerate(bundle.class_names):
        print(f"{name} {counts[cid]}")
    print(f"wrote {args.out} ({bundle.num_classes} classes) and {embed_path}")
    return EXIT_OK


# -- run -----------------------------------------------------------------------


def cmd_run(args, parser: argparse.ArgumentParser) -> int:
    cfg = _build_config(args, parser)
    bundle = None
    if args.data:
        try:
            bundle = load_dataset(args.data)
        except (OSError, ParseError) as exc:
            print(f"error: cannot load dataset: {exc}", file=sys.stderr)
            return EXIT_DATA
        counts = np.bincount(bundle.labels, minlength=bundle.num_classes)
        h, w = bundle.images.shape[2], bundle.images.shape[3]
        cfg = replace(
            cfg,
            num_classes=bundle.num_classes,
            channels=bundle.images.shape[1],
            image_size=h if h == w else (h, w),
            samples_per_class=int(counts.min()),
        )
        try:
            cfg.validate()
        except ConfigError as exc:
            print(f"error: dataset incompatible with config: {exc}", file=sys.stderr)
            return EXIT_DATA
    embeddings = None
    if args.embeddings:
        try:
            embeddings = ClassEmbeddingTable.load(args.embeddings, expect_dim=cfg.embed_dim)
        except (OSError, ParseError, ConfigError) as exc:
            print(f"error: cannot load embeddings: {exc}", file=sys.stderr)
            return EXIT_DATA
    try:
        assets = prepare_assets(cfg, bundle=bundle, embeddings=embeddings)
    except StreamValidationError as exc:
        print("error: session stream validation failed:", file=sys.stderr)
        for violation in exc.violations:
            print(f"  - {violation}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    report = run_experiment(cfg, assets=assets)
    try:
        write_run_report(report, args.report)
        if args.csv:
            write_csv(report, args.csv)
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(
        f"a_base={report.a_base:.4f} a_last={report.a_last:.4f} "
        f"a_avg={report.a_avg:.4f} fgt={report.fgt:.4f} "
        f"sessions={len(report.sessions)} report={args.report}"
    )
    return EXIT_OK


# -- ablate ----------------------------------------------------------------------


def _format_ablation_table(rows) -> str:
    lines = ["cell\ta_base\ta_last\ta_avg\tfgt"]
    for row in rows:
        lines.append(
            f"{row.cell}\t{row.a_base:.6f}\t{row.a_last:.6f}"
            f"\t{row.a_avg:.6f}\t{row.fgt:.6f}"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(args, parser: argparse.ArgumentParser) -> int:
    cfg = _build_config(args, parser)
    if args.seeds < 1:
        parser.error("--seeds must be >= 1")
    seeds = list(range(1, args.seeds + 1))
    cells = None
    if args.cells:
        cells = [c.strip() for c in args.cells.split(",") if c.strip()]
        unknown = [c for c in cells if c not in ABLATION_CELLS]
        if unknown:
            parser.error(f"unknown ablation cells: {', '.join(unknown)}")
    sweep_layers = None
    if args.sweep:
        name, values = args.sweep
        if name != "layers":
            parser.error(f"unknown sweep {name!r}; only 'layers' is supported")
        try:
            sweep_layers = [int(v) for v in values.split(",") if v.strip()]
        except ValueError:
            parser.error(f"bad sweep values {values!r}")
        if not sweep_layers:
            parser.error("sweep needs at least one value")

    def progress(msg: str) -> None:
        print(f"[ablate] {msg}", file=sys.stderr)

    try:
        rows = run_ablation_suite(
            cfg, cells=cells, seeds=seeds, sweep_layers=sweep_layers,
            progress=progress if not args.quiet else None,
        )
    except ConfigError as exc:
        parser.error(str(exc))
    table = _format_ablation_table(rows)
    try:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
        if args.csv:
            with open(args.csv, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["cell", "a_base", "a_last", "a_avg", "fgt"])
                for row in rows:
                    writer.writerow(
                        [row.cell, repr(row.a_base), repr(row.a_last),
                         repr(row.a_avg), repr(row.fgt)]
                    )
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(table, end="")
    if args.assert_order:
        problems = check_ablation_order(rows)
        if problems:
            for p in problems:
                print(f"assertion failed: {p}", file=sys.stderr)
            return EXIT_ASSERT
        print("ordering assertions hold")
    return EXIT_OK


# -- grad-check -------------------------------------------------------------------


def cmd_grad_check(args, parser: argparse.ArgumentParser) -> int:
    tol_primitive = args.tol_primitive
    tol_composite = args.tol_composite
    if args.tol is not None:
        tol_primitive = args.tol if tol_primitive is None else tol_primitive
        tol_composite = args.tol if tol_composite is None else tol_composite
    kwargs = {}
    if tol_primitive is not None:
        kwargs["tol_primitive"] = tol_primitive
    if tol_composite is not None:
        kwargs["tol_composite"] = tol_composite
    seed = args.seed
    if seed is None:
        env = os.environ.get(SEED_ENV)
        seed = int(env) if env and env.lstrip("-").isdigit() else 0
    results, ok = run_full_suite(seed=seed, fault=args.fault, **kwargs)
    for r in results:
        print(r.line())
    if args.fault and ok:
        parser.error(f"fault {args.fault!r} did not match any check")
    if not ok:
        worst = max((r for r in results if not r.passed), key=lambda r: r.max_rel_err)
        print(f"FAILED: worst offender {worst.name} rel_err={worst.max_rel_err:.3e}")
        return EXIT_CHECK
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


# -- report -----------------------------------------------------------------------


def cmd_report(args, parser: argparse.ArgumentParser) -> int:
    reports = []
    for path in args.files:
        try:
            reports.append(read_run_report(path))
        except (OSError, ParseError) as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            return EXIT_DATA
    try:
        merged = merge_reports(reports)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"merged {merged.count} report(s)")
    print("metric\tmedian")
    print(f"a_base\t{merged.a_base:.6f}")
    print(f"a_last\t{merged.a_last:.6f}")
    print(f"a_avg\t{merged.a_avg:.6f}")
    print(f"fgt\t{merged.fgt:.6f}")
    for t, acc in enumerate(merged.session_accuracy):
        print(f"session[{t}]\t{acc:.6f}")
    if args.csv:
        try:
            with open(args.csv, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(CSV_HEADER)
                for t, acc in enumerate(merged.session_accuracy):
                    writer.writerow(
                        [str(t), repr(acc), repr(merged.a_base), repr(merged.a_last),
                         repr(merged.a_avg), repr(merged.fgt)]
                    )
        except OSError as exc:
            print(f"error: cannot write output: {exc}", file=sys.stderr)
            return EXIT_DATA
    return EXIT_OK


# -- wiring -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fscil",
        description="Few-shot class-incremental learning experiments on a miniature prompted transformer.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    common = dict(add_help=True)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic dataset and embedding table", **common)
    p_gen.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--config", default=None, help="key=value config file")
    p_gen.add_argument("-o", "--out", required=True, help="dataset output path")
    p_gen.add_argument("--embeddings-out", default=None, help="embedding table output path")
    _add_experiment_flags(p_gen)
    p_gen.set_defaults(func=cmd_gen_data)

    p_run = sub.add_parser("run", help="run one full experiment", **common)
    p_run.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--config", default=None, help="key=value config file")
    p_run.add_argument("--data", default=None, help="dataset file (default: generate in memory)")
    p_run.add_argument("--embeddings", default=None, help="embedding table file (default: derive)")
    p_run.add_argument("--ablation", default=None, help="apply a named ablation cell's flags")
    p_run.add_argument("--report", default="run-report.txt", help="report output path")
    p_run.add_argument("--csv", default=None, help="per-session CSV output path")
    _add_experiment_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run the ablation grid across seeds", **common)
    p_abl.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p_abl.add_argument("--seed", type=int, default=None, help="unused base seed; grid seeds are 1..N")
    p_abl.add_argument("--config", default=None, help="key=value config file")
    p_abl.add_argument("--seeds", type=int, default=5, help="number of seeds (1..N)")
    p_abl.add_argument("--cells", default=None, help="comma-separated cell names (default: all)")
    p_abl.add_argument("--sweep", nargs=2, metavar=("NAME", "VALUES"), default=None,
                       help="extra sweep rows, e.g. --sweep layers 0,2,4")
    p_abl.add_argument("--assert-order", action="store_true",
                       help="exit 4 unless expected orderings hold")
    p_abl.add_argument("--out", default="ablation-summary.txt", help="summary table path")
    p_abl.add_argument("--csv", default=None, help="summary CSV path")
    p_abl.add_argument("--quiet", action="store_true", help="suppress progress lines")
    _add_experiment_flags(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_grad = sub.add_parser("grad-check", help="finite-difference gradient verification", **common)
    p_grad.add_argument("--seed", type=int, default=None)
    p_grad.add_argument("--fault", default=None,
                        help="inject a wrong gradient into the named check (self-test)")
    p_grad.add_argument("--tol", type=float, default=None,
                        help="override both tolerances")
    p_grad.add_argument("--tol-primitive", type=float, default=None)
    p_grad.add_argument("--tol-composite", type=float, default=None)
    p_grad.set_defaults(func=cmd_grad_check)

    p_rep = sub.add_parser("report", help="merge run reports and print median metrics", **common)
    p_rep.add_argument("files", nargs="+", help="run report files")
    p_rep.add_argument("--csv", default=None, help="write median per-session CSV")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args, parser)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
