"""Command-line entry point: ``connbench {gen,bench,stats,gradcheck}``.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 training failure,
4 incompatible inputs.
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter
from pathlib import Path

from .dataio import ConfigError, DataError, GeneratorConfig, generate_synthetic, save_dataset

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_TRAINING, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel workers for bench")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="connbench", parents=[common],
                                     description="Connectome behavior-prediction benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    gen.add_argument("--spec", type=Path, required=True, help="generator key=value file")
    bench = sub.add_parser("bench", parents=[common], help="run nested CV and write reports")
    bench.add_argument("--config", type=Path, required=True, help="run configuration file")
    stats = sub.add_parser("stats", parents=[common], help="recompute stats.csv from report.csv files")
    stats.add_argument("reports", type=Path, nargs="+")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    return parser


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_gen(args) -> int:
    cfg = GeneratorConfig.from_file(args.spec)
    if "seed" in args:
        cfg.seed = args.seed
    cfg = cfg.resolved()
    out = getattr(args, "out", Path("data"))
    ds = generate_synthetic(cfg)
    save_dataset(ds, out)
    families = len({s.family_id for s in ds.subjects})
    print(f"wrote {out}: subjects={len(ds)} families={families} N={ds.n_regions} "
          f"d={ds.n_timepoints} snr={cfg.snr} modality={ds.modality}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench
    from .config import load_run_config
    from .evalstats.report import write_report

    cfg = load_run_config(args.config)
    for key in ("seed", "jobs", "out"):
        if key in args:
            setattr(cfg, key, getattr(args, key))
    if cfg.jobs < 1:
        raise ConfigError("jobs", "must be at least 1")
    datasets = cfg.datasets()
    report = run_bench(datasets, cfg.models, seed=cfg.seed, jobs=cfg.jobs, train_config=cfg.training,
                       krr_config=cfg.krr, k=cfg.folds)
    paths = write_report(report, cfg.out)
    print(f"{len(report.cells)} cells, {len(report.comparisons)} comparisons, fold plan {report.plan}")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def report_labels(paths: list[Path]) -> list[str]:
    """File stem per report, widened to parent/stem and then numbered until unique."""
    labels = [p.stem for p in paths]
    if len(set(labels)) < len(labels):
        labels = [f"{p.parent.name}/{p.stem}" if p.parent.name else p.stem for p in paths]
    if len(set(labels)) < len(labels):
        labels = [f"{label}#{i + 1}" for i, label in enumerate(labels)]
    return labels


def merge_reports(parsed: list, stems: list[str]):
    """Pool cells from several reports; a (model, modality) seen twice is relabeled model@stem."""
    counts = Counter((c.model, c.modality) for rep in parsed for c in rep.cells)
    cells = []
    for rep, stem in zip(parsed, stems):
        for c in rep.cells:
            if counts[(c.model, c.modality)] > 1:
                c.model = f"{c.model}@{stem}"
            cells.append(c)
    return cells


def cmd_stats(args) -> int:
    from .dataio import atomic_write
    from .evalstats.report import pairwise_report, read_report_csv, stats_csv

    parsed = [read_report_csv(p) for p in args.reports]
    ref = parsed[0]
    for path, rep in zip(args.reports[1:], parsed[1:]):
        if (rep.plan, rep.n_subjects, rep.k) != (ref.plan, ref.n_subjects, ref.k):
            _err(f"{path}: fold plan {rep.plan} (n={rep.n_subjects}, k={rep.k}) does not match "
                 f"{args.reports[0]}: {ref.plan} (n={ref.n_subjects}, k={ref.k})")
            return EXIT_INCOMPATIBLE
    cells = merge_reports(parsed, report_labels(args.reports))
    report = pairwise_report(cells, ref.n_subjects)
    out = getattr(args, "out", Path("."))
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "stats.csv", stats_csv(report))
    print(f"wrote {out / 'stats.csv'} ({len(report.comparisons)} comparisons)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck, worst_offender

    results = run_gradcheck(getattr(args, "seed", 0))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.op:28s} rel_err={r.rel_err:.3e} tol={r.tol:.0e}")
    worst = worst_offender(results)
    if not all(r.passed for r in results):
        print(f"worst offender: {worst.op} rel_err={worst.rel_err:.3e}")
        return EXIT_CHECK
    print(f"all {len(results)} checks passed (worst: {worst.op} rel_err={worst.rel_err:.3e})")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "bench": cmd_bench, "stats": cmd_stats, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    from .bench import IncompatibleDataError
    from .evalstats.report import ReportError
    from .training import TrainingError

    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        _err(f"config: {err}")
        return EXIT_CONFIG
    except TrainingError as err:
        _err(f"training failed for model={err.model} modality={err.modality} fold={err.fold} "
             f"trial={err.trial}: {err}")
        return EXIT_TRAINING
    except (ReportError, IncompatibleDataError) as err:
        _err(str(err))
        return EXIT_INCOMPATIBLE
    except DataError as err:
        _err(f"data: {err}")
        return EXIT_CONFIG
    except OSError as err:
        _err(f"{err.filename}: {err.strerror}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
