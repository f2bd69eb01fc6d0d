"""``paleo`` command line: simulate, fit, report, verify.

Exit codes: 0 success, 2 input or configuration error, 3 optimizer
divergence, 4 verification failure.  See ``paleo.config`` for how the
configuration layers combine.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import __version__, config as cfgmod
from . import data, report, verify
from .errors import ConfigurationError, DataFormatError, DivergenceError, PaleoError
from .infer import fit_svi
from .model import build_priors

log = logging.getLogger("paleo")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGENCE = 3
EXIT_VERIFY = 4

COUNTS_FILE = "counts.csv"
TRUTH_FILE = "truth.json"
FIT_FILE = "fit.json"
SUMMARY_FILE = "summary.json"
TRACE_FILE = "elbo_trace.csv"
TRAJECTORY_SVG = "trajectory.svg"
DENSITY_SVG = "densities.svg"
VERIFY_FILE = "verify.json"


class InputError(PaleoError):
    """Missing or unreadable input, or an unwritable output location."""


def write_outputs(directory: Path, files: dict[str, str]) -> list[Path]:
    """Write every file or none: stage to temporaries, then rename into place."""
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {directory}: {exc.strerror}") from None
    staged: list[tuple[str, Path]] = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=directory)
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            staged.append((tmp, directory / name))
        for tmp, final in staged:
            os.replace(tmp, final)
    except OSError as exc:
        for tmp, _ in staged:
            Path(tmp).unlink(missing_ok=True)
        raise InputError(f"cannot write to {directory}: {exc.strerror}") from None
    return [final for _, final in staged]


def _read_text(path: Path, what: str) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"{what} not found: {path}") from None
    except OSError as exc:
        raise InputError(f"cannot read {what} {path}: {exc.strerror}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(run: cfgmod.RunConfig) -> int:
    truth = run.synthetic_truth()
    counts = data.simulate_dataset(truth, run.grid)
    buf = io.StringIO()
    data.write_counts_csv(counts, run.grid, buf)
    tbuf = io.StringIO()
    data.write_truth_json(truth, run.grid, tbuf, extra={"config": run.document})
    written = write_outputs(run.output_dir, {COUNTS_FILE: buf.getvalue(), TRUTH_FILE: tbuf.getvalue()})
    log.info("simulate: wrote %s", ", ".join(map(str, written)))
    return EXIT_OK


def _load_counts(run: cfgmod.RunConfig):
    if run.settlements_path:
        text = _read_text(Path(run.settlements_path), "settlement file")
        records = data.parse_settlements(io.StringIO(text))
        return data.bin_occupations(records, run.grid, run.binning_rule), run.grid
    path = Path(run.counts_path) if run.counts_path else run.output_dir / COUNTS_FILE
    text = _read_text(path, "counts file")
    return data.read_counts_csv(io.StringIO(text), run.grid.observation_year)


def cmd_fit(run: cfgmod.RunConfig) -> int:
    counts, grid = _load_counts(run)
    priors = build_priors(grid, run.priors)
    fit = fit_svi(counts, priors, grid, run.svi)
    summary = report.summarize_guide(fit.guide, grid)
    fit_doc = report.fit_to_dict(fit)
    fit_doc["run_config"] = run.document
    fit_doc["grid"] = grid.to_dict()
    summary_json, tables = report.export_tables(summary, fit, run.document)
    files = {FIT_FILE: report.dumps(fit_doc), SUMMARY_FILE: summary_json, TRACE_FILE: report.elbo_trace_csv(fit)}
    files.update(tables)
    write_outputs(run.output_dir, files)
    log.info("fit: %d iterations in %.2fs, final ELBO %s", run.svi.iterations, fit.wall_time, fit.elbo_trace[-1][1] if fit.elbo_trace else "n/a")
    return EXIT_OK


def cmd_report(run: cfgmod.RunConfig, summary_path: str | None = None) -> int:
    path = Path(summary_path) if summary_path else run.output_dir / SUMMARY_FILE
    text = _read_text(path, "summary artifact")
    try:
        doc = json.loads(text)
        summary = report.PosteriorSummary.from_dict(doc["summary"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path} is not a summary artifact: {exc}") from None
    echo = {"report_config": run.document, "fit_config": doc.get("config")}
    files = {
        TRAJECTORY_SVG: report.embed_metadata(report.render_trajectory_svg(summary), echo),
        DENSITY_SVG: report.embed_metadata(report.render_density_svg(summary), echo),
    }
    write_outputs(run.output_dir, files)
    return EXIT_OK


def cmd_verify(run: cfgmod.RunConfig, quick: bool = False) -> int:
    v = run.verify
    checks = [verify.gradient_check(n_samples=int(v["gradient_samples"]), threshold=float(v["gradient_threshold"]))]
    if not quick:
        checks.append(verify.oracle_check(svi=run.svi, mcmc=run.mcmc, threshold=float(v["oracle_threshold"])))
        checks.append(
            verify.coverage_check(
                n_replicates=int(v["coverage_replicates"]),
                svi=run.svi,
                grid=run.grid,
                settings=run.priors,
                bounds=(float(v["coverage_min"]), float(v["coverage_max"])),
            )
        )
    failed = [c.name for c in checks if not c.passed]
    doc = {
        "passed": not failed,
        "quick": quick,
        "checks": [c.to_dict() for c in checks],
        "config": run.document,
    }
    write_outputs(run.output_dir, {VERIFY_FILE: report.dumps(doc)})
    for c in checks:
        print(c.line())
    if failed:
        print(f"paleo verify: failed check(s): {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config merged over the packaged Cyprus defaults")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. svi.learning_rate=0.01 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides PALEO_SEED and the config)")
    common.add_argument("--out-dir", help="directory for artifacts (config key output_dir)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="paleo", description="Bayesian population reconstruction from settlement counts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="draw a synthetic counts file from the configured truth")

    fit = sub.add_parser("fit", parents=[common], help="fit the variational posterior to a counts file")
    src = fit.add_mutually_exclusive_group()
    src.add_argument("--data", help="binned counts CSV (default: <out-dir>/counts.csv)")
    src.add_argument("--settlements", help="settlement records CSV, binned with --rule")
    fit.add_argument("--rule", choices=data.RULES, help="contemporaneity rule for settlement records")
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--learning-rate", type=float)
    fit.add_argument("--mc-samples", type=int)

    rep = sub.add_parser("report", parents=[common], help="render SVG figures from a fit summary")
    rep.add_argument("--summary", help=f"summary JSON (default: <out-dir>/{SUMMARY_FILE})")
    rep.add_argument("--band", choices=["iqr"], help="shaded band; only the interquartile range is available")

    ver = sub.add_parser("verify", parents=[common], help="run the gradient, MCMC-oracle and coverage checks")
    ver.add_argument("--quick", action="store_true", help="gradient check only")
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict:
    flags = {"seed": args.seed, "output_dir": args.out_dir}
    if args.command == "fit":
        flags.update({
            "data.counts": args.data,
            "data.settlements": args.settlements,
            "data.binning_rule": args.rule,
            "svi.iterations": args.iterations,
            "svi.learning_rate": args.learning_rate,
            "svi.mc_samples": args.mc_samples,
        })
    elif args.command == "report":
        flags["report.band"] = args.band
    return flags


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        doc = cfgmod.resolve(args.config, args.overrides, **_flag_overrides(args))
        run = cfgmod.RunConfig.from_dict(doc)
        if args.command == "simulate":
            return cmd_simulate(run)
        if args.command == "fit":
            return cmd_fit(run)
        if args.command == "report":
            return cmd_report(run, args.summary)
        return cmd_verify(run, args.quick)
    except DivergenceError as exc:
        print(f"paleo {args.command}: diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (InputError, ConfigurationError, DataFormatError) as exc:
        print(f"paleo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PaleoError as exc:
        print(f"paleo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

