"""
Command-line surface for factorlab.

Subcommands: gen, sym, pp, alloc, verify, report. Exit codes: 0 on success,
1 on a domain or verification failure, 2 on usage errors and malformed input.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from config import settings
from errors import FactorLabError, UsageError
from models import Scenario, ScenarioKind, ScenarioManifest
from pipelines.allocation import balance
from pipelines.campaigns import CAMPAIGNS, PIPELINES, balance_residuals, run_campaign, verify_balance
from pipelines.extraction import PointProcessExtractor
from services.generators import default_manifest_path, generate, load_manifest, planted_truth, save_manifest
from services.measure_io import (
    atomic_write_text,
    read_measure,
    serialize_measure,
    serialize_points,
    write_allocation,
    write_json,
    write_measure,
    write_points,
)
from services.report_writer import (
    read_report_csv,
    summary_table,
    write_certificate_csv,
    write_histogram_svg,
    write_report_csv,
)
from services.symmetry import symmetry_group

logger = logging.getLogger(__name__)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Scenario seed")
    common.add_argument("--n", type=int, default=16, help="Grid resolution per axis")
    common.add_argument("--L", type=float, default=1.0, help="Torus side length")
    common.add_argument("--d", type=int, default=2, help="Dimension (1..3)")
    common.add_argument("--tol", type=float, default=None, help="Absolute symmetry tolerance")
    common.add_argument("--m-max", dest="m_max", type=int, default=None, help="Largest epsilon index M")
    common.add_argument("--jobs", type=int, default=None, help="Campaign worker processes")
    common.add_argument("--out", default=None, help="Output file or directory")
    common.add_argument("--log-level", dest="log_level", default=None, help="Logging level")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="factorlab", description="Factor point processes and balancing allocations on the torus")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Generate a scenario measure")
    gen.add_argument("--kind", required=True, choices=[k.value for k in ScenarioKind])
    gen.add_argument("--param", action="append", default=[], metavar="KEY=JSON",
                     help="Scenario parameter, e.g. --param axes=[0] or --param intensity=6")
    gen.add_argument("--manifest", default=None, help="Append the scenario and its planted truth to this manifest")

    sym = sub.add_parser("sym", parents=[common], help="Print the symmetry group of a measure as CSV")
    sym.add_argument("measure")

    pp = sub.add_parser("pp", parents=[common], help="Extract the factor point process of a measure")
    pp.add_argument("measure")
    pp.add_argument("--trace", default=None, help="Write the extraction trace as JSON")

    alloc = sub.add_parser("alloc", parents=[common], help="Balancing allocation from phi to psi")
    alloc.add_argument("phi")
    alloc.add_argument("psi")
    alloc.add_argument("--certificate", default=None, help="Per-target residual CSV")

    verify = sub.add_parser("verify", parents=[common], help="Run a verification campaign")
    verify.add_argument("--campaign", required=True, choices=list(CAMPAIGNS) + ["all"])
    verify.add_argument("--manifest", default=None, help="Scenario manifest (default: <corpus_dir>/manifest.json)")
    verify.add_argument("--shifts", type=int, default=20, help="Shifts per sample (equivariance)")
    verify.add_argument("--count", type=int, default=100, help="Seeds for chart and oracle campaigns")
    verify.add_argument("--pipeline", default="extract", choices=sorted(PIPELINES))
    verify.add_argument("--svg", action="store_true", help="Also write a histogram of check values")

    report = sub.add_parser("report", parents=[common], help="Summarize report CSV files")
    report.add_argument("reports", nargs="+")
    return parser


def _parse_params(items: Sequence[str]) -> dict:
    params = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"parameter {item!r} is not KEY=VALUE")
        try:
            params[key] = json.loads(raw)
        except ValueError:
            params[key] = raw
    return params


def cmd_gen(args) -> int:
    scenario = Scenario(seed=args.seed, kind=ScenarioKind(args.kind), d=args.d, L=args.L, n=args.n,
                        parameters=_parse_params(args.param))
    mu = generate(scenario)
    if args.out:
        write_measure(args.out, mu)
    else:
        sys.stdout.write(serialize_measure(mu))

    if args.manifest:
        path = Path(args.manifest)
        manifest = load_manifest(path) if path.exists() else ScenarioManifest(name=path.stem, scenarios=[])
        scenario = scenario.model_copy(update={"expected": planted_truth(scenario)})
        manifest.scenarios.append(scenario)
        save_manifest(path, manifest)
        logger.info(f"Appended scenario seed={scenario.seed} to {path}")
    return 0


def cmd_sym(args) -> int:
    group = symmetry_group(read_measure(args.measure), args.tol)
    generators = ";".join(":".join(str(x) for x in g) for g in group.generator_indices)
    lines = ["generators,gap,v_dimension,order,closed",
             f"{generators},{group.gap!r},{group.v_dimension},{group.order},{str(group.closed).lower()}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_pp(args) -> int:
    mu = read_measure(args.measure)
    trace = PointProcessExtractor(m_max=args.m_max, tol=args.tol).trace(mu)
    if args.out:
        write_points(args.out, trace.representatives)
    else:
        sys.stdout.write(serialize_points(trace.representatives))
    if args.trace:
        write_json(args.trace, trace)
    return 0


def cmd_alloc(args) -> int:
    phi = read_measure(args.phi)
    psi = read_measure(args.psi)
    alloc = balance(phi, psi, args.tol)
    if args.out:
        write_allocation(args.out, alloc)
    report = verify_balance(alloc, phi, psi, seed=args.seed)
    if args.certificate:
        write_certificate_csv(balance_residuals(alloc, psi), args.certificate)
    print(summary_table([report]))
    return report.exit_code


def cmd_verify(args) -> int:
    manifest_path = Path(args.manifest) if args.manifest else default_manifest_path()
    manifest: Optional[ScenarioManifest] = load_manifest(manifest_path) if manifest_path.exists() else None
    campaigns = list(CAMPAIGNS) if args.campaign == "all" else [args.campaign]
    if args.campaign == "all" and manifest is None:
        raise UsageError(f"no scenario manifest at {manifest_path}")

    reports = []
    for name in campaigns:
        report = run_campaign(name, manifest, jobs=args.jobs, shifts=args.shifts, count=args.count,
                              pipeline_id=args.pipeline)
        reports.append(report)
        if args.out:
            out_dir = Path(args.out)
            write_report_csv(report, out_dir / f"{name}.csv")
            if args.svg:
                write_histogram_svg([r.value for r in report.sorted_records()], out_dir / f"{name}.svg",
                                    title=f"{name} check values")
    print(summary_table(reports))
    return max(r.exit_code for r in reports)


def cmd_report(args) -> int:
    reports = [read_report_csv(p) for p in args.reports]
    print(summary_table(reports))
    if args.out:
        values = [r.value for report in reports for r in report.sorted_records()]
        write_histogram_svg(values, args.out, title="check values")
    return max(r.exit_code for r in reports)


COMMANDS = {
    "gen": cmd_gen,
    "sym": cmd_sym,
    "pp": cmd_pp,
    "alloc": cmd_alloc,
    "verify": cmd_verify,
    "report": cmd_report,
}


def run_pipeline(argv: Optional[List[str]] = None) -> int:
    """
    Parse the command line, run one subcommand and return its exit code.

    FactorLabError is caught here and mapped to its exit_code; argparse usage
    errors exit with 2.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    logging.basicConfig(
        level=args.log_level or settings.log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return COMMANDS[args.command](args)
    except FactorLabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Invalid parameters: {e}")
        print(f"error: invalid parameters: {e}", file=sys.stderr)
        return UsageError.exit_code
