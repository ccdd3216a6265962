"""Command-line interface of the design campaign.

Subcommands: ``run`` (seeded optimizer runs with persistence), ``analyze``
(post-hoc analysis over run artifacts), ``trace`` (ray-trace dump of one
design), ``refine`` (standalone local refinement) and ``classify``
(standalone critical-point report).

Exit codes: 0 success, 1 usage error, 2 configuration or I/O error,
3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .analysis import classify_critical_point
from .campaign import (
    CampaignConfig,
    ConfigError,
    analyze_campaign,
    load_campaign_config,
    run_campaign,
)
from .optics import (
    DomainViolation,
    MeritEvaluator,
    MeritWeights,
    load_prescription,
    trace_design,
)
from .refine import RefineSettings, lm_refine

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_INTERNAL = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit code 1
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="tripletopt",
                     description="Niching + damped-least-squares lens "
                                 "design campaign")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the configured runs")
    p_run.add_argument("--config", type=Path, default=None)
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
    p_run.add_argument("--out", type=Path, default=None,
                       help="override the output directory")
    p_run.add_argument("--runs", type=int, default=None,
                       help="override the run count")

    p_an = sub.add_parser("analyze", help="analyze persisted run artifacts")
    p_an.add_argument("--config", type=Path, default=None)
    p_an.add_argument("--out", type=Path, default=None)
    p_an.add_argument("--known-optima", type=Path, default=None)

    help_by_name = {
        "trace": "ray-trace one curvature vector and dump the hits",
        "refine": "damped least squares from one curvature vector",
        "classify": "critical-point report for one curvature vector",
    }
    for name, extra in (("trace", "--chart"), ("refine", None),
                        ("classify", None)):
        p = sub.add_parser(name, help=help_by_name[name])
        p.add_argument("--prescription", default="cooke_default")
        p.add_argument("curvatures", nargs=6, type=float, metavar="c",
                       help="six curvatures, 1/mm (prefix with -- when "
                            "values are negative)")
        if extra:
            p.add_argument(extra, type=Path, default=None,
                           help="write a spot chart to this path")
    return parser


def _normalize_argv(argv):
    """Insert ``--`` before trailing numeric arguments so negative
    curvatures in scientific notation survive option parsing."""
    if not argv or "--" in argv:
        return argv
    for i, token in enumerate(argv):
        if i and token.startswith("-"):
            try:
                float(token)
            except ValueError:
                continue
            return argv[:i] + ["--"] + argv[i:]
    return argv


def _load_config(args) -> CampaignConfig:
    cfg = load_campaign_config(args.config) if args.config is not None \
        else CampaignConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["master_seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["output_dir"] = str(args.out)
    if getattr(args, "runs", None) is not None:
        updates["runs"] = args.runs
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    run_campaign(cfg, log=lambda msg: print(msg, file=sys.stderr))
    print(f"campaign complete: {cfg.runs} runs under {cfg.output_dir}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    cfg = _load_config(args)
    report = analyze_campaign(
        cfg, known_optima=args.known_optima,
        log=lambda msg: print(msg, file=sys.stderr))
    print(f"unique feasible evaluations:   {report.unique_feasible}")
    print(f"unique infeasible evaluations: {report.unique_infeasible}")
    print(f"fraction infeasible:           {report.fraction_infeasible:.4f}")
    print(f"infeasible inside the domain:  {report.infeasible_inside_domain}")
    print(f"deduplicated optima:           {len(report.found_points)}")
    if report.match_table is not None:
        hit = sum(1 for r in report.match_table if r["hit_runs"] > 0)
        print(f"known optima located:          {hit}/{len(report.match_table)}")
    print(f"analysis artifacts under {Path(cfg.output_dir) / 'analysis'}")
    return EXIT_OK


def _cmd_trace(args) -> int:
    pres = load_prescription(str(args.prescription))
    c = np.array(args.curvatures, dtype=float)
    from .optics import check_domain

    check_domain(c)
    out = trace_design(pres.with_curvatures(c))
    if not out.feasible:
        print(f"infeasible: {out.failure_kind.value}")
        return EXIT_OK
    print(f"spot_rms {out.spot_rms!r}")
    print(f"effl     {out.effl!r}")
    print(f"pmag     {out.pmag!r}")
    print(f"object_distance {out.object_distance!r}")
    print("ray height x y dx dy")
    nr = pres.rays_per_height
    for i in range(out.hits.shape[0]):
        print(f"{i} {i // nr} {out.hits[i, 0]!r} {out.hits[i, 1]!r} "
              f"{out.displacements[i, 0]!r} {out.displacements[i, 1]!r}")
    if args.chart is not None:
        from .charts import spot_chart

        spot_chart(args.chart, out.hits, nr, out.spot_rms)
        print(f"spot chart written to {args.chart}", file=sys.stderr)
    return EXIT_OK


def _cmd_refine(args) -> int:
    pres = load_prescription(str(args.prescription))
    evaluator = MeritEvaluator(pres, MeritWeights())
    c = np.array(args.curvatures, dtype=float)
    lo = np.full(6, -0.25)
    hi = np.full(6, 0.25)
    res = lm_refine(evaluator.residuals_batch, c, lo, hi, RefineSettings())
    print(f"merit_before {res.merit_before!r}")
    print(f"merit_after  {res.merit_after!r}")
    print(f"iterations   {res.iterations}")
    print(f"converged    {res.converged}")
    print(f"termination  {res.termination.value}")
    print("refined " + " ".join(repr(v) for v in res.refined))
    return EXIT_OK


def _cmd_classify(args) -> int:
    pres = load_prescription(str(args.prescription))
    evaluator = MeritEvaluator(pres, MeritWeights())
    c = np.array(args.curvatures, dtype=float)
    report = classify_critical_point(evaluator.unchecked_merit, c)
    print(f"verdict          {report.verdict.value}")
    print(f"consensus_delta  {report.consensus_delta!r}")
    print(f"gradient_norm    {report.gradient_norm!r}")
    print(f"condition_number {report.condition_number!r}")
    print(f"dominance_ratio  {report.dominance_ratio!r}")
    best = int(np.argmin(report.gradient_norm_per_delta))
    print("eigenvalues " + " ".join(
        repr(v) for v in report.hessian_spectrum_per_delta[best]))
    for delta, g in zip(report.delta_sweep,
                        report.gradient_norm_per_delta):
        print(f"delta {delta:g} gradient_norm {g!r}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "analyze": _cmd_analyze,
    "trace": _cmd_trace,
    "refine": _cmd_refine,
    "classify": _cmd_classify,
}


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(_normalize_argv(list(argv)))
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, OSError, DomainViolation,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
