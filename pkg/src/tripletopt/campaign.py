"""Campaign orchestration: seeded runs, persistence, hybrid refinement and
the analysis battery, shared by the command-line tool and the test suite."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as tio
from .analysis import (
    DELTA_SWEEP,
    DEFAULT_DUPLICATE_TOL,
    InfeasibilityStudyConfig,
    InsufficientPopulation,
    classify_critical_point,
    distance_study,
    filter_duplicates,
    infeasibility_study,
)
from .niching import NichingConfig, run_niching
from .optics import (
    MeritEvaluator,
    MeritWeights,
    Prescription,
    load_prescription,
    trace_batch,
)
from .refine import RefineSettings, refine_archive


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisSettings:
    duplicate_tol: float = DEFAULT_DUPLICATE_TOL
    delta_sweep: tuple[float, ...] = DELTA_SWEEP
    match_tol: float | None = None     # defaults to duplicate_tol
    infeasibility: InfeasibilityStudyConfig = field(
        default_factory=InfeasibilityStudyConfig)

    @property
    def effective_match_tol(self) -> float:
        return self.duplicate_tol if self.match_tol is None else self.match_tol


@dataclass(frozen=True)
class CampaignConfig:
    prescription: str = "cooke_default"
    weights: MeritWeights = field(default_factory=MeritWeights)
    niching: NichingConfig = field(default_factory=NichingConfig)
    refine: RefineSettings = field(default_factory=RefineSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    runs: int = 5
    master_seed: int = 2025
    output_dir: str = "campaign_out"

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("run count must be >= 1")

    def load_prescription(self) -> Prescription:
        return load_prescription(self.prescription)

    def run_seeds(self) -> list[np.random.SeedSequence]:
        return np.random.SeedSequence(self.master_seed).spawn(self.runs)


def config_to_dict(cfg: CampaignConfig) -> dict:
    data = {
        "prescription": cfg.prescription,
        "weights": asdict(cfg.weights),
        "niching": {**asdict(cfg.niching),
                    "domain_lo": list(cfg.niching.domain_lo),
                    "domain_hi": list(cfg.niching.domain_hi)},
        "refine": asdict(cfg.refine),
        "analysis": {
            "duplicate_tol": cfg.analysis.duplicate_tol,
            "delta_sweep": list(cfg.analysis.delta_sweep),
            "match_tol": cfg.analysis.match_tol,
            "infeasibility": asdict(cfg.analysis.infeasibility),
        },
        "runs": cfg.runs,
        "master_seed": cfg.master_seed,
        "output_dir": cfg.output_dir,
    }
    return data


def config_from_dict(data: dict) -> CampaignConfig:
    try:
        weights = MeritWeights(**data.get("weights", {}))
        nich = dict(data.get("niching", {}))
        if "domain_lo" in nich:
            nich["domain_lo"] = np.asarray(nich["domain_lo"], dtype=float)
        if "domain_hi" in nich:
            nich["domain_hi"] = np.asarray(nich["domain_hi"], dtype=float)
        niching = NichingConfig(**nich)
        refine = RefineSettings(**data.get("refine", {}))
        ana = dict(data.get("analysis", {}))
        infeas = InfeasibilityStudyConfig(**ana.pop("infeasibility", {}))
        if "delta_sweep" in ana:
            ana["delta_sweep"] = tuple(float(v) for v in ana["delta_sweep"])
        analysis = AnalysisSettings(infeasibility=infeas, **ana)
        return CampaignConfig(
            prescription=data.get("prescription", "cooke_default"),
            weights=weights, niching=niching, refine=refine,
            analysis=analysis, runs=int(data.get("runs", 5)),
            master_seed=int(data.get("master_seed", 2025)),
            output_dir=str(data.get("output_dir", "campaign_out")))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid campaign configuration: {exc}") from exc


def load_campaign_config(path: str | Path) -> CampaignConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    cfg = config_from_dict(data)
    if cfg.prescription != "cooke_default" \
            and not Path(cfg.prescription).is_file():
        raise ConfigError(
            f"prescription file not found: {cfg.prescription}")
    return cfg


def save_campaign_config(cfg: CampaignConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------
# Run stage
# ----------------------------------------------------------------------

RUN_FILES = ("archive.csv", "refine.csv", "optima.csv", "peaks.csv",
             "meta.json")


def run_dir(out_dir: Path | str, index: int) -> Path:
    return Path(out_dir) / f"run_{index + 1:02d}"


def execute_run(cfg: CampaignConfig, evaluator: MeritEvaluator,
                seed: np.random.SeedSequence, out: Path) -> dict:
    """One seeded run: global search, tail refinement, deduplication."""
    run = run_niching(cfg.niching, evaluator, seed)
    if run.aborted:
        raise RuntimeError(f"optimizer aborted: {run.error}")
    if run.evaluations > cfg.niching.budget:
        raise RuntimeError("evaluation budget exceeded")

    results, skipped = refine_archive(
        run.archive, cfg.niching.archive_depth, evaluator.residuals_batch,
        cfg.niching.domain_lo, cfg.niching.domain_hi, cfg.refine)

    out.mkdir(parents=True, exist_ok=True)
    tio.write_archive(out / "archive.csv", run.archive)
    tio.write_refine_results(out / "refine.csv", results)
    tio.write_peaks(out / "peaks.csv", run.final_peaks)

    if results:
        pts = np.stack([r.refined for r in results])
        merits = np.array([r.merit_after for r in results])
        dedup = filter_duplicates(pts, merits, cfg.analysis.duplicate_tol)
        tio.write_optima(out / "optima.csv", dedup.points, dedup.merits,
                         dedup.cluster_sizes)
        n_optima = len(dedup.points)
    else:
        tio.write_optima(out / "optima.csv", np.empty((0, 6)), np.empty(0))
        n_optima = 0

    meta = {
        "seed_spawn_key": [int(k) for k in seed.spawn_key],
        "master_seed": cfg.master_seed,
        "evaluations": run.evaluations,
        "generations": run.generations,
        "feasible_evaluations": int(sum(r.feasible for r in run.archive)),
        "refined": len(results),
        "refine_skipped_infeasible": skipped,
        "optima": n_optima,
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


def run_campaign(cfg: CampaignConfig, out_dir: str | Path | None = None,
                 log=lambda msg: None) -> list[dict]:
    """Execute all configured runs; returns the per-run metadata."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    pres = cfg.load_prescription()
    evaluator = MeritEvaluator(pres, cfg.weights)
    metas = []
    for i, seed in enumerate(cfg.run_seeds()):
        log(f"run {i + 1}/{cfg.runs} (seed {seed.spawn_key})")
        meta = execute_run(cfg, evaluator, seed, run_dir(out, i))
        log(f"  {meta['evaluations']} evaluations, "
            f"{meta['feasible_evaluations']} feasible, "
            f"{meta['optima']} optima")
        metas.append(meta)
    return metas


# ----------------------------------------------------------------------
# Analysis stage
# ----------------------------------------------------------------------

@dataclass
class CampaignReport:
    run_optima: list[tuple[np.ndarray, np.ndarray]]
    found_points: np.ndarray
    found_merits: np.ndarray
    unique_feasible: int
    unique_infeasible: int
    infeasible_inside_domain: int
    fraction_infeasible: float
    match_table: list[dict] | None
    manifest: list[str]

    @property
    def unique_total(self) -> int:
        return self.unique_feasible + self.unique_infeasible


def _unique_rows(stacked: np.ndarray) -> np.ndarray:
    return np.unique(stacked, axis=0)


def discover_runs(out_dir: Path | str) -> list[Path]:
    out = Path(out_dir)
    runs = sorted(p for p in out.glob("run_*") if p.is_dir())
    if not runs:
        raise FileNotFoundError(f"no run_* directories under {out}")
    for p in runs:
        for name in ("archive.csv", "optima.csv"):
            if not (p / name).is_file():
                raise FileNotFoundError(f"missing artifact {p / name}")
    return runs


def analyze_campaign(cfg: CampaignConfig, out_dir: str | Path | None = None,
                     known_optima: str | Path | None = None,
                     log=lambda msg: None) -> CampaignReport:
    """Post-hoc analysis over the persisted run artifacts.

    Emits critical-point classifications, distance studies, the
    infeasibility portrait, charts and a summary document under
    ``<out>/analysis``; returns the aggregate report.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    runs = discover_runs(out)
    ana_dir = out / "analysis"
    ana_dir.mkdir(parents=True, exist_ok=True)
    manifest: list[str] = []

    pres = cfg.load_prescription()
    evaluator = MeritEvaluator(pres, cfg.weights)

    # Pool archives and per-run optima.
    archives = [tio.read_archive(p / "archive.csv") for p in runs]
    run_optima = [tio.read_optima(p / "optima.csv") for p in runs]
    all_vectors = np.concatenate(
        [np.stack([r.vector for r in arc]) for arc in archives])
    all_feasible = np.concatenate(
        [np.array([r.feasible for r in arc], dtype=bool) for arc in archives])

    feas_unique = _unique_rows(all_vectors[all_feasible]) \
        if all_feasible.any() else np.empty((0, 6))
    infeas_unique = _unique_rows(all_vectors[~all_feasible]) \
        if (~all_feasible).any() else np.empty((0, 6))
    feasible_merits = [r.merit for arc in archives for r in arc if r.feasible]
    if feasible_merits and max(feasible_merits) >= cfg.weights.infeasible_penalty:
        raise RuntimeError("infeasible penalty does not dominate the "
                           "feasible merit range")

    # Campaign-level optima: pool per-run deduplicated optima, dedup again.
    pools = [p for p, _ in run_optima if len(p)]
    if pools:
        pool_pts = np.concatenate(pools)
        pool_merits = np.concatenate([m for _, m in run_optima if len(m)])
        dd = filter_duplicates(pool_pts, pool_merits,
                               cfg.analysis.duplicate_tol)
        found_pts, found_merits = dd.points, dd.merits
    else:
        found_pts = np.empty((0, 6))
        found_merits = np.empty(0)

    # Critical-point classification at the found optima.
    def merit_unchecked(x: np.ndarray) -> float:
        return evaluator.unchecked_merit(x)

    def merit_unchecked_batch(x: np.ndarray) -> np.ndarray:
        bt = trace_batch(np.atleast_2d(x), pres)
        vals = np.full(bt.feasible.size, cfg.weights.infeasible_penalty)
        f = bt.feasible
        if f.any():
            w = cfg.weights
            vals[f] = (w.w1 * bt.spot_rms[f]
                       + w.w2 * (bt.effl[f] - w.effl_target) ** 2
                       + w.w3 * (bt.pmag[f] - w.pmag_target) ** 2)
        return vals

    log(f"classifying {len(found_pts)} optima")
    reports = [classify_critical_point(
        merit_unchecked, pt, cfg.analysis.delta_sweep,
        f_batch=merit_unchecked_batch) for pt in found_pts]
    tio.write_critical_points(ana_dir / "critical_points.csv", reports,
                              found_merits)
    manifest.append("critical_points.csv")

    # Distance studies.
    from . import charts

    if len(found_pts) >= 2:
        study = distance_study(found_pts, label="found-within",
                               merits=found_merits)
        iu = np.stack(np.triu_indices(len(found_pts), k=1), axis=1)
        tio.write_distances(ana_dir / "distances_found.csv",
                            study.distances, iu)
        manifest.append("distances_found.csv")
        charts.distance_chart(ana_dir / "chart_distances.svg", study,
                              found_merits)
        manifest.append("chart_distances.svg")
    else:
        (ana_dir / "distances_found.csv").write_text(
            ",".join(tio.DISTANCES_HEADER) + "\n", encoding="utf-8")
        manifest.append("distances_found.csv")
        log("fewer than two optima: distance study degenerate")

    match_rows = None
    if known_optima is not None:
        known_pts, known_merits = tio.read_known_optima(known_optima)
        tol = cfg.analysis.effective_match_tol
        cross = distance_study(known_pts, found_pts, label="known-vs-found") \
            if len(found_pts) else None
        if cross is not None:
            pair_idx = np.stack(
                [np.repeat(np.arange(len(known_pts)), len(found_pts)),
                 np.tile(np.arange(len(found_pts)), len(known_pts))], axis=1)
            tio.write_distances(ana_dir / "distances_known_vs_found.csv",
                                cross.distances, pair_idx)
            manifest.append("distances_known_vs_found.csv")
        match_rows = []
        for k, kp in enumerate(known_pts):
            hits = 0
            best = math.inf
            for pts_r, _ in run_optima:
                if len(pts_r) == 0:
                    continue
                d = float(np.linalg.norm(pts_r - kp[None, :], axis=1).min())
                best = min(best, d)
                if d <= tol:
                    hits += 1
            match_rows.append({
                "known_index": k, "hit_runs": hits, "total_runs": len(runs),
                "best_distance": best,
                "best_merit": float(known_merits[k]),
            })
        tio.write_rows(ana_dir / "match_table.csv", tio.MATCH_HEADER,
                       ((r["known_index"], r["hit_runs"], r["total_runs"],
                         r["best_distance"], r["best_merit"])
                        for r in match_rows))
        manifest.append("match_table.csv")

    # Infeasibility portrait over unique interior infeasible points.
    from .analysis import strictly_inside

    lo, hi = cfg.niching.domain_lo, cfg.niching.domain_hi
    inside_mask = strictly_inside(infeas_unique, lo, hi) \
        if len(infeas_unique) else np.zeros(0, dtype=bool)
    inside_count = int(inside_mask.sum())
    infeas_cfg = cfg.analysis.infeasibility
    study = None
    if inside_count >= infeas_cfg.subsample:
        study = infeasibility_study(infeas_unique, infeas_cfg, lo, hi)
        tio.write_infeasibility(ana_dir / "infeasibility.csv", study)
        manifest.append("infeasibility.csv")
        charts.infeasibility_chart(ana_dir / "chart_infeasibility.svg",
                                   study)
        manifest.append("chart_infeasibility.svg")
    else:
        log(f"infeasibility study skipped: {inside_count} interior "
            f"infeasible points < subsample {infeas_cfg.subsample}")

    n_unique = len(feas_unique) + len(infeas_unique)
    report = CampaignReport(
        run_optima=run_optima, found_points=found_pts,
        found_merits=found_merits,
        unique_feasible=len(feas_unique),
        unique_infeasible=len(infeas_unique),
        infeasible_inside_domain=inside_count,
        fraction_infeasible=len(infeas_unique) / n_unique if n_unique else 0.0,
        match_table=match_rows, manifest=manifest)

    _write_summary(ana_dir / "report.md", cfg, runs, report, reports, study)
    manifest.append("report.md")
    for name in manifest:
        if not (ana_dir / name).is_file():
            raise RuntimeError(f"manifest entry missing on disk: {name}")
    return report


def _write_summary(path: Path, cfg: CampaignConfig, runs, report,
                   critical_reports, study) -> None:
    lines = ["# Campaign report", ""]
    lines.append(f"Runs analyzed: {len(runs)}")
    lines.append(f"Unique feasible evaluations: {report.unique_feasible}")
    lines.append(f"Unique infeasible evaluations: {report.unique_infeasible}")
    lines.append(f"Unique evaluations total: {report.unique_total}")
    lines.append(f"Fraction infeasible (unique): "
                 f"{report.fraction_infeasible:.4f}")
    lines.append(f"Infeasible strictly inside the domain: "
                 f"{report.infeasible_inside_domain}")
    lines.append("")
    lines.append(f"Deduplicated optima across runs: "
                 f"{len(report.found_points)}")
    if len(report.found_merits):
        lines.append(f"Best merit: {report.found_merits[0]!r}")
        verdicts = {}
        for rep in critical_reports:
            verdicts[rep.verdict.value] = verdicts.get(rep.verdict.value, 0) + 1
        lines.append("Critical-point verdicts: "
                     + ", ".join(f"{k}={v}" for k, v in sorted(verdicts.items())))
    if report.match_table is not None:
        found_all = sum(1 for r in report.match_table if r["hit_runs"] > 0)
        lines.append("")
        lines.append(f"Known optima matched in at least one run: "
                     f"{found_all}/{len(report.match_table)}")
    if study is not None:
        lines.append("")
        lines.append(f"Infeasibility repetitions: {study.minima.shape[0]} "
                     f"x {study.minima.shape[1]} minima, "
                     f"{int((~study.sw_failed).sum())} normality p-values")
        lines.append(f"Fraction of subsamples accepted as normal at "
                     f"alpha={study.alpha}: {study.fraction_normal:.2f}")
    lines.append("")
    lines.append("Artifacts: " + ", ".join(report.manifest))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
