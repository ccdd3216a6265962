"""Line-oriented artifact formats.

Every file is delimited text with a one-line schema header.  Floats are
written with shortest round-trip formatting, so identical data reproduces
identical bytes and every value survives a parse round trip exactly.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .analysis import CriticalPointReport, InfeasibilityStudy
from .niching import DynamicPeakSet, EvaluationRecord
from .refine import RefineResult, Termination

_COORDS = tuple(f"c{i}" for i in range(1, 7))

ARCHIVE_HEADER = ("generation", "niche_id", *_COORDS, "merit", "feasible")
REFINE_HEADER = (*(f"start_{c}" for c in _COORDS),
                 *(f"refined_{c}" for c in _COORDS),
                 "merit_before", "merit_after", "iterations", "converged",
                 "termination")
OPTIMA_HEADER = (*_COORDS, "merit", "cluster_size")
PEAKS_HEADER = ("rank", *_COORDS, "merit", "feasible")
CRITICAL_HEADER = (*_COORDS, "merit", "consensus_delta", "gradient_norm",
                   *(f"eig{i}" for i in range(1, 7)), "condition_number",
                   "dominance_ratio", "verdict")
DISTANCES_HEADER = ("i", "j", "distance")
MATCH_HEADER = ("known_index", "hit_runs", "total_runs", "best_distance",
                "best_merit")


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_rows(path: Path | str, header: Sequence[str],
               rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_rows(path: Path | str, expected_header: Sequence[str]) -> list[list[str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != tuple(expected_header):
            raise ValueError(f"{path}: unexpected schema {header}")
        return [row for row in reader]


# -- archive -----------------------------------------------------------

def write_archive(path, records: Sequence[EvaluationRecord]) -> None:
    write_rows(path, ARCHIVE_HEADER,
               ((r.generation, r.niche_id, *r.vector, r.merit, r.feasible)
                for r in records))


def read_archive(path) -> list[EvaluationRecord]:
    out = []
    for row in read_rows(path, ARCHIVE_HEADER):
        out.append(EvaluationRecord(
            vector=np.array([float(v) for v in row[2:8]]),
            merit=float(row[8]), feasible=row[9] == "1",
            generation=int(row[0]), niche_id=int(row[1])))
    return out


# -- refinement results -------------------------------------------------

def write_refine_results(path, results: Sequence[RefineResult]) -> None:
    write_rows(path, REFINE_HEADER,
               ((*r.start, *r.refined, r.merit_before, r.merit_after,
                 r.iterations, r.converged, r.termination.value)
                for r in results))


def read_refine_results(path) -> list[RefineResult]:
    out = []
    for row in read_rows(path, REFINE_HEADER):
        out.append(RefineResult(
            start=np.array([float(v) for v in row[0:6]]),
            refined=np.array([float(v) for v in row[6:12]]),
            merit_before=float(row[12]), merit_after=float(row[13]),
            iterations=int(row[14]), converged=row[15] == "1",
            termination=Termination(row[16])))
    return out


# -- optima / known-optima lists ----------------------------------------

def write_optima(path, points: np.ndarray, merits: np.ndarray,
                 cluster_sizes: np.ndarray | None = None) -> None:
    sizes = cluster_sizes if cluster_sizes is not None \
        else np.ones(len(points), dtype=int)
    write_rows(path, OPTIMA_HEADER,
               ((*p, m, int(s)) for p, m, s in zip(points, merits, sizes)))


def read_optima(path) -> tuple[np.ndarray, np.ndarray]:
    rows = read_rows(path, OPTIMA_HEADER)
    if not rows:
        return np.empty((0, 6)), np.empty(0)
    pts = np.array([[float(v) for v in row[0:6]] for row in rows])
    merits = np.array([float(row[6]) for row in rows])
    return pts, merits


def read_known_optima(path) -> tuple[np.ndarray, np.ndarray]:
    """Known-solutions file: same schema as an optima list, or a headerless
    six-column (plus optional merit) table."""
    try:
        return read_optima(path)
    except (ValueError, StopIteration):
        pass
    pts = []
    merits = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p for p in line.replace(",", " ").split() if p]
            vals = [float(p) for p in parts]
            if len(vals) < 6:
                raise ValueError(f"{path}: need at least 6 columns per row")
            pts.append(vals[:6])
            merits.append(vals[6] if len(vals) > 6 else np.nan)
    return np.array(pts).reshape(-1, 6), np.array(merits)


# -- peaks, critical points, studies ------------------------------------

def write_peaks(path, peaks: DynamicPeakSet) -> None:
    write_rows(path, PEAKS_HEADER,
               ((rank, *r.vector, r.merit, r.feasible)
                for rank, r in enumerate(peaks.records)))


def write_critical_points(path, reports: Sequence[CriticalPointReport],
                          merits: Sequence[float]) -> None:
    rows = []
    for rep, m in zip(reports, merits):
        best = int(np.argmin(rep.gradient_norm_per_delta))
        rows.append((*rep.point, m, rep.consensus_delta, rep.gradient_norm,
                     *rep.hessian_spectrum_per_delta[best],
                     rep.condition_number, rep.dominance_ratio,
                     rep.verdict.value))
    write_rows(path, CRITICAL_HEADER, rows)


def write_distances(path, distances_flat: np.ndarray,
                    pair_indices: np.ndarray) -> None:
    write_rows(path, DISTANCES_HEADER,
               ((int(i), int(j), d)
                for (i, j), d in zip(pair_indices, distances_flat)))


def write_infeasibility(path, study: InfeasibilityStudy) -> None:
    k = study.minima.shape[1]
    header = ("rep", *(f"min{i}" for i in range(1, k + 1)), "sw_p",
              "sw_failed")
    write_rows(path, header,
               ((rep, *study.minima[rep],
                 "" if study.sw_failed[rep] else repr(float(study.p_values[rep])),
                 study.sw_failed[rep])
                for rep in range(study.minima.shape[0])))
