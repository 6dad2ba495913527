from __future__ import annotations

import csv
import json
import os
from collections import OrderedDict
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .db import SUMMARY_COLUMNS
from .errors import FormatError
from .metrics import MetricsReport
from .simulation import TUMOR_TRACK_ID, Trajectory
from .solver import SolverTrace
from .tracking import label_tumor
from .utils import mean_std, mean_std_str

TRAJECTORY_HEADER = ["track_id", "frame", "x", "y", "radius"]
SUMMARY_LABELS = {
    "psnr_mean": "PSNR (dB)",
    "ssim_mean": "SSIM",
    "lr_psnr_mean": "LR PSNR (dB)",
    "msd_ccc": "MSD CCC",
    "mit_mean": "MIT (frames)",
    "ttest_p": "MIT t-test p",
    "detection_percentage": "Detected (%)",
    "swap_error": "Swaps / traj",
}


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def write_trajectories(trajectories: Iterable[Trajectory], path: str) -> str:
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(TRAJECTORY_HEADER)
        for tr in trajectories:
            for frame, (x, y) in zip(tr.frames, tr.positions):
                w.writerow([tr.track_id, int(frame), f"{x:.6f}", f"{y:.6f}", f"{tr.radius:.6f}"])
    return path


def read_trajectories(path: str, tumor_id: Optional[int] = TUMOR_TRACK_ID, tumor_split_radius: Optional[float] = None) -> List[Trajectory]:
    """Read a trajectory CSV.

    Ground-truth files mark the tumor with ``tumor_id``. Tracked files carry
    no kind column: pass ``tumor_id=None`` and a ``tumor_split_radius`` to
    relabel the tumor by radius.
    """
    rows: "OrderedDict[int, List[List[float]]]" = OrderedDict()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != TRAJECTORY_HEADER:
            raise FormatError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            try:
                tid, frame, x, y, radius = int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from exc
            rows.setdefault(tid, []).append([frame, x, y, radius])
    tracks = []
    for tid, samples in rows.items():
        arr = np.array(sorted(samples, key=lambda s: s[0]))
        tracks.append(Trajectory(tid, arr[:, 0].astype(int), arr[:, 1:3], float(arr[0, 3])))
    if tumor_id is not None:
        for tr in tracks:
            if tr.track_id == tumor_id:
                tr.kind = "tumor"
    elif tumor_split_radius is not None:
        label_tumor(tracks, tumor_split_radius)
    return tracks


def write_jsonl(records: Iterable[Dict[str, Any]], path: str) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_traces(traces: Sequence[SolverTrace], path: str) -> str:
    return write_jsonl((t.to_record() for t in traces), path)


def write_timings(traces: Sequence[SolverTrace], path: str) -> str:
    return write_jsonl((t.timing_record() for t in traces), path)


def write_report(report: MetricsReport, path: str) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=2)
    return path


def read_report(path: str) -> MetricsReport:
    with open(path, encoding="utf-8") as f:
        return MetricsReport.from_dict(json.load(f))


def summarize(rows: Sequence[Dict[str, Any]], order: Sequence[str] = ()) -> List[Dict[str, Any]]:
    """Group report rows by source: mean and std per summary column."""
    by_source: "OrderedDict[str, List[Dict[str, Any]]]" = OrderedDict()
    for row in rows:
        by_source.setdefault(row["source"], []).append(row)
    ranked = [s for s in order if s in by_source] + [s for s in by_source if s not in order]
    table = []
    for source in ranked:
        group = by_source[source]
        entry: Dict[str, Any] = {"source": source, "videos": len(group)}
        for col in SUMMARY_COLUMNS:
            values = [r.get(col) for r in group]
            entry[col] = mean_std(values)
            entry[col + "_text"] = mean_std_str(values)
        table.append(entry)
    return table


def export_summary_csv(table: Sequence[Dict[str, Any]], path: str) -> str:
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        header = ["source", "videos"]
        for col in SUMMARY_COLUMNS:
            header += [f"{col}_mean", f"{col}_std"]
        w.writerow(header)
        for entry in table:
            row: List[Any] = [entry["source"], entry["videos"]]
            for col in SUMMARY_COLUMNS:
                m, s = entry[col]
                row += ["" if np.isnan(m) else f"{m:.6f}", "" if np.isnan(s) else f"{s:.6f}"]
            w.writerow(row)
    return path
