import asyncio
import csv

import numpy as np
import pytest

from celltrack_sr.db import ResultsDatabase
from celltrack_sr.errors import FormatError
from celltrack_sr.exporters import (
    export_summary_csv,
    read_jsonl,
    read_report,
    read_trajectories,
    summarize,
    write_report,
    write_traces,
    write_trajectories,
)
from celltrack_sr.metrics import MetricsReport
from celltrack_sr.pdf_export import generate_summary_pdf
from celltrack_sr.simulation import Trajectory
from celltrack_sr.solver import SolverTrace, StopReason


def _tracks():
    return [
        Trajectory(0, [0, 1], [[15.5, 15.5], [15.5, 15.5]], 10.0, kind="tumor"),
        Trajectory(3, [1, 2], [[4.25, 6.0], [5.0, 6.5]], 4.0),
    ]


def test_trajectory_csv(tmp_path):
    path = write_trajectories(_tracks(), str(tmp_path / "gt.csv"))
    tracks = read_trajectories(path)
    assert [t.track_id for t in tracks] == [0, 3]
    assert tracks[0].kind == "tumor" and tracks[1].kind == "immune"
    np.testing.assert_allclose(tracks[1].positions, [[4.25, 6.0], [5.0, 6.5]])


def test_tracked_csv_relabels_by_radius(tmp_path):
    tracks = _tracks()
    tracks[0].track_id = 5
    path = write_trajectories(tracks, str(tmp_path / "tracks.csv"))
    reread = read_trajectories(path, tumor_id=None, tumor_split_radius=7.0)
    assert [t.kind for t in reread] == ["tumor", "immune"]


def test_trajectory_csv_errors(tmp_path):
    bad_header = tmp_path / "a.csv"
    bad_header.write_text("id,t,x,y\n")
    with pytest.raises(FormatError):
        read_trajectories(str(bad_header))
    bad_row = tmp_path / "b.csv"
    bad_row.write_text("track_id,frame,x,y,radius\n1,0,abc,2,3\n")
    with pytest.raises(FormatError):
        read_trajectories(str(bad_row))


def test_traces_exclude_wall_time(tmp_path):
    trace = SolverTrace(0, "RDPV", [3.0, 2.0], 2, StopReason.MAX_ITERS, wall_time=1.25)
    (record,) = read_jsonl(write_traces([trace], str(tmp_path / "t.jsonl")))
    assert record["iterations"] == 2 and record["stop_reason"] == "max-iters"
    assert "wall_time" not in record


def test_report_json(tmp_path):
    report = MetricsReport("video_000", "bicubic", psnr=[25.0], ssim=[0.8], detection_percentage=75.0)
    assert read_report(write_report(report, str(tmp_path / "m.json"))) == report


def test_summary_table_and_csv(tmp_path):
    rows = [
        {"source": "RDPV", "video": "v0", "psnr_mean": 30.0, "ssim_mean": 0.9},
        {"source": "RDPV", "video": "v1", "psnr_mean": 32.0, "ssim_mean": None},
        {"source": "bicubic", "video": "v0", "psnr_mean": 25.0, "ssim_mean": 0.8},
    ]
    table = summarize(rows, order=["bicubic", "DPV", "RDPV"])
    assert [e["source"] for e in table] == ["bicubic", "RDPV"]
    assert table[1]["psnr_mean"] == (31.0, 1.0)
    assert table[1]["ssim_mean"] == (0.9, 0.0)
    assert table[0]["swap_error_text"] == "-"
    path = export_summary_csv(table, str(tmp_path / "summary.csv"))
    with open(path, newline="", encoding="utf-8") as f:
        lines = list(csv.reader(f))
    assert lines[0][:4] == ["source", "videos", "psnr_mean_mean", "psnr_mean_std"]
    assert lines[2][:4] == ["RDPV", "2", "31.000000", "1.000000"]


def test_summary_pdf_is_reproducible(tmp_path):
    table = summarize([{"source": "RDPV", "video": "v0", "psnr_mean": 30.0}])
    a = generate_summary_pdf(table, str(tmp_path / "a.pdf"), info=[("Videos", "1")])
    b = generate_summary_pdf(table, str(tmp_path / "b.pdf"), info=[("Videos", "1")])
    data = open(a, "rb").read()
    assert data.startswith(b"%PDF")
    assert data == open(b, "rb").read()


def test_results_database(tmp_path):
    async def scenario():
        async with ResultsDatabase(str(tmp_path / "results.db")) as db:
            await db.upsert_report(MetricsReport("video_000", "RDPV", psnr=[30.0, float("inf")], swap_error=1.5))
            await db.upsert_report(MetricsReport("video_000", "RDPV", psnr=[31.0]))
            await db.upsert_report(MetricsReport("video_000", "bicubic", psnr=[25.0]))
            await db.add_traces("video_000", [SolverTrace(0, "RDPV", [1.0], 1, StopReason.MAX_ITERS)])
            return (
                await db.get_reports("RDPV"),
                await db.sources(),
                await db.get_iterations("RDPV"),
            )

    rdpv, sources, iterations = asyncio.run(scenario())
    assert len(rdpv) == 1 and rdpv[0]["psnr_mean"] == 31.0 and rdpv[0]["swap_error"] is None
    assert sources == ["RDPV", "bicubic"]
    assert iterations == [{"video": "video_000", "frame": 0, "iterations": 1, "stop_reason": "max-iters"}]


def test_database_requires_connection(tmp_path):
    with pytest.raises(RuntimeError):
        ResultsDatabase(str(tmp_path / "x.db")).conn
