from __future__ import annotations

import json
import math
from typing import Any, Dict, List, Optional, Sequence

import aiosqlite

from .metrics import MetricsReport
from .solver import SolverTrace

SCHEMA_SQL = """
PRAGMA journal_mode=WAL;

CREATE TABLE IF NOT EXISTS reports (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    video TEXT NOT NULL,
    source TEXT NOT NULL,
    psnr_mean REAL,
    ssim_mean REAL,
    lr_psnr_mean REAL,
    msd_ccc REAL,
    mit_mean REAL,
    ttest_p REAL,
    detection_percentage REAL,
    swap_error REAL,
    doc TEXT NOT NULL,
    UNIQUE(video, source)
);

CREATE TABLE IF NOT EXISTS traces (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    video TEXT NOT NULL,
    method TEXT NOT NULL,
    frame INTEGER NOT NULL,
    iterations INTEGER NOT NULL,
    stop_reason TEXT,
    final_objective REAL,
    UNIQUE(video, method, frame)
);
"""

SUMMARY_COLUMNS = [
    "psnr_mean",
    "ssim_mean",
    "lr_psnr_mean",
    "msd_ccc",
    "mit_mean",
    "ttest_p",
    "detection_percentage",
    "swap_error",
]


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


class ResultsDatabase:
    def __init__(self, path: str):
        self.path = path
        self._conn: Optional[aiosqlite.Connection] = None

    async def connect(self) -> None:
        self._conn = await aiosqlite.connect(self.path)
        await self._conn.executescript(SCHEMA_SQL)
        await self._conn.commit()

    async def close(self) -> None:
        if self._conn is not None:
            await self._conn.close()
            self._conn = None

    async def __aenter__(self) -> "ResultsDatabase":
        await self.connect()
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    @property
    def conn(self) -> aiosqlite.Connection:
        if self._conn is None:
            raise RuntimeError("Database not connected")
        return self._conn

    # Reports
    async def upsert_report(self, report: MetricsReport) -> None:
        lr_psnr = [v for v in report.lr_psnr if math.isfinite(v)]
        await self.conn.execute(
            """
            INSERT INTO reports(video, source, psnr_mean, ssim_mean, lr_psnr_mean, msd_ccc, mit_mean, ttest_p,
                                detection_percentage, swap_error, doc)
            VALUES(?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            ON CONFLICT(video, source) DO UPDATE SET
                psnr_mean=excluded.psnr_mean, ssim_mean=excluded.ssim_mean, lr_psnr_mean=excluded.lr_psnr_mean,
                msd_ccc=excluded.msd_ccc, mit_mean=excluded.mit_mean, ttest_p=excluded.ttest_p,
                detection_percentage=excluded.detection_percentage, swap_error=excluded.swap_error, doc=excluded.doc
            """,
            (
                report.video,
                report.source,
                _finite(report.psnr_mean),
                _finite(report.ssim_mean),
                _finite(sum(lr_psnr) / len(lr_psnr)) if lr_psnr else None,
                _finite(report.msd_ccc),
                _finite(report.mit_mean),
                _finite(report.ttest_p),
                _finite(report.detection_percentage),
                _finite(report.swap_error),
                json.dumps(report.to_dict(), sort_keys=True),
            ),
        )
        await self.conn.commit()

    async def get_reports(self, source: Optional[str] = None) -> List[Dict[str, Any]]:
        sql = f"SELECT video, source, {', '.join(SUMMARY_COLUMNS)} FROM reports"
        params: Sequence[Any] = ()
        if source is not None:
            sql += " WHERE source=?"
            params = (source,)
        sql += " ORDER BY source, video"
        async with self.conn.execute(sql, params) as cur:
            rows = await cur.fetchall()
            keys = [d[0] for d in cur.description]
        return [dict(zip(keys, row)) for row in rows]

    async def sources(self) -> List[str]:
        async with self.conn.execute("SELECT DISTINCT source FROM reports ORDER BY source") as cur:
            rows = await cur.fetchall()
        return [r[0] for r in rows]

    # Solver traces
    async def add_traces(self, video: str, traces: Sequence[SolverTrace]) -> None:
        await self.conn.executemany(
            """
            INSERT INTO traces(video, method, frame, iterations, stop_reason, final_objective)
            VALUES(?, ?, ?, ?, ?, ?)
            ON CONFLICT(video, method, frame) DO UPDATE SET
                iterations=excluded.iterations, stop_reason=excluded.stop_reason, final_objective=excluded.final_objective
            """,
            [
                (
                    video,
                    t.method,
                    t.frame_index,
                    t.stop_iteration,
                    t.stop_reason.value if t.stop_reason else None,
                    t.objectives[-1] if t.objectives else None,
                )
                for t in traces
            ],
        )
        await self.conn.commit()

    async def get_iterations(self, method: str, video: Optional[str] = None) -> List[Dict[str, Any]]:
        sql = "SELECT video, frame, iterations, stop_reason FROM traces WHERE method=?"
        params: List[Any] = [method]
        if video is not None:
            sql += " AND video=?"
            params.append(video)
        sql += " ORDER BY video, frame"
        async with self.conn.execute(sql, tuple(params)) as cur:
            rows = await cur.fetchall()
        return [{"video": v, "frame": f, "iterations": n, "stop_reason": s} for v, f, n, s in rows]
