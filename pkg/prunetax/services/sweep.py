"""
Sweeps: many signals against one trained network.

Layout under the sweep directory:

    <sweep>/retrain_on/summary.csv
    <sweep>/retrain_on/runs/<signal_id>.csv
    <sweep>/retrain_off/...

Every signal gets its own seed derived from (seed, signal id), so a
signal's results do not depend on which other signals run or on the
number of worker threads. A failing signal is recorded in the summary
and does not stop the sweep.
"""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from prunetax.core.config import HarnessConfig
from prunetax.core.errors import PruneTaxError
from prunetax.core.network import NetworkGraph
from prunetax.core.records import ResultRow, SummaryRow, write_results_csv, write_summary_csv
from prunetax.core.signals import SignalSpec
from prunetax.services.analysis import summarize
from prunetax.services.datasets import DataSplits
from prunetax.services.pruning import PruningSession

logger = logging.getLogger(__name__)

RETRAIN_MODES = {"on": (True,), "off": (False,), "both": (True, False)}


def signal_seed(seed: int, signal_id: str) -> int:
    """Seed of one signal's run, stable across processes and thread counts."""
    sequence = np.random.SeedSequence([seed, zlib.crc32(signal_id.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])


def mode_name(retrain: bool) -> str:
    return "retrain_on" if retrain else "retrain_off"


@dataclass
class SweepLayout:
    """Paths of one retrain mode's outputs."""

    root: Path

    @property
    def summary(self) -> Path:
        return self.root / "summary.csv"

    def run_csv(self, signal_id: str) -> Path:
        return self.root / "runs" / f"{signal_id}.csv"


@dataclass
class SignalRun:
    summary: SummaryRow
    rows: list[ResultRow]
    session: Optional[PruningSession] = None


def run_signal(
    net: NetworkGraph,
    spec: SignalSpec,
    data: DataSplits,
    harness: HarnessConfig,
    seed: int,
    retrain: bool,
) -> SignalRun:
    """One pruning run with the signal's derived seed; errors become a failed summary."""
    config = harness.model_copy(update={"seed": signal_seed(seed, spec.id)})
    mode = "on" if retrain else "off"
    try:
        session = PruningSession(net, spec, data, config, retrain=retrain)
        records = session.run()
    except PruneTaxError as e:
        logger.error("%s (retrain %s) failed: %s", spec.id, mode, e)
        return SignalRun(
            summary=SummaryRow(signal_id=spec.id, seed=seed, retrain=mode, status="error", message=str(e)),
            rows=[],
        )
    summary = summarize(spec.id, seed, mode, records, session.initial_test_acc, harness.operating_drop)
    rows = [ResultRow.from_record(r, spec.id, seed) for r in records]
    return SignalRun(summary=summary, rows=rows, session=session)


def run_sweep(
    net: NetworkGraph,
    specs: list[SignalSpec],
    data: DataSplits,
    harness: HarnessConfig,
    out_dir: Path,
    seed: int = 0,
    retrain: str = "on",
    threads: int = 1,
    on_done: Optional[Callable[[SummaryRow], None]] = None,
) -> dict[str, list[SummaryRow]]:
    """
    Run every signal in every requested retrain mode.

    Returns summaries per mode directory name, in signal order.
    """
    if retrain not in RETRAIN_MODES:
        raise KeyError(f"unknown retrain mode '{retrain}'; choose from on, off, both")
    results: dict[str, list[SummaryRow]] = {}
    for flag in RETRAIN_MODES[retrain]:
        layout = SweepLayout(Path(out_dir) / mode_name(flag))

        def job(spec: SignalSpec) -> SummaryRow:
            run = run_signal(net, spec, data, harness, seed, flag)
            if run.summary.status == "ok":
                write_results_csv(layout.run_csv(spec.id), run.rows)
            if on_done is not None:
                on_done(run.summary)
            return run.summary

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                summaries = list(pool.map(job, specs))
        else:
            summaries = [job(spec) for spec in specs]
        write_summary_csv(layout.summary, summaries)
        failed = sum(1 for s in summaries if s.status != "ok")
        logger.info("%s: %d signals, %d failed", layout.root, len(summaries), failed)
        results[layout.root.name] = summaries
    return results


def find_summary(sweep_dir: Path, prefer: str = "retrain_on") -> Path:
    """summary.csv of a mode directory, or of the preferred mode under a sweep root."""
    sweep_dir = Path(sweep_dir)
    if (sweep_dir / "summary.csv").exists():
        return sweep_dir / "summary.csv"
    for name in (prefer, "retrain_on", "retrain_off"):
        candidate = sweep_dir / name / "summary.csv"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no summary.csv under {sweep_dir}")
