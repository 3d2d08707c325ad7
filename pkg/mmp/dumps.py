"""
Text artifacts written by the planner

Every artifact is plain text. The trace is a CSV with one row per dense
sample: t, then x, y, ux, uy per agent, then one region column per agent.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from mmp.executor import OUTSIDE, SynthesisResult, Trace
from mmp.geometry import Partition

logger = logging.getLogger(__name__)


def trace_header(agents) -> List[str]:
    header = ["t"]
    for agent in agents:
        header += [f"x{agent}", f"y{agent}", f"u{agent}x", f"u{agent}y"]
    header += [f"region_{agent}" for agent in agents]
    return header


def write_trace_csv(trace: Trace, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(trace_header(trace.agents))
        for s, t in enumerate(trace.times):
            row = [repr(float(t))]
            for n in range(len(trace.agents)):
                row += [repr(float(v)) for v in trace.positions[s, n]]
                row += [repr(float(v)) for v in trace.controls[s, n]]
            row += [str(int(r)) for r in trace.regions[s]]
            writer.writerow(row)
    logger.info(f"trace written: {path} samples={len(trace.times)}")
    return path


def read_trace_csv(path: Union[str, Path]) -> Trace:
    """
    Trace samples from a CSV written by write_trace_csv

    Raises:
        ValueError: missing columns or malformed numbers
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or not rows[0] or rows[0][0] != "t":
        raise ValueError(f"{path}: not a trace file")
    header = rows[0]
    prefix = "region_"
    agents = tuple(
        int(name[len(prefix) :]) for name in header if name.startswith(prefix)
    )
    if header != trace_header(agents):
        raise ValueError(f"{path}: unexpected columns {header}")
    count = len(agents)
    data = rows[1:]
    times = np.array([float(row[0]) for row in data])
    positions = np.zeros((len(data), count, 2))
    controls = np.zeros((len(data), count, 2))
    regions = np.full((len(data), count), OUTSIDE, dtype=int)
    for s, row in enumerate(data):
        if len(row) != len(header):
            raise ValueError(
                f"{path}: row {s + 2} has {len(row)} fields, expected {len(header)}"
            )
        for n in range(count):
            x, y, ux, uy = (float(v) for v in row[1 + 4 * n:5 + 4 * n])
            positions[s, n] = (x, y)
            controls[s, n] = (ux, uy)
        regions[s] = [int(v) for v in row[1 + 4 * count:]]
    return Trace(
        agents=agents,
        times=times,
        positions=positions,
        controls=controls,
        regions=regions,
    )


def write_text(out_dir: Union[str, Path], name: str, text: str) -> Path:
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    logger.debug(f"artifact written: {path}")
    return path


def write_partition(out_dir: Union[str, Path], partition: Partition) -> Path:
    return write_text(out_dir, "partition.txt", partition.dump())


def write_synthesis(
    out_dir: Union[str, Path], results: Dict[int, SynthesisResult]
) -> List[Path]:
    """Automaton, plan and run artifacts (agent<i>_*.txt) for each agent"""
    written = []
    for agent, result in sorted(results.items()):
        artifacts = {
            "wts": result.wts.dump(),
            "plans": result.matrix.dump_plans(),
            "tba": result.tba.dump(),
            "run": result.run.dump(result.product),
        }
        for kind, text in artifacts.items():
            written.append(write_text(out_dir, f"agent{agent}_{kind}.txt", text))
    return written
