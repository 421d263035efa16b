"""Python side of the probe runtime: building it and reading its output.

The runtime itself is C (runtime/noise_probe.c); instrumented programs
link it in and write one CSV of timing samples per run.  This module
compiles that C once per content hash and parses the CSVs back.
"""

from __future__ import annotations

import csv
import hashlib
import subprocess
from dataclasses import dataclass
from pathlib import Path

from .errors import BuildFailure, IoFailure

RUNTIME_DIR = Path(__file__).parent / "runtime"
PROBE_SOURCE = RUNTIME_DIR / "noise_probe.c"
ANCHOR_HEADER = RUNTIME_DIR / "noise_anchor.h"

SAMPLE_COLUMNS = ("region_id", "thread_id", "sample_index", "duration_ns")


@dataclass(frozen=True)
class TimingSample:
    region_id: str
    thread_id: int
    sample_index: int
    duration_ns: int

    def __post_init__(self) -> None:
        if self.duration_ns < 0:
            raise ValueError("duration_ns must be non-negative")


def build_runtime(workdir: Path, cc: str = "cc", cflags: tuple[str, ...] = ("-O2",)) -> Path:
    """Compile the probe runtime to an object file, cached by content."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256(PROBE_SOURCE.read_bytes() + " ".join(cflags).encode()).hexdigest()[:16]
    obj = workdir / f"noise_probe-{digest}.o"
    if obj.exists():
        return obj
    cmd = [cc, *cflags, "-c", str(PROBE_SOURCE), "-o", str(obj)]
    res = subprocess.run(cmd, capture_output=True, text=True)
    if res.returncode != 0:
        raise BuildFailure(f"probe runtime build failed:\n{res.stderr}")
    return obj


def read_samples(path: str | Path) -> list[TimingSample]:
    """Parse a probe CSV; raises IoFailure/ValueError on bad files."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read samples from {path}: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows or tuple(rows[0]) != SAMPLE_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(SAMPLE_COLUMNS)}")
    samples = []
    seen: set[tuple[str, int, int]] = set()
    for row in rows[1:]:
        if len(row) != 4:
            raise ValueError(f"{path}: malformed row {row!r}")
        sample = TimingSample(row[0], int(row[1]), int(row[2]), int(row[3]))
        key = (sample.region_id, sample.thread_id, sample.sample_index)
        if key in seen:
            raise ValueError(f"{path}: duplicate sample key {key}")
        seen.add(key)
        samples.append(sample)
    return samples


def durations_by_region(samples: list[TimingSample]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for s in samples:
        out.setdefault(s.region_id, []).append(s.duration_ns)
    return out


def durations_by_thread(samples: list[TimingSample], region_id: str) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for s in samples:
        if s.region_id == region_id:
            out.setdefault(s.thread_id, []).append(s.duration_ns)
    return out
