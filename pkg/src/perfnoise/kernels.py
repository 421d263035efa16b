"""Benchmark kernel helpers: CSR inputs, builds, and output parsing.

The C kernels live in ``kernels/kernels.c`` and are built as one binary
that dispatches on argv.  This module generates their inputs (notably
banded sparse matrices with a tunable disorder knob), writes the binary
matrix format the C side reads, and parses the checksum lines kernels
print.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
import struct
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import probe
from .errors import BuildFailure, InvalidProbability, RunFailure

KERNELS_SOURCE = Path(__file__).parent / "kernels" / "kernels.c"
CSR_MAGIC = b"CSR1"

KERNEL_REGIONS = {
    "triad": "triad",
    "chain": "chain",
    "fp_chain": "fp_chain",
    "matmul": "matmul",
    "spmxv": "spmxv",
}


def available_kernels() -> tuple[str, ...]:
    return tuple(sorted(KERNEL_REGIONS))


# --- sparse matrix generation ---------------------------------------------

@dataclass(frozen=True)
class CsrMatrix:
    n: int
    rowptr: np.ndarray  # uint64, length n+1
    col: np.ndarray     # uint64, length nnz
    val: np.ndarray     # float64, length nnz

    @property
    def nnz(self) -> int:
        return int(self.rowptr[-1])

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = int(self.rowptr[i]), int(self.rowptr[i + 1])
        return self.col[lo:hi], self.val[lo:hi]

    def spmv(self, x: np.ndarray) -> np.ndarray:
        y = np.zeros(self.n)
        for i in range(self.n):
            cols, vals = self.row(i)
            y[i] = float(np.dot(vals, x[cols]))
        return y


def generate_csr(n: int, nnz_per_row: int, q: float, seed: int = 0) -> CsrMatrix:
    """Banded matrix with ``nnz_per_row`` contiguous columns per row and a
    disorder knob ``q``.

    With q=0 each row's columns are a sorted contiguous band centered on
    the diagonal (clamped at the edges).  Each element is then swapped
    with a random position of its row with probability q, so q moves the
    access pattern smoothly from streaming to shuffled while the row
    contents - and therefore the product and its checksum - stay the
    same multiset.  Values are small integers: every dot product is
    exact in double precision, making results bit-identical across any
    reordering.
    """
    if not 0.0 <= q <= 1.0:
        raise InvalidProbability(f"q must be within [0, 1], got {q}")
    if n < 1 or nnz_per_row < 1 or nnz_per_row > n:
        raise ValueError("need 1 <= nnz_per_row <= n")
    rng = np.random.default_rng(seed)
    vals = rng.integers(1, 10, size=(n, nnz_per_row)).astype(np.float64)
    cols = np.empty((n, nnz_per_row), dtype=np.uint64)
    for i in range(n):
        start = min(max(i - nnz_per_row // 2, 0), n - nnz_per_row)
        cols[i] = np.arange(start, start + nnz_per_row, dtype=np.uint64)
    if q > 0.0:
        for i in range(n):
            for j in range(nnz_per_row):
                if rng.random() < q:
                    t = int(rng.integers(0, nnz_per_row))
                    cols[i, j], cols[i, t] = cols[i, t], cols[i, j]
                    vals[i, j], vals[i, t] = vals[i, t], vals[i, j]
    rowptr = np.arange(0, (n + 1) * nnz_per_row, nnz_per_row, dtype=np.uint64)
    return CsrMatrix(n=n, rowptr=rowptr, col=cols.reshape(-1),
                     val=vals.reshape(-1))


def write_csr(matrix: CsrMatrix, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CSR_MAGIC)
        fh.write(struct.pack("<QQ", matrix.n, matrix.nnz))
        fh.write(matrix.rowptr.astype("<u8").tobytes())
        fh.write(matrix.col.astype("<u8").tobytes())
        fh.write(matrix.val.astype("<f8").tobytes())


def read_csr(path: str | Path) -> CsrMatrix:
    blob = Path(path).read_bytes()
    if blob[:4] != CSR_MAGIC:
        raise ValueError(f"{path} is not a CSR1 file")
    n, nnz = struct.unpack_from("<QQ", blob, 4)
    off = 20
    rowptr = np.frombuffer(blob, dtype="<u8", count=n + 1, offset=off)
    off += (n + 1) * 8
    col = np.frombuffer(blob, dtype="<u8", count=nnz, offset=off)
    off += nnz * 8
    val = np.frombuffer(blob, dtype="<f8", count=nnz, offset=off)
    if len(val) != nnz:
        raise ValueError(f"{path} is truncated")
    return CsrMatrix(n=int(n), rowptr=rowptr.copy(), col=col.copy(),
                     val=val.copy())


# --- reference checksums ----------------------------------------------------

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def fnv1a(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


def triad_checksum(n: int) -> int:
    b = np.arange(n, dtype=np.float64) % 7
    c = np.arange(n, dtype=np.float64) % 5
    return fnv1a((b + 3.0 * c).tobytes())


def spmxv_checksum(matrix: CsrMatrix) -> int:
    x = (np.arange(matrix.n, dtype=np.float64) % 9) + 1
    return fnv1a(matrix.spmv(x).tobytes())


def fp_chain_checksum(inner: int, reps: int) -> int:
    acc = np.arange(8, dtype=np.float64) + float(inner * reps)
    return fnv1a(acc.tobytes())


def _xorshift64(state: int) -> tuple[int, int]:
    x = state
    x ^= (x << 13) & _U64
    x ^= x >> 7
    x ^= (x << 17) & _U64
    return x, x


def chain_walk(nodes: int, reps: int = 1) -> tuple[int, int]:
    """Replicate the chain kernel: returns (steps_per_lap, checksum)."""
    nxt = list(range(nodes))
    seed = 0x9E3779B97F4A7C15
    for i in range(nodes - 1, 0, -1):
        seed, r = _xorshift64(seed)
        j = r % i
        nxt[i], nxt[j] = nxt[j], nxt[i]
    h = 0
    steps = 0
    for _ in range(reps):
        idx = 0
        steps = 0
        while True:
            idx = nxt[idx]
            h = (h * 33 + idx) & _U64
            steps += 1
            if idx == 0:
                break
    return steps, h


def matmul_checksum(n: int) -> int:
    A = (np.arange(n * n, dtype=np.float64) % 4).reshape(n, n)
    B = (np.arange(n * n, dtype=np.float64) % 3).reshape(n, n)
    return fnv1a((A @ B).tobytes())


# --- building and running ----------------------------------------------------

def kernel_argv(kernel: str, *, reps: int = 5, n: int = 65536,
                threads: int = 1, nodes: int = 32768, inner: int = 65536,
                csr_path: str | Path | None = None) -> list[str]:
    """Argument vector (after the binary path) for one kernel run."""
    if kernel == "triad":
        return ["triad", str(n), str(reps), str(threads)]
    if kernel == "chain":
        return ["chain", str(nodes), str(reps)]
    if kernel == "fp_chain":
        return ["fp_chain", str(inner), str(reps)]
    if kernel == "matmul":
        return ["matmul", str(n), str(reps)]
    if kernel == "spmxv":
        if csr_path is None:
            raise ValueError("spmxv needs csr_path")
        return ["spmxv", str(csr_path), str(reps), str(threads)]
    raise KeyError(f"unknown kernel {kernel!r}")


def build_kernels(workdir: str | Path, cc: str = "cc",
                  cflags: tuple[str, ...] = ("-O2", "-g")) -> Path:
    """Compile the kernel binary against the probe runtime (cached by
    content, so repeated calls are free)."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    runtime_obj = probe.build_runtime(workdir, cc=cc)
    digest = hashlib.sha256(
        KERNELS_SOURCE.read_bytes() + repr((cc, cflags)).encode()
        + runtime_obj.name.encode()).hexdigest()[:16]
    exe = workdir / f"kernels_{digest}"
    if exe.exists():
        return exe
    cmd = [cc, *cflags, f"-I{probe.RUNTIME_DIR}", str(KERNELS_SOURCE),
           str(runtime_obj), "-o", str(exe), "-pthread"]
    res = subprocess.run(cmd, capture_output=True, text=True)
    if res.returncode != 0:
        raise BuildFailure(f"building kernels failed:\n{res.stderr}")
    return exe


def run_kernel(exe: str | Path, argv: list[str], *, env: dict | None = None,
               cwd: str | Path | None = None, timeout: float = 300.0) -> str:
    res = subprocess.run([str(exe), *argv], capture_output=True, text=True,
                         env=env, cwd=cwd, timeout=timeout)
    if res.returncode != 0:
        raise RunFailure(
            f"kernel {argv[0]} failed (exit {res.returncode}):\n{res.stderr}")
    return res.stdout


def bench_plan(kernel: str, argv: list[str], *,
               plan_path: str | Path | None = None,
               modes: tuple[str, ...] | None = None,
               register_pool_size: int | None = None):
    """Assemble an experiment plan that sweeps one built-in kernel.

    A plan file, when given, supplies the [noise], [stop], [run] and
    [build] tables (targets in it are ignored: the kernel is the
    target).  A [sim] table switches the sweep to the simulated backend.
    fp_chain keeps so many values live that the default register pool
    cannot be filled; unless told otherwise it gets a pool of 4.
    """
    from . import controller

    if kernel not in KERNEL_REGIONS:
        raise KeyError(f"unknown kernel {kernel!r}")
    raw = controller.read_plan_tables(plan_path) if plan_path else {}
    noise = controller.noise_from_table(raw.get("noise", {}))
    if modes:
        noise = dataclasses.replace(noise, modes=tuple(modes))
    pool = register_pool_size
    if pool is None and kernel == "fp_chain":
        pool = 4
    if pool is not None:
        noise = dataclasses.replace(noise, register_pool_size=pool)
    run = controller.run_from_table(raw.get("run", {}))
    run = dataclasses.replace(run, args=tuple(argv))
    stop = controller.stop_from_table(raw.get("stop", {}))
    simulate = (controller.sim_from_table(raw["sim"], noise.modes)
                if "sim" in raw else None)
    build = None
    if simulate is None:
        b = dict(raw.get("build", {}))
        b["sources"] = [KERNELS_SOURCE.name]
        build = controller.build_from_table(b)
    target = controller.TargetSpec(
        region=KERNEL_REGIONS[kernel],
        source=KERNELS_SOURCE.name if build else None)
    return controller.ExperimentPlan(
        targets=(target,), noise=noise, run=run, stop=stop, build=build,
        simulate=simulate, plan_dir=KERNELS_SOURCE.parent)


_CHECKSUM_RE = re.compile(r"^CHECKSUM ([0-9a-f]{16})$", re.M)
_NODES_RE = re.compile(r"^NODES (\d+)$", re.M)


def parse_checksum(stdout: str) -> int:
    m = _CHECKSUM_RE.search(stdout)
    if not m:
        raise ValueError("no CHECKSUM line in kernel output")
    return int(m.group(1), 16)


def parse_nodes(stdout: str) -> int:
    m = _NODES_RE.search(stdout)
    if not m:
        raise ValueError("no NODES line in kernel output")
    return int(m.group(1))
