"""Shared fixtures: toolchain discovery and assembly helpers."""

from __future__ import annotations

import shutil
import subprocess
from pathlib import Path

import pytest

CC = shutil.which("cc") or shutil.which("gcc")
CLANG = shutil.which("clang")


def _clang_assembles_aarch64() -> bool:
    if CLANG is None:
        return False
    probe = "\t.text\n\t.globl f\nf:\n\tret\n"
    try:
        res = subprocess.run(
            [CLANG, "--target=aarch64-linux-gnu", "-c", "-x", "assembler", "-", "-o", "/dev/null"],
            input=probe.encode(),
            capture_output=True,
            timeout=30,
        )
    except OSError:
        return False
    return res.returncode == 0


HAVE_AARCH64_AS = _clang_assembles_aarch64()

needs_cc = pytest.mark.skipif(CC is None, reason="no C compiler on PATH")
needs_aarch64_as = pytest.mark.skipif(
    not HAVE_AARCH64_AS, reason="no aarch64-capable assembler on PATH"
)


def assemble(asm_text: str, isa: str, workdir: Path) -> Path:
    """Assemble text for the given ISA; returns the object path or raises."""
    src = workdir / "t.s"
    obj = workdir / "t.o"
    src.write_text(asm_text)
    if isa == "x86_64":
        cmd = [CC, "-c", str(src), "-o", str(obj)]
    else:
        cmd = [CLANG, "--target=aarch64-linux-gnu", "-c", str(src), "-o", str(obj)]
    res = subprocess.run(cmd, capture_output=True, text=True)
    if res.returncode != 0:
        raise AssertionError(f"assembly failed for {isa}:\n{res.stderr}\n---\n{asm_text}")
    return obj


@pytest.fixture
def cc():
    if CC is None:
        pytest.skip("no C compiler on PATH")
    return CC


DATA = Path(__file__).parent / "data"
