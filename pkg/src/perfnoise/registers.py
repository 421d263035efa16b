"""Register tables for the supported ISAs.

Names are canonicalized to one spelling per physical register (x86-64
``eax`` folds to ``rax``, aarch64 ``w5`` folds to ``x5``, ``d3`` to ``v3``)
so that usage scans treat sub-register accesses as touching the whole
register.  Two register classes exist per ISA: ``gp`` (integer) and ``fp``
(floating point / vector).

CANDIDATES holds allocation preference per (isa, class): caller-saved
registers that compilers rarely exhaust come first, callee-saved last
because writing those costs a save/restore.
"""

from __future__ import annotations

import re

from .errors import UnsupportedIsa

ISAS = ("x86_64", "aarch64")

REGISTER_CLASSES = ("gp", "fp")

# ---------------------------------------------------------------- x86-64

_X86_GP_FAMILIES = {
    "rax": ("rax", "eax", "ax", "al", "ah"),
    "rbx": ("rbx", "ebx", "bx", "bl", "bh"),
    "rcx": ("rcx", "ecx", "cx", "cl", "ch"),
    "rdx": ("rdx", "edx", "dx", "dl", "dh"),
    "rsi": ("rsi", "esi", "si", "sil"),
    "rdi": ("rdi", "edi", "di", "dil"),
    "rbp": ("rbp", "ebp", "bp", "bpl"),
    "rsp": ("rsp", "esp", "sp", "spl"),
    "r8": ("r8", "r8d", "r8w", "r8b"),
    "r9": ("r9", "r9d", "r9w", "r9b"),
    "r10": ("r10", "r10d", "r10w", "r10b"),
    "r11": ("r11", "r11d", "r11w", "r11b"),
    "r12": ("r12", "r12d", "r12w", "r12b"),
    "r13": ("r13", "r13d", "r13w", "r13b"),
    "r14": ("r14", "r14d", "r14w", "r14b"),
    "r15": ("r15", "r15d", "r15w", "r15b"),
}

_X86_ALIASES: dict[str, str] = {}
for _canon, _names in _X86_GP_FAMILIES.items():
    for _n in _names:
        _X86_ALIASES[_n] = _canon
for _i in range(16):
    for _pfx in ("xmm", "ymm", "zmm"):
        _X86_ALIASES[f"{_pfx}{_i}"] = f"xmm{_i}"
for _n in ("rip", "eip", "eflags", "fs", "gs", "cs", "ds", "es", "ss"):
    _X86_ALIASES[_n] = _n

# ---------------------------------------------------------------- aarch64

_A64_ALIASES: dict[str, str] = {}
for _i in range(31):
    _A64_ALIASES[f"x{_i}"] = f"x{_i}"
    _A64_ALIASES[f"w{_i}"] = f"x{_i}"
for _i in range(32):
    for _pfx in ("b", "h", "s", "d", "q", "v"):
        _A64_ALIASES[f"{_pfx}{_i}"] = f"v{_i}"
for _n in ("sp", "wsp"):
    _A64_ALIASES[_n] = "sp"
for _n in ("xzr", "wzr"):
    _A64_ALIASES[_n] = "xzr"

# Allocatable registers per (isa, class).  Reserved registers (stack and
# frame pointers, link register, platform register, zero register,
# instruction pointer, segment bases) never appear here.
ALLOCATABLE = {
    ("x86_64", "gp"): frozenset(
        {"rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp"}
        | {f"r{i}" for i in range(8, 16)}
    ),
    ("x86_64", "fp"): frozenset(f"xmm{i}" for i in range(16)),
    ("aarch64", "gp"): frozenset(f"x{i}" for i in range(29) if i != 18),
    ("aarch64", "fp"): frozenset(f"v{i}" for i in range(32)),
}

CALLEE_SAVED = {
    "x86_64": frozenset({"rbx", "rbp", "r12", "r13", "r14", "r15"}),
    "aarch64": frozenset({f"x{i}" for i in range(19, 29)} | {f"v{i}" for i in range(8, 16)}),
}

# Allocation preference: plentiful caller-saved temporaries first, argument
# registers next, callee-saved last.
CANDIDATES = {
    ("x86_64", "gp"): (
        "r11", "r10", "r9", "r8", "rcx", "rdx", "rsi", "rdi", "rax",
        "r15", "r14", "r13", "r12", "rbx", "rbp",
    ),
    ("x86_64", "fp"): tuple(f"xmm{i}" for i in range(15, -1, -1)),
    ("aarch64", "gp"): (
        "x15", "x14", "x13", "x12", "x11", "x10", "x9", "x17", "x16",
        "x8", "x7", "x6", "x5", "x4", "x3", "x2", "x1", "x0",
        "x28", "x27", "x26", "x25", "x24", "x23", "x22", "x21", "x20", "x19",
    ),
    ("aarch64", "fp"): (
        tuple(f"v{i}" for i in range(31, 15, -1))
        + tuple(f"v{i}" for i in range(7, -1, -1))
        + tuple(f"v{i}" for i in range(15, 7, -1))
    ),
}

_X86_REG_RE = re.compile(r"%([a-z][a-z0-9]*)")
_A64_TOKEN_RE = re.compile(r"[a-z][a-z0-9]*")
_A64_VECTOR_RE = re.compile(r"^([bhsdqv])([0-9]+)(?:\.[0-9]*[bhsd])?$")


def check_isa(isa: str) -> str:
    if isa not in ISAS:
        raise UnsupportedIsa(f"unknown isa {isa!r}, expected one of {ISAS}")
    return isa


def canonical(isa: str, name: str) -> str | None:
    """Map a register spelling to its canonical name, or None if not a register."""
    name = name.lower()
    if isa == "x86_64":
        return _X86_ALIASES.get(name)
    m = _A64_VECTOR_RE.match(name)
    if m and int(m.group(2)) < 32:
        return f"v{int(m.group(2))}"
    return _A64_ALIASES.get(name)


def registers_in_operands(isa: str, operands: str) -> set[str]:
    """Canonical registers appearing anywhere in an operand string."""
    found: set[str] = set()
    if isa == "x86_64":
        for m in _X86_REG_RE.finditer(operands):
            canon = canonical(isa, m.group(1))
            if canon is not None:
                found.add(canon)
        return found
    for m in _A64_TOKEN_RE.finditer(operands):
        canon = canonical(isa, m.group(0))
        if canon is not None:
            found.add(canon)
    return found


def class_of(isa: str, canon: str) -> str | None:
    """Register class of a canonical register, or None if unallocatable."""
    for cls in REGISTER_CLASSES:
        if canon in ALLOCATABLE[(isa, cls)]:
            return cls
    return None


def gp_name(isa: str, canon: str, width: int = 64) -> str:
    """Spell a canonical gp register at the given width (32 or 64 bits)."""
    if isa == "x86_64":
        if width == 64:
            return canon
        fam = _X86_GP_FAMILIES[canon]
        return fam[1]
    if width == 64:
        return canon
    return "w" + canon[1:]


def fp_name(isa: str, canon: str) -> str:
    """Spell a canonical fp register as a 64-bit scalar operand."""
    if isa == "x86_64":
        return canon
    return "d" + canon[1:]
