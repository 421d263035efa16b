"""Noise instruction patterns.

A noise pattern is a short sequence of machine instructions that exercises
exactly one hardware resource.  Injecting the pattern k times into a loop
adds k * pattern_length payload instructions per iteration; the time the
loop takes to start slowing down tells how much slack that resource had.

Four built-in modes:

``fp_add64``
    Scalar double-precision self-adds (``fadd d31, d31, d31``); pressures
    the FP unit only.
``int64_add``
    64-bit integer self-adds; pressures the integer ALUs.
``l1_ld64``
    Loads from a fixed thread-local buffer that stays resident in L1;
    pressures the load ports without leaving the core.
``memory_ld64``
    Pointer-chasing loads through a pseudo-random single-cycle permutation
    laid out over a buffer far larger than the last-level cache; every
    step misses and defeats stride prefetchers.  Each pool register walks
    its own stream so consecutive noise instructions do not stall on each
    other.

Payload instructions obey a write-after-write discipline: they write only
registers from a pool the surrounding code never reads, cycling through
the pool so a payload instruction never waits on the one before it.
Overhead instructions (buffer address materialization, register spills)
are meant to be hoisted outside the loop by the injector.

Buffer addresses come from thread-local symbols defined by the probe
runtime (see runtime/noise_probe.c); the generated code reads them with
local-exec TLS sequences, so injected objects must be linked into the
executable together with the runtime.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from . import registers
from .errors import InsufficientRegisterPool, RegisterPressureTooHigh, UnsupportedIsa

# Thread-local symbols shared with runtime/noise_probe.c.
L1_BUFFER_SYMBOL = "noise_tls_l1_buf"
CHASE_SYMBOL = "noise_tls_chase"
SPILL_SYMBOL = "noise_tls_spill"
CHASE_SLOTS = 8
SPILL_SLOTS = 16

DEFAULT_POOL_SIZE = 8
DEFAULT_BASE = {"x86_64": "r11", "aarch64": "x9"}


def comment_prefix(isa: str) -> str:
    """Line comment prefix accepted by the GNU assembler for the ISA."""
    registers.check_isa(isa)
    return "#" if isa == "x86_64" else "//"


@dataclass(frozen=True)
class NoiseBufferSpec:
    """Sizes of the load-noise buffers and the caches they are tuned against.

    l1_buffer_bytes must fit in half the L1 so the l1_ld64 working set
    never spills; memory_buffer_bytes must be at least 8x the LLC so the
    memory_ld64 walk practically never hits.
    """

    l1_buffer_bytes: int = 4096
    memory_buffer_bytes: int = 256 * 1024 * 1024
    per_thread: bool = True
    l1_cache_bytes: int = 32 * 1024
    llc_cache_bytes: int = 32 * 1024 * 1024

    def __post_init__(self) -> None:
        if self.l1_buffer_bytes <= 0 or self.memory_buffer_bytes <= 0:
            raise ValueError("buffer sizes must be positive")
        if self.l1_buffer_bytes > self.l1_cache_bytes // 2:
            raise ValueError(
                f"l1_buffer_bytes={self.l1_buffer_bytes} exceeds half the "
                f"configured L1 ({self.l1_cache_bytes} B)"
            )
        if self.memory_buffer_bytes < 8 * self.llc_cache_bytes:
            raise ValueError(
                f"memory_buffer_bytes={self.memory_buffer_bytes} is below 8x "
                f"the configured LLC ({self.llc_cache_bytes} B)"
            )


@dataclass(frozen=True)
class NoiseMode:
    """Identity and resource footprint of one noise flavor."""

    name: str
    target_unit: str
    register_class: str
    uses_l1_buffer: bool = False
    uses_memory_buffer: bool = False

    @property
    def needs_base(self) -> bool:
        return self.uses_l1_buffer

    @property
    def chase(self) -> bool:
        return self.uses_memory_buffer


@dataclass(frozen=True)
class NoisePattern:
    """One mode instantiated for one ISA.

    payload_fn(isa, reg, base) renders a single payload instruction for a
    spelled register; payload_re(isa) yields a regex whose full match
    identifies payload instructions of this pattern, used by the audit to
    recount independently of the injector's bookkeeping.
    """

    mode: NoiseMode
    isa: str
    payload_fn: Callable[[str, str, str | None], str]
    payload_re: str
    pattern_length: int = 1
    register_pool_size: int = DEFAULT_POOL_SIZE

    def spell(self, canon: str) -> str:
        """Spell a canonical pool register the way the payload wants it."""
        if self.mode.register_class == "fp":
            return registers.fp_name(self.isa, canon)
        width = 32 if (self.mode.name == "l1_ld64" and self.isa == "aarch64") else 64
        return registers.gp_name(self.isa, canon, width)


def _payload_fp(isa: str, reg: str, base: str | None) -> str:
    if isa == "x86_64":
        return f"addsd %{reg}, %{reg}"
    return f"fadd {reg}, {reg}, {reg}"


def _payload_int(isa: str, reg: str, base: str | None) -> str:
    if isa == "x86_64":
        return f"addq %{reg}, %{reg}"
    return f"add {reg}, {reg}, {reg}"


def _payload_l1(isa: str, reg: str, base: str | None) -> str:
    if isa == "x86_64":
        return f"movq (%{base}), %{reg}"
    return f"ldr {reg}, [{base}]"


def _payload_chase(isa: str, reg: str, base: str | None) -> str:
    if isa == "x86_64":
        return f"movq (%{reg}), %{reg}"
    return f"ldr {reg}, [{reg}]"


_BUILTIN_MODES = {
    "fp_add64": NoiseMode("fp_add64", "fp-unit", "fp"),
    "int64_add": NoiseMode("int64_add", "integer-unit", "gp"),
    "l1_ld64": NoiseMode("l1_ld64", "l1-load", "gp", uses_l1_buffer=True),
    "memory_ld64": NoiseMode("memory_ld64", "memory-load", "gp", uses_memory_buffer=True),
}

_PAYLOAD_FNS = {
    "fp_add64": _payload_fp,
    "int64_add": _payload_int,
    "l1_ld64": _payload_l1,
    "memory_ld64": _payload_chase,
}

# Full-match regexes recognizing payload instructions, per (mode, isa).
_PAYLOAD_RES = {
    ("fp_add64", "x86_64"): r"addsd\s+%(xmm\d+),\s*%\1",
    ("fp_add64", "aarch64"): r"fadd\s+(d\d+),\s*\1,\s*\1",
    ("int64_add", "x86_64"): r"addq\s+%([a-z]\w*),\s*%\1",
    ("int64_add", "aarch64"): r"add\s+(x\d+),\s*\1,\s*\1",
    ("l1_ld64", "x86_64"): r"movq\s+\(%([a-z]\w*)\),\s*%(?!\1)[a-z]\w*",
    ("l1_ld64", "aarch64"): r"ldr\s+(w\d+),\s*\[x\d+\]",
    ("memory_ld64", "x86_64"): r"movq\s+\(%([a-z]\w*)\),\s*%\1",
    ("memory_ld64", "aarch64"): r"ldr\s+(x\d+),\s*\[\1\]",
}

_REGISTRY: dict[tuple[str, str], NoisePattern] = {}


def register_mode(pattern: NoisePattern) -> None:
    """Add a pattern to the registry; (mode name, isa) must be unique."""
    registers.check_isa(pattern.isa)
    key = (pattern.mode.name, pattern.isa)
    if key in _REGISTRY:
        raise ValueError(f"pattern {key} already registered")
    _REGISTRY[key] = pattern


for _name, _mode in _BUILTIN_MODES.items():
    for _isa in registers.ISAS:
        register_mode(
            NoisePattern(
                mode=_mode,
                isa=_isa,
                payload_fn=_PAYLOAD_FNS[_name],
                payload_re=_PAYLOAD_RES[(_name, _isa)],
            )
        )


def available_modes() -> tuple[str, ...]:
    return tuple(sorted({mode for mode, _ in _REGISTRY}))


def get_pattern(mode: str, isa: str) -> NoisePattern:
    registers.check_isa(isa)
    try:
        return _REGISTRY[(mode, isa)]
    except KeyError:
        raise KeyError(
            f"no pattern for mode {mode!r} on {isa}; known modes: {available_modes()}"
        ) from None


def _normalize_pool(pattern: NoisePattern, pool: Sequence[str]) -> list[str]:
    """Canonicalize pool names, check class, and spell them for the pattern."""
    spelled = []
    for name in pool:
        canon = registers.canonical(pattern.isa, name)
        if canon is None or registers.class_of(pattern.isa, canon) != pattern.mode.register_class:
            raise InsufficientRegisterPool(
                f"{name!r} is not an allocatable {pattern.mode.register_class} "
                f"register on {pattern.isa}"
            )
        spelled.append(pattern.spell(canon))
    return spelled


def generate_payload(
    mode: str, isa: str, k: int, pool: Sequence[str], base: str | None = None
) -> list[str]:
    """Render k payload instructions, cycling destinations through pool.

    Instruction i writes pool[i mod len(pool)].  Load modes read from
    ``base`` (a 64-bit address register); chase modes read each register
    through itself, so the caller's overhead must have seeded the pool
    with valid pointers.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    pattern = get_pattern(mode, isa)
    if k == 0:
        return []
    if not pool:
        raise InsufficientRegisterPool(f"mode {mode} needs a register pool, got none")
    spelled = _normalize_pool(pattern, pool)
    if pattern.mode.chase and len(spelled) > CHASE_SLOTS:
        raise InsufficientRegisterPool(
            f"memory chase supports at most {CHASE_SLOTS} pool registers"
        )
    if pattern.mode.needs_base and base is None:
        base = DEFAULT_BASE[isa]
    out = []
    for i in range(k * pattern.pattern_length):
        out.append(pattern.payload_fn(isa, spelled[i % len(spelled)], base))
    return out


def _tls_address(isa: str, symbol: str, reg: str) -> list[str]:
    """Materialize the address of a thread-local symbol into a gp register."""
    if isa == "x86_64":
        return [
            f"movq %fs:0, %{reg}",
            f"leaq {symbol}@tpoff(%{reg}), %{reg}",
        ]
    return [
        f"mrs {reg}, tpidr_el0",
        f"add {reg}, {reg}, #:tprel_hi12:{symbol}, lsl #12",
        f"add {reg}, {reg}, #:tprel_lo12_nc:{symbol}",
    ]


def _spill_name(isa: str, canon: str) -> str:
    cls = registers.class_of(isa, canon)
    return registers.fp_name(isa, canon) if cls == "fp" else registers.gp_name(isa, canon)


def _saves_x86(saved: Sequence[str], restore: bool) -> list[str]:
    out = []
    for i, canon in enumerate(saved):
        slot = f"%fs:{SPILL_SYMBOL}@tpoff+{8 * i}" if i else f"%fs:{SPILL_SYMBOL}@tpoff"
        op = "movsd" if registers.class_of("x86_64", canon) == "fp" else "movq"
        reg = f"%{_spill_name('x86_64', canon)}"
        out.append(f"{op} {slot}, {reg}" if restore else f"{op} {reg}, {slot}")
    return out


def _saves_a64(saved: Sequence[str], scratch: str, restore: bool) -> list[str]:
    out = _tls_address("aarch64", SPILL_SYMBOL, scratch)
    for i, canon in enumerate(saved):
        slot = f"[{scratch}, #{8 * i}]" if i else f"[{scratch}]"
        reg = _spill_name("aarch64", canon)
        out.append(f"ldr {reg}, {slot}" if restore else f"str {reg}, {slot}")
    return out


def generate_overhead(
    mode: str,
    isa: str,
    buffers: NoiseBufferSpec | None = None,
    saved_registers: Sequence[str] = (),
    *,
    pool: Sequence[str] = (),
    base: str | None = None,
    scratch: str | None = None,
) -> tuple[list[str], list[str]]:
    """Build the (prologue, epilogue) instruction lists for a mode.

    The prologue spills saved_registers to thread-local slots, then
    materializes buffer addresses: for l1_ld64 the buffer base into
    ``base``; for memory_ld64 the chase start pointers into the pool
    registers (using ``base`` as a scratch that is dead afterwards).  The
    epilogue restores the spilled registers.  Register arguments may be
    spelled or canonical.

    Both lists are meant to execute outside the loop; they are empty for
    register-only modes with nothing to save.
    """
    pattern = get_pattern(mode, isa)
    if buffers is None:
        buffers = NoiseBufferSpec()
    if len(saved_registers) > SPILL_SLOTS:
        raise RegisterPressureTooHigh(
            f"cannot spill {len(saved_registers)} registers, only {SPILL_SLOTS} slots"
        )
    saved_canon = []
    for name in saved_registers:
        canon = registers.canonical(isa, name)
        if canon is None or registers.class_of(isa, canon) is None:
            raise RegisterPressureTooHigh(f"{name!r} is not a saveable register on {isa}")
        saved_canon.append(canon)

    needs_addressing = pattern.mode.needs_base or pattern.mode.chase
    if base is None and needs_addressing:
        base = DEFAULT_BASE[isa]
    if base is not None:
        base_canon = registers.canonical(isa, base)
        if base_canon is None or registers.class_of(isa, base_canon) != "gp":
            raise RegisterPressureTooHigh(f"base {base!r} is not a gp register on {isa}")
        base = registers.gp_name(isa, base_canon)
    if scratch is None:
        scratch = base if base is not None else DEFAULT_BASE[isa]

    prologue: list[str] = []
    epilogue: list[str] = []
    if saved_canon:
        if isa == "x86_64":
            prologue += _saves_x86(saved_canon, restore=False)
            epilogue += _saves_x86(saved_canon, restore=True)
        else:
            prologue += _saves_a64(saved_canon, scratch, restore=False)
            epilogue += _saves_a64(saved_canon, scratch, restore=True)

    if pattern.mode.needs_base:
        prologue += _tls_address(isa, L1_BUFFER_SYMBOL, base)
    elif pattern.mode.chase:
        spelled = [
            registers.gp_name(isa, registers.canonical(isa, r)) for r in pool
        ]
        if not spelled:
            raise InsufficientRegisterPool("memory chase overhead needs the pool")
        if len(spelled) > CHASE_SLOTS:
            raise InsufficientRegisterPool(
                f"memory chase supports at most {CHASE_SLOTS} pool registers"
            )
        prologue += _tls_address(isa, CHASE_SYMBOL, base)
        for i, reg in enumerate(spelled):
            if isa == "x86_64":
                src = f"{8 * i}(%{base})" if i else f"(%{base})"
                prologue.append(f"movq {src}, %{reg}")
            else:
                src = f"[{base}, #{8 * i}]" if i else f"[{base}]"
                prologue.append(f"ldr {reg}, {src}")
    return prologue, epilogue


def _count_instructions(lines: Iterable[str]) -> int:
    n = 0
    for line in lines:
        text = line.strip()
        if not text or text.startswith("#") or text.startswith("//"):
            continue
        n += 1
    return n


def count_payload_overhead(
    payload: Sequence[str],
    prologue: Sequence[str] = (),
    epilogue: Sequence[str] = (),
) -> tuple[int, int]:
    """Count instructions (comments and blanks excluded) in generated text."""
    return (
        _count_instructions(payload),
        _count_instructions(prologue) + _count_instructions(epilogue),
    )
