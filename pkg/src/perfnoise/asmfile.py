"""Line-level model of GNU assembler text.

Parses compiler-emitted ``.s`` files (x86-64 AT&T or aarch64) just deeply
enough to find functions, labels, branches, and anchor comments, and to
count instructions.  Nothing here understands instruction semantics
beyond "is it a branch and where to"; that is all loop detection needs.

Comment syntax differs per ISA: ``#`` starts a comment anywhere on
x86-64, while on aarch64 ``#`` introduces immediates and only ``//``
(or a ``#`` at the very start of a line) comments.  Quoted strings in
directives are respected when stripping.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import registers
from .errors import MalformedAssembly

ANCHOR_RE = re.compile(r"NOISE_ANCHOR:(\S+)")

_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*|\d+):\s*(.*)$")

_X86_JUMPS = re.compile(r"^(j[a-z]{1,4}|jmp[qwl]?|loop(n?[ez])?)$")
_A64_COND = (
    "eq ne cs cc mi pl vs vc hi ls ge lt gt le al nv hs lo".split()
)
_A64_JUMPS = {"b", "cbz", "cbnz", "tbz", "tbnz"} | {f"b.{c}" for c in _A64_COND}

_CALLS = {"x86_64": {"call", "callq"}, "aarch64": {"bl", "blr"}}
_RETS = {"x86_64": {"ret", "retq"}, "aarch64": {"ret"}}


@dataclass
class AsmLine:
    raw: str
    label: str | None = None
    mnemonic: str | None = None
    operands: str = ""
    directive: str | None = None
    comment: str | None = None

    @property
    def is_instruction(self) -> bool:
        return self.mnemonic is not None


def _strip_comment(text: str, isa: str) -> tuple[str, str | None]:
    """Split code from trailing comment, honoring quotes and ISA rules."""
    stripped = text.lstrip()
    if stripped.startswith("//") or stripped.startswith("#"):
        # A leading '#' is a line comment on both ISAs.
        return "", stripped[2 if stripped.startswith("//") else 1 :].strip()
    in_quote = False
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == '"' and (i == 0 or text[i - 1] != "\\"):
            in_quote = not in_quote
        elif not in_quote:
            if isa == "x86_64" and ch == "#":
                return text[:i], text[i + 1 :].strip()
            if ch == "/" and text[i : i + 2] == "//":
                return text[:i], text[i + 2 :].strip()
        i += 1
    return text, None


def parse_line(raw: str, isa: str) -> AsmLine:
    code, comment = _strip_comment(raw, isa)
    line = AsmLine(raw=raw, comment=comment)
    return _parse_code(line, code.strip())


def _parse_code(line: AsmLine, code: str) -> AsmLine:
    if not code:
        return line
    m = _LABEL_RE.match(code)
    # Distinguish "label:" from a directive like ".cfi..." (no colon) and
    # from memory operands containing ':' (x86 segment syntax never starts
    # a line).
    if m and "@" not in m.group(1):
        line.label = m.group(1)
        rest = m.group(2).strip()
        if rest:
            return _parse_code(line, rest)
        return line
    if code.startswith("."):
        parts = code.split(None, 1)
        line.directive = parts[0]
        line.operands = parts[1] if len(parts) > 1 else ""
        return line
    parts = code.split(None, 1)
    line.mnemonic = parts[0].lower()
    line.operands = parts[1].strip() if len(parts) > 1 else ""
    return line


def is_jump(isa: str, mnemonic: str) -> bool:
    if isa == "x86_64":
        return bool(_X86_JUMPS.match(mnemonic))
    return mnemonic in _A64_JUMPS


def is_call(isa: str, mnemonic: str) -> bool:
    return mnemonic in _CALLS[isa]


def is_ret(isa: str, mnemonic: str) -> bool:
    return mnemonic in _RETS[isa]


def jump_target(isa: str, mnemonic: str, operands: str) -> str | None:
    """Label a direct jump goes to, or None for indirect jumps."""
    if not operands:
        return None
    if isa == "x86_64":
        tgt = operands.split(",")[0].strip()
        if tgt.startswith("*") or tgt.startswith("%"):
            return None
    else:
        tgt = operands.split(",")[-1].strip()
        if tgt.startswith("#") or registers.canonical("aarch64", tgt):
            return None
    if _LABEL_RE.match(tgt + ":"):
        return tgt
    return None


def call_target(isa: str, operands: str) -> str | None:
    tgt = operands.split(",")[0].strip() if operands else ""
    if not tgt or tgt.startswith("*") or tgt.startswith("%"):
        return None
    return tgt.split("@")[0]


def detect_isa(text: str) -> str:
    """Guess the ISA of assembly text from register spellings."""
    if re.search(r"%\s*(r[a-z0-9]+|e[a-z]{2}|xmm\d+)\b", text):
        return "x86_64"
    if re.search(r"\b(mrs|stp|ldp|adrp)\b|\b[wx]\d{1,2}\s*,", text):
        return "aarch64"
    raise MalformedAssembly("cannot detect ISA: no recognizable register spellings")


@dataclass
class FunctionRegion:
    name: str
    start: int  # index of the label line
    end: int  # one past the last line belonging to the function

    def __contains__(self, index: int) -> bool:
        return self.start <= index < self.end


@dataclass
class AsmDocument:
    """Parsed assembly text with function boundaries resolved."""

    isa: str
    lines: list[AsmLine]
    functions: list[FunctionRegion] = field(default_factory=list)

    @classmethod
    def parse(cls, text: str, isa: str | None = None) -> "AsmDocument":
        if isa is None:
            isa = detect_isa(text)
        registers.check_isa(isa)
        lines = [parse_line(raw, isa) for raw in text.splitlines()]
        doc = cls(isa=isa, lines=lines)
        doc._find_functions()
        return doc

    def _find_functions(self) -> None:
        typed: set[str] = set()
        exported: set[str] = set()
        sizes: dict[str, int] = {}
        for i, line in enumerate(self.lines):
            if line.directive == ".type" and ("function" in line.operands):
                typed.add(line.operands.split(",")[0].strip())
            elif line.directive in (".globl", ".global"):
                exported.add(line.operands.strip())
            elif line.directive == ".size":
                sizes[line.operands.split(",")[0].strip()] = i
        names = typed or exported
        starts = [
            (i, line.label)
            for i, line in enumerate(self.lines)
            if line.label and line.label in names
        ]
        for pos, (i, name) in enumerate(starts):
            end = sizes.get(name)
            if end is None:
                end = starts[pos + 1][0] if pos + 1 < len(starts) else len(self.lines)
            else:
                end += 1
            self.functions.append(FunctionRegion(name=name, start=i, end=end))

    def function_named(self, name: str) -> FunctionRegion:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise MalformedAssembly(f"no function {name!r} in assembly text")

    def function_at(self, index: int) -> FunctionRegion | None:
        for fn in self.functions:
            if index in fn:
                return fn
        return None

    def labels_in(self, fn: FunctionRegion) -> dict[str, int]:
        out = {}
        for i in range(fn.start, fn.end):
            if self.lines[i].label:
                out[self.lines[i].label] = i
        return out

    def jumps_in(self, fn: FunctionRegion) -> list[tuple[int, str]]:
        """(line index, target label) of every direct jump in the function."""
        out = []
        for i in range(fn.start, fn.end):
            line = self.lines[i]
            if line.mnemonic and is_jump(self.isa, line.mnemonic):
                tgt = jump_target(self.isa, line.mnemonic, line.operands)
                if tgt is not None:
                    out.append((i, tgt))
        return out

    def is_probe_call(self, line: AsmLine) -> bool:
        if not line.mnemonic or not is_call(self.isa, line.mnemonic):
            return False
        tgt = call_target(self.isa, line.operands)
        return bool(tgt and tgt.startswith("noise_probe_"))

    def count_instructions(self, start: int, end: int) -> int:
        """Instructions in [start, end), probe-runtime calls excluded."""
        n = 0
        for i in range(start, end):
            line = self.lines[i]
            if line.is_instruction and not self.is_probe_call(line):
                n += 1
        return n

    def anchors(self) -> list[tuple[int, str]]:
        """(line index, region id) for every anchor comment."""
        out = []
        for i, line in enumerate(self.lines):
            if line.comment:
                m = ANCHOR_RE.search(line.comment)
                if m:
                    out.append((i, m.group(1)))
        return out

    def used_registers(self, fn: FunctionRegion) -> set[str]:
        """Canonical registers read or written anywhere in the function."""
        used: set[str] = set()
        for i in range(fn.start, fn.end):
            line = self.lines[i]
            if not line.is_instruction:
                continue
            used |= registers.registers_in_operands(self.isa, line.operands)
            used |= _implicit_registers(self.isa, line.mnemonic)
        return used

    def render(self) -> str:
        return "\n".join(line.raw for line in self.lines) + "\n"


_X86_IMPLICIT = {
    "mul": {"rax", "rdx"},
    "imul": {"rax", "rdx"},
    "div": {"rax", "rdx"},
    "idiv": {"rax", "rdx"},
    "cqo": {"rax", "rdx"},
    "cqto": {"rax", "rdx"},
    "cdq": {"rax", "rdx"},
    "cltq": {"rax"},
    "cdqe": {"rax"},
    "push": {"rsp"},
    "pop": {"rsp"},
    "syscall": {"rax", "rcx", "r11", "rdi", "rsi", "rdx", "r8", "r9", "r10"},
    "sal": {"rcx"},
    "sar": {"rcx"},
    "shl": {"rcx"},
    "shr": {"rcx"},
    "rol": {"rcx"},
    "ror": {"rcx"},
}
_STRING_OPS = {"rsi", "rdi", "rcx", "rax"}


def _implicit_registers(isa: str, mnemonic: str) -> set[str]:
    if isa == "aarch64":
        if mnemonic in ("bl", "blr"):
            return {"x30"}
        if mnemonic == "svc":
            return {f"x{i}" for i in range(9)}
        return set()
    base = mnemonic.rstrip("qlwb")
    if base in _X86_IMPLICIT:
        return _X86_IMPLICIT[base]
    if base.startswith("rep") or base in ("movs", "stos", "lods", "scas", "cmps"):
        return set(_STRING_OPS)
    if base in ("push", "pop"):
        return {"rsp"}
    return set()
