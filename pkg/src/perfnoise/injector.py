"""Noise injection into compiled assembly text.

The workflow: compile the target with ``-S``, mark the loop of interest
with an anchor comment (the NOISE_ANCHOR macro from runtime/noise_anchor.h
expands to one), then rewrite the text here.  Payload instructions are
spliced immediately after the anchor so they execute once per iteration;
overhead (buffer address materialization, register spills) is hoisted
outside the loop.

Loop detection is purely syntactic: the innermost pair of a label and a
later direct jump back to it that encloses the anchor line.  That is the
shape compilers emit for natural loops on both supported ISAs.

Overhead placement has two strategies.  When the loop is entered only by
falling through its head label and has no side exits, the prologue goes
right before the label and the epilogue right after the backward jump.
If any jump from outside the loop span lands inside it (gcc -O0 rotates
loops that way) or any jump inside leaves it, that placement would be
skipped or bypassed at run time, so the prologue moves to function entry
and restores are planted before every return instead.  Both strategies
keep every overhead instruction out of the loop body.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict

from . import asmfile, patterns, registers
from .asmfile import AsmDocument
from .errors import (
    AnchorOutsideLoop,
    AuditMismatch,
    DuplicateRegionId,
    MalformedAssembly,
    RegisterPressureTooHigh,
)

INJECTED_MARK = "NOISE-INJECTED"


@dataclass(frozen=True)
class InjectionSite:
    """A resolved anchor: where noise for one region goes."""

    region_id: str
    function: str
    isa: str
    anchor_index: int  # 0-based line index of the anchor comment
    loop_head: int  # line index of the loop label
    loop_tail: int  # line index of the backward jump
    loop_body_size: int  # instructions per iteration, probe calls excluded

    @property
    def loop_body_span(self) -> tuple[int, int]:
        return (self.loop_head, self.loop_tail)


@dataclass
class InjectionReport:
    """What one injection did; audit() recomputes one from the text."""

    region_id: str
    mode: str
    isa: str
    k: int
    payload_count: int
    overhead_count: int
    registers_used: list[str] = field(default_factory=list)
    saved_registers: list[str] = field(default_factory=list)
    spill_inserted: bool = False
    placement: str = "adjacent"  # or "function-entry"
    original_preserved: bool = True
    loop_body_size: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def locate_anchors(asm_text: str, isa: str | None = None) -> list[InjectionSite]:
    """Resolve every anchor comment to its innermost enclosing loop.

    Raises DuplicateRegionId if a region id is anchored twice and
    AnchorOutsideLoop if an anchor has no enclosing loop.
    """
    doc = AsmDocument.parse(asm_text, isa)
    sites = []
    seen: set[str] = set()
    for index, region_id in doc.anchors():
        if region_id in seen:
            raise DuplicateRegionId(f"region {region_id!r} is anchored more than once")
        seen.add(region_id)
        sites.append(_resolve_site(doc, index, region_id))
    return sites


def _resolve_site(doc: AsmDocument, anchor_index: int, region_id: str) -> InjectionSite:
    fn = doc.function_at(anchor_index)
    if fn is None:
        raise AnchorOutsideLoop(
            f"anchor {region_id!r} at line {anchor_index + 1} is outside any function"
        )
    labels = doc.labels_in(fn)
    best: tuple[int, int] | None = None
    for jump_index, target in doc.jumps_in(fn):
        head = labels.get(target)
        if head is None or not (head < anchor_index < jump_index):
            continue  # not a backward jump around the anchor
        if best is None or (jump_index - head) < (best[1] - best[0]):
            best = (head, jump_index)
    if best is None:
        raise AnchorOutsideLoop(
            f"anchor {region_id!r} at line {anchor_index + 1} is not inside a loop"
        )
    head, tail = best
    body_size = doc.count_instructions(head + 1, tail + 1)
    return InjectionSite(
        region_id=region_id,
        function=fn.name,
        isa=doc.isa,
        anchor_index=anchor_index,
        loop_head=head,
        loop_tail=tail,
        loop_body_size=body_size,
    )


def scan_free_registers(
    asm_text: str,
    function_symbol: str,
    register_class: str,
    needed: int,
    isa: str | None = None,
    *,
    call_safe: bool = False,
    exclude: set[str] | None = None,
) -> tuple[list[str], list[str]]:
    """Pick `needed` registers safe to clobber in a function.

    Returns (pool, must_save), both canonical names.  Registers the
    function never touches are preferred; ABI callee-saved members of the
    pool always land in must_save because the function's caller expects
    them back.  With call_safe=True only callee-saved registers qualify
    (caller-saved values die across calls inside the loop).
    """
    doc = AsmDocument.parse(asm_text, isa)
    return _scan_free(doc, function_symbol, register_class, needed,
                      call_safe=call_safe, exclude=exclude)


def _scan_free(
    doc: AsmDocument,
    function_symbol: str,
    register_class: str,
    needed: int,
    *,
    call_safe: bool = False,
    exclude: set[str] | None = None,
) -> tuple[list[str], list[str]]:
    if register_class not in registers.REGISTER_CLASSES:
        raise ValueError(f"unknown register class {register_class!r}")
    fn = doc.function_named(function_symbol)
    used = doc.used_registers(fn)
    callee = registers.CALLEE_SAVED[doc.isa]
    pool: list[str] = []
    must_save: list[str] = []
    for cand in registers.CANDIDATES[(doc.isa, register_class)]:
        if len(pool) == needed:
            break
        if cand in used or (exclude and cand in exclude):
            continue
        if call_safe and cand not in callee:
            continue
        pool.append(cand)
        if cand in callee:
            must_save.append(cand)
    if len(pool) < needed:
        raise RegisterPressureTooHigh(
            f"function {function_symbol!r} leaves only {len(pool)} free "
            f"{register_class} registers, {needed} needed"
        )
    return pool, must_save


def _entry_by_jump(doc: AsmDocument, fn, head: int, tail: int) -> bool:
    labels = doc.labels_in(fn)
    for jump_index, target in doc.jumps_in(fn):
        if head <= jump_index <= tail:
            continue
        tgt = labels.get(target)
        if tgt is not None and head <= tgt <= tail:
            return True
    return False


def _side_exit(doc: AsmDocument, fn, head: int, tail: int) -> bool:
    labels = doc.labels_in(fn)
    for i in range(head + 1, tail):
        line = doc.lines[i]
        if not line.is_instruction:
            continue
        if asmfile.is_ret(doc.isa, line.mnemonic):
            return True
        if asmfile.is_jump(doc.isa, line.mnemonic):
            target = asmfile.jump_target(doc.isa, line.mnemonic, line.operands)
            if target is None:
                return True  # indirect jump: assume it can leave
            tgt = labels.get(target)
            if tgt is None or not (head <= tgt <= tail):
                return True
    return False


def _body_has_calls(doc: AsmDocument, head: int, tail: int) -> bool:
    for i in range(head + 1, tail):
        line = doc.lines[i]
        if line.is_instruction and asmfile.is_call(doc.isa, line.mnemonic):
            return True
    return False


def _function_entry_index(doc: AsmDocument, fn) -> int:
    """First line index at which injected code would execute on entry."""
    for i in range(fn.start + 1, fn.end):
        line = doc.lines[i]
        if line.is_instruction or line.label:
            return i
    return fn.start + 1


def _ret_indexes(doc: AsmDocument, fn) -> list[int]:
    return [
        i
        for i in range(fn.start, fn.end)
        if doc.lines[i].is_instruction and asmfile.is_ret(doc.isa, doc.lines[i].mnemonic)
    ]


def _indent(lines: list[str]) -> list[str]:
    return ["\t" + text for text in lines]


def inject(
    asm_text: str,
    site: InjectionSite,
    pattern: patterns.NoisePattern,
    k: int,
    buffers: patterns.NoiseBufferSpec | None = None,
) -> tuple[str, InjectionReport]:
    """Splice k payload copies of the pattern at the site.

    Returns the rewritten text and a report of what was added.  The
    original text is never reordered or removed, so it survives as an
    ordered subsequence of the output.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    doc = AsmDocument.parse(asm_text, site.isa)
    cp = patterns.comment_prefix(site.isa)
    anchor_comment = doc.lines[site.anchor_index].comment or ""
    if asmfile.ANCHOR_RE.search(anchor_comment) is None:
        raise MalformedAssembly(
            f"line {site.anchor_index + 1} is not the anchor of {site.region_id!r}"
        )
    for line in doc.lines:
        if line.comment and INJECTED_MARK in line.comment and site.region_id in line.comment:
            raise MalformedAssembly(
                f"region {site.region_id!r} already carries an injection"
            )

    fn = doc.function_named(site.function)
    head, tail = site.loop_head, site.loop_tail
    mode = pattern.mode

    fallback = _entry_by_jump(doc, fn, head, tail) or _side_exit(doc, fn, head, tail)
    body_calls = _body_has_calls(doc, head, tail)
    # Registers that must keep their value while the loop runs (the l1
    # base and the chase pool) cannot live in caller-saved registers if
    # the body calls out, nor if the prologue lands at function entry and
    # anything between entry and the loop calls out.
    persist_unsafe = body_calls or (
        fallback and _body_has_calls(doc, _function_entry_index(doc, fn) - 1, head + 1)
    )

    needs_base = mode.needs_base or mode.chase
    pool: list[str] = []
    must_save: list[str] = []
    base: str | None = None
    scratch: str | None = None
    taken: set[str] = set()
    if k > 0 or needs_base:
        pool, must_save = _scan_free(
            doc,
            site.function,
            mode.register_class,
            pattern.register_pool_size,
            call_safe=persist_unsafe and mode.chase,
        )
        taken |= set(pool)
    if needs_base:
        (base_l, save_b) = _scan_free(
            doc, site.function, "gp", 1,
            call_safe=persist_unsafe and mode.needs_base,
            exclude=taken,
        )
        base = base_l[0]
        must_save = must_save + save_b
        taken |= {base}
    if must_save and site.isa == "aarch64":
        # Spills need a gp scratch to address the slots; the base register
        # doubles as one when present.
        if base is not None:
            scratch = base
        else:
            (scr_l, save_s) = _scan_free(doc, site.function, "gp", 1, exclude=taken)
            if save_s:
                # A scratch that itself needs saving cannot bootstrap the
                # spill sequence.
                raise RegisterPressureTooHigh(
                    f"no caller-saved gp scratch left in {site.function!r} for spills"
                )
            scratch = scr_l[0]

    payload = patterns.generate_payload(
        mode.name, site.isa, k, pool, base=base and registers.gp_name(site.isa, base)
    )
    prologue, epilogue = patterns.generate_overhead(
        mode.name,
        site.isa,
        buffers,
        saved_registers=must_save,
        pool=pool if mode.chase else (),
        base=base,
        scratch=scratch,
    )

    insert_after: dict[int, list[str]] = {}
    insert_before: dict[int, list[str]] = {}

    if payload:
        block = [f"{cp} {INJECTED_MARK} payload region={site.region_id} mode={mode.name} k={k}"]
        block += _indent(payload)
        insert_after[site.anchor_index] = block

    placement = "adjacent"
    if prologue or epilogue:
        pro_block = [f"{cp} {INJECTED_MARK} prologue region={site.region_id} mode={mode.name}"]
        pro_block += _indent(prologue)
        epi_block = [f"{cp} {INJECTED_MARK} epilogue region={site.region_id} mode={mode.name}"]
        epi_block += _indent(epilogue)
        if fallback:
            placement = "function-entry"
            insert_before.setdefault(_function_entry_index(doc, fn), []).extend(pro_block)
            if epilogue:
                for ret_index in _ret_indexes(doc, fn):
                    insert_before.setdefault(ret_index, []).extend(list(epi_block))
        else:
            insert_before.setdefault(head, []).extend(pro_block)
            if epilogue:
                insert_after.setdefault(tail, []).extend(epi_block)

    out: list[str] = []
    for i, line in enumerate(doc.lines):
        if i in insert_before:
            out += insert_before[i]
        out.append(line.raw)
        if i in insert_after:
            out += insert_after[i]
    new_text = "\n".join(out) + "\n"

    payload_count, overhead_count = patterns.count_payload_overhead(
        payload, prologue, epilogue
    )
    report = InjectionReport(
        region_id=site.region_id,
        mode=mode.name,
        isa=site.isa,
        k=k,
        payload_count=payload_count,
        overhead_count=overhead_count,
        registers_used=sorted(taken),
        saved_registers=list(must_save),
        spill_inserted=bool(must_save),
        placement=placement,
        loop_body_size=site.loop_body_size,
    )
    return new_text, report


def _subsequence_split(
    before: list[str], after: list[str]
) -> tuple[bool, list[int]]:
    """Greedy order-preserving match of before inside after.

    Returns (all matched, indexes of after-lines that are additions).
    """
    added = []
    j = 0
    for i, line in enumerate(after):
        if j < len(before) and line == before[j]:
            j += 1
        else:
            added.append(i)
    return j == len(before), added


def audit(
    asm_before: str,
    asm_after: str,
    site: InjectionSite,
    k: int,
    pattern: patterns.NoisePattern,
) -> InjectionReport:
    """Recount an injection from the texts alone.

    Independently of inject()'s bookkeeping: recovers added lines by
    subsequence diff, classifies them by instruction shape, re-resolves
    the loop, and checks that payload sits inside the body, overhead
    outside, and the body grew by exactly k * pattern_length.
    Raises AuditMismatch when any of that fails.
    """
    before_lines = asm_before.splitlines()
    after_lines = asm_after.splitlines()
    preserved, added = _subsequence_split(before_lines, after_lines)
    if not preserved:
        raise AuditMismatch("original text is not an ordered subsequence of the output")

    doc = AsmDocument.parse(asm_after, site.isa)
    added_set = set(added)
    payload_re = re.compile(pattern.payload_re)

    # Re-resolve the anchor in the rewritten text.
    anchor_index = None
    for idx, region in doc.anchors():
        if region == site.region_id:
            anchor_index = idx
            break
    if anchor_index is None:
        raise AuditMismatch(f"anchor {site.region_id!r} vanished from the output")
    new_site = _resolve_site(doc, anchor_index, site.region_id)
    head, tail = new_site.loop_head, new_site.loop_tail

    payload_count = 0
    overhead_count = 0
    saved = False
    for i in added:
        line = doc.lines[i]
        if not line.is_instruction:
            continue
        text = (line.mnemonic or "") + (" " + line.operands if line.operands else "")
        if payload_re.fullmatch(text.replace("\t", " ").strip()):
            if not (head < i <= tail):
                raise AuditMismatch(
                    f"payload instruction at line {i + 1} sits outside the loop body"
                )
            payload_count += 1
        else:
            if head < i <= tail:
                raise AuditMismatch(
                    f"overhead instruction at line {i + 1} landed inside the loop body"
                )
            overhead_count += 1
            if patterns.SPILL_SYMBOL in line.operands:
                saved = True

    if payload_count != k * pattern.pattern_length:
        raise AuditMismatch(
            f"payload recount {payload_count} != k * pattern_length "
            f"= {k * pattern.pattern_length}"
        )

    body_after = doc.count_instructions(head + 1, tail + 1)
    added_in_body = sum(
        1 for i in added if head < i <= tail and doc.lines[i].is_instruction
    )
    if body_after - added_in_body != site.loop_body_size:
        raise AuditMismatch(
            f"loop body changed size: {body_after - added_in_body} original "
            f"instructions vs {site.loop_body_size} before injection"
        )

    return InjectionReport(
        region_id=site.region_id,
        mode=pattern.mode.name,
        isa=site.isa,
        k=k,
        payload_count=payload_count,
        overhead_count=overhead_count,
        spill_inserted=saved,
        original_preserved=True,
        loop_body_size=site.loop_body_size,
    )
