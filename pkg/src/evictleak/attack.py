"""Attacker-side building blocks: evict, leak, tally, stitch.

The write-path attack forces a victim's *dirty* line out of L1 so its
bytes transit the fill buffer as a write-back, then reads them through
the abort window. The read-path attack evicts first so the victim's next
*load* refills through the buffer. Reads only work from the sibling
hyperthread — a clean eviction allocates nothing, so a same-thread
attacker has no leftover to sample once it has the core to itself.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .machine import LINE, PAGE, Machine
from .taa import TaaChannel

__all__ = [
    "UnsupportedModeError", "Workspace", "EvictionSet", "LeakHistogram",
    "StitchedLine", "attack_write", "attack_read", "stitch_line",
    "PageDump", "dump_page",
]

EVICT_WAYS = 8          # ways needed to displace a line under true LRU
MAX_EVICT = 12


class UnsupportedModeError(Exception):
    """The requested attack variant cannot work in the requested mode."""


class Workspace:
    """Attacker-owned pages: one leak page plus an eviction buffer.

    Page ``i`` of the eviction buffer contributes one line to every cache
    set, so ``base + i*PAGE + s*LINE`` for ``i < size`` is an eviction set
    for set ``s``.
    """

    def __init__(self, machine: Machine, *, base: int = 0x7E0000000000) -> None:
        self.machine = machine
        self.leak_page = base
        self.evict_base = base + PAGE
        machine.map_region(base, (1 + MAX_EVICT) * PAGE, domain="attacker")

    def eviction_set(self, set_index: int, size: int = EVICT_WAYS) -> "EvictionSet":
        return EvictionSet(self.machine, self.evict_base, set_index, size)


class EvictionSet:
    """``size`` attacker lines that all land in one cache set."""

    def __init__(self, machine: Machine, buffer_base: int, set_index: int,
                 size: int = EVICT_WAYS) -> None:
        if not 1 <= size <= MAX_EVICT:
            raise ValueError(f"size must be in [1, {MAX_EVICT}]")
        self.machine = machine
        self.set_index = set_index
        self.addrs = [buffer_base + i * PAGE + set_index * LINE
                      for i in range(size)]

    def run(self) -> None:
        load = self.machine.load
        for addr in self.addrs:
            load(addr, 1, actor="attacker")


class LeakHistogram:
    """Pair counts keyed ``(set_index, offset)``."""

    def __init__(self) -> None:
        self.counts: dict[tuple[int, int], Counter] = {}

    def add(self, set_index: int, offset: int, pair: tuple[int, int]) -> None:
        key = (set_index, offset)
        counter = self.counts.get(key)
        if counter is None:
            counter = self.counts[key] = Counter()
        counter[pair] += 1

    def modal_pair(self, set_index: int, offset: int) -> tuple[int, int] | None:
        """Most frequent pair; ties break to the smallest pair value."""
        counter = self.counts.get((set_index, offset))
        if not counter:
            return None
        return min(counter.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    def pairs_seen(self, set_index: int, offset: int) -> Counter:
        return self.counts.get((set_index, offset), Counter())

    def merge(self, other: "LeakHistogram") -> None:
        for key, counter in other.counts.items():
            own = self.counts.get(key)
            if own is None:
                self.counts[key] = Counter(counter)
            else:
                own.update(counter)

    def csv_bytes(self) -> bytes:
        """Rows ``set,offset,b0,b1,count`` in deterministic order."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["set", "offset", "b0", "b1", "count"])
        for (set_index, offset) in sorted(self.counts):
            counter = self.counts[(set_index, offset)]
            for (b0, b1), count in sorted(counter.items()):
                writer.writerow([set_index, offset, b0, b1, count])
        return buf.getvalue().encode()

    def write_csv(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.csv_bytes())


def attack_write(machine: Machine, channel: TaaChannel,
                 victim_step: Callable[[], None], evict: EvictionSet, *,
                 offsets: Iterable[int], iterations: int,
                 verw_before_evict: bool = False,
                 verw_after_evict: bool = False,
                 l1d_flush_after_victim: bool = False,
                 hist: LeakHistogram | None = None) -> LeakHistogram:
    """Write-path attack: let the victim dirty a line, evict it, sample.

    Works identically whether the victim runs on the sibling thread or
    time-slices with the attacker — the write-back happens on eviction,
    which the attacker controls, after any switch-time scrubbing. The
    ``verw_*``/``l1d_flush_*`` knobs place mitigations at the positions a
    kernel could actually use: after the victim's quantum (before the
    attacker evicts) or after the eviction.
    """
    if hist is None:
        hist = LeakHistogram()
    set_index = evict.set_index
    for offset in offsets:
        for _ in range(iterations):
            victim_step()
            if l1d_flush_after_victim:
                machine.l1d_flush()
            if verw_before_evict:
                machine.verw()
            evict.run()
            if verw_after_evict:
                machine.verw()
            result = channel.leak(offset)
            hist.add(set_index, offset, result.pair())
    return hist


def attack_read(machine: Machine, channel: TaaChannel,
                victim_step: Callable[[], None], evict: EvictionSet, *,
                offsets: Iterable[int], iterations: int,
                mode: str = "cross-thread",
                verw_before_leak: bool = False,
                hist: LeakHistogram | None = None) -> LeakHistogram:
    """Read-path attack: evict, let the victim reload, sample the refill.

    Only the cross-thread form exists. Same-thread, the attacker can only
    run after the victim's quantum ends, by which point the victim's line
    sits clean in L1: evicting it then allocates no fill-buffer entry and
    there is nothing to sample, so ``mode="same-thread"`` raises
    :class:`UnsupportedModeError` instead of silently returning zeros.
    """
    if mode != "cross-thread":
        raise UnsupportedModeError(
            "read-path leaks need a sibling-thread victim: a clean eviction "
            "does not transit the fill buffer")
    if hist is None:
        hist = LeakHistogram()
    set_index = evict.set_index
    for offset in offsets:
        for _ in range(iterations):
            evict.run()
            victim_step()
            if verw_before_leak:
                machine.verw()
            result = channel.leak(offset)
            hist.add(set_index, offset, result.pair())
    return hist


@dataclass(frozen=True)
class StitchedLine:
    """A 64-byte line rebuilt from overlapping byte-pair readings.

    ``agreement[j]`` is True only when byte ``j`` had two witnesses (the
    high byte of pair ``j-1`` and the low byte of pair ``j``) and they
    matched; ``confidence`` is the agreeing fraction of double-witness
    positions.
    """

    data: bytes
    agreement: tuple[bool, ...]
    confidence: float


def stitch_line(pairs: Mapping[int, tuple[int, int] | None]) -> StitchedLine:
    """Rebuild a line from modal pairs at offsets 0..62.

    Byte 0 only ever has one witness (pair 0's low byte). Every other byte
    ``j`` prefers pair ``j-1``'s high byte and falls back to pair ``j``'s
    low byte; positions with no witness come back as zero with the
    agreement flag down.
    """
    data = bytearray(LINE)
    agreement = [False] * LINE
    agreeing = 0
    evaluable = 0
    first = pairs.get(0)
    if first is not None:
        data[0] = first[0]
    for j in range(1, LINE):
        left = pairs.get(j - 1)
        right = pairs.get(j) if j <= LINE - 2 else None
        w_left = left[1] if left is not None else None
        w_right = right[0] if right is not None else None
        if w_left is not None:
            data[j] = w_left
        elif w_right is not None:
            data[j] = w_right
        if w_left is not None and w_right is not None:
            evaluable += 1
            if w_left == w_right:
                agreement[j] = True
                agreeing += 1
    confidence = agreeing / evaluable if evaluable else 0.0
    return StitchedLine(bytes(data), tuple(agreement), confidence)


@dataclass(frozen=True)
class PageDump:
    """Recovered image of one 4 KiB page."""

    page_base: int
    lines: tuple[StitchedLine, ...]

    @property
    def data(self) -> bytes:
        return b"".join(line.data for line in self.lines)

    @property
    def confidence(self) -> float:
        return sum(line.confidence for line in self.lines) / len(self.lines)


def dump_page(machine: Machine, channel: TaaChannel, workspace: Workspace,
              touch_line: Callable[[int], None], page_base: int, *,
              iterations: int = 1,
              offsets: Sequence[int] | None = None,
              hist: LeakHistogram | None = None,
              verw_before_evict: bool = False,
              l1d_flush_after_victim: bool = False) -> PageDump:
    """Recover a whole victim page through the write-path attack.

    ``touch_line(i)`` must make the victim dirty line ``i`` of the page
    (a page-aligned base puts line ``i`` in cache set ``i``). ``offsets``
    restricts which pair offsets are sampled — handy when parts of the
    page are known to be uninteresting.
    """
    if page_base % PAGE:
        raise ValueError("page_base must be page-aligned")
    if offsets is None:
        offsets = range(LINE - 1)
    stitched = []
    for index in range(LINE):
        evict = workspace.eviction_set(index)
        line_hist = attack_write(
            machine, channel, lambda: touch_line(index), evict,
            offsets=offsets, iterations=iterations, hist=hist,
            verw_before_evict=verw_before_evict,
            l1d_flush_after_victim=l1d_flush_after_victim)
        pairs = {off: line_hist.modal_pair(index, off) for off in offsets}
        stitched.append(stitch_line(pairs))
    return PageDump(page_base, tuple(stitched))
