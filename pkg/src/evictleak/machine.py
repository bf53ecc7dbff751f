"""Single-core cache machine with an eviction-fed line fill buffer.

The model covers exactly the state an attacker can observe or influence:

* a 32 KiB, 64-set / 8-way / 64-byte-line write-back L1 data cache with
  true-LRU replacement,
* a 12-entry line fill buffer (LFB) whose entries are allocated both by
  demand fills *and* by write-backs of dirty lines leaving the L1 — the
  second path is the one that makes dirty victim data reachable,
* a flat backing store ("L2" here, standing in for everything beyond L1)
  organised as lazily materialised regions,
* a hardware-transaction layer whose aborts roll back architectural
  state (registers, stored bytes) but deliberately *not* fills or
  evictions, which are treated as microarchitectural and sticky.

Everything is deterministic. The machine itself owns no RNG; stochastic
behaviour (noisy transient forwards) only enters through the optional
``rng``/``noise`` arguments of :meth:`Machine.lfb_transient_pair`, so two
machines driven by the same op sequence are always bit-identical.

Addresses are plain ints. A line is identified by its base address
(``addr & ~63``); the L1 set index is ``(addr >> 6) & 63``.
"""

from __future__ import annotations

from dataclasses import dataclass

LINE = 64
SETS = 64
WAYS = 8
LFB_SLOTS = 12
PAGE = 4096

_LINE_MASK = ~(LINE - 1)
_ZERO_LINE = bytes(LINE)


class MemoryFault(Exception):
    """Architectural fault: unmapped address or wrong-domain access."""


class TransactionAbort(Exception):
    """A hardware transaction rolled back.

    Attributes:
        reason: short machine-readable cause (``"marked-line"``,
            ``"fault"``, ``"clflush"``, ``"privileged"``, ``"explicit"``).
        leak_offset: for ``"marked-line"`` aborts, the line offset of the
            aborting load. The transient forward window exposes LFB bytes
            at this offset; the exception is the only carrier because the
            machine state itself is rolled back.
    """

    def __init__(self, reason: str, leak_offset: int | None = None) -> None:
        super().__init__(reason)
        self.reason = reason
        self.leak_offset = leak_offset


class TsxDisabledError(Exception):
    """Transactions are disabled on this machine (mitigation in effect)."""


@dataclass(frozen=True)
class NoiseConfig:
    """Stochastic model of the transient-forward path.

    On each transient read the channel draws once:

    * with probability ``taa_success_prob`` the forward hits the primary
      entry (youngest write-back entry if one exists, else the youngest
      valid entry) and returns its true bytes;
    * with probability ``spurious_entry_prob`` it instead forwards from a
      uniformly chosen *other* valid entry, and each forwarded byte is
      independently replaced by 0x00 or 0xFF with probability
      ``zero_ff_inflation`` (the classic squashed-forward garbage);
    * otherwise the forward squashes entirely and yields zeros.
    """

    taa_success_prob: float = 1.0
    spurious_entry_prob: float = 0.0
    zero_ff_inflation: float = 0.0

    @staticmethod
    def off() -> "NoiseConfig":
        return NoiseConfig(1.0, 0.0, 0.0)

    @staticmethod
    def default() -> "NoiseConfig":
        return NoiseConfig(taa_success_prob=0.75, spurious_entry_prob=0.15,
                           zero_ff_inflation=0.3)

    @property
    def noiseless(self) -> bool:
        return self.taa_success_prob >= 1.0


class _Line:
    __slots__ = ("base", "data", "dirty", "stamp")

    def __init__(self) -> None:
        self.base: int | None = None
        self.data = bytearray(LINE)
        self.dirty = False
        self.stamp = 0


class _LfbEntry:
    __slots__ = ("base", "data", "valid", "age", "writeback")

    def __init__(self) -> None:
        self.base = 0
        self.data = bytearray(LINE)
        self.valid = False
        self.age = 0
        self.writeback = False


class _Region:
    __slots__ = ("base", "size", "domain", "fill")

    def __init__(self, base: int, size: int, domain: str, fill: int) -> None:
        self.base = base
        self.size = size
        self.domain = domain
        self.fill = fill


class Machine:
    """One physical core: L1-D, LFB, backing store, transactions.

    Both hyperthreads of a core share all of this state, so "cross-thread"
    scenarios simply interleave ops from two actors on one machine. Domain
    enforcement is architectural only: a load or store whose ``actor`` does
    not match the owning region's domain faults, exactly like a user-mode
    access to kernel memory — the transient paths are what get around it.
    """

    def __init__(self, *, tsx_enabled: bool = True) -> None:
        self.tsx_enabled = tsx_enabled
        self._sets = [[_Line() for _ in range(WAYS)] for _ in range(SETS)]
        self._lfb = [_LfbEntry() for _ in range(LFB_SLOTS)]
        self._stamp = 0          # monotonic LRU clock
        self._age = 0            # monotonic LFB allocation clock
        self.read_offset = 0     # line offset latched by the last load
        self.regs: dict[str, int] = {}
        self._marks: set[int] = set()   # line bases armed to abort in-txn
        self._regions: dict[int, _Region] = {}   # page base -> region
        self._l2: dict[int, bytearray] = {}      # materialised lines only
        self._txn = False
        self._undo: list[tuple[_Line, bytes, bool]] = []
        self._snap: tuple[dict[str, int], int] | None = None
        self.stats = {"loads": 0, "stores": 0, "fills": 0, "writebacks": 0,
                      "aborts": 0, "flushes": 0}

    # ---------------------------------------------------------------- memory

    def map_region(self, base: int, size: int, *, domain: str,
                   fill: int = 0) -> None:
        """Map ``size`` bytes at page-aligned ``base`` owned by ``domain``.

        Lines read before ever being written return ``fill`` in every byte;
        nothing is materialised until a write, so mapping is O(1) in size.
        """
        if base % PAGE or size % PAGE or size <= 0:
            raise ValueError("regions must be page-aligned and non-empty")
        region = _Region(base, size, domain, fill)
        for page in range(base, base + size, PAGE):
            if page in self._regions:
                raise ValueError(f"page {page:#x} already mapped")
            self._regions[page] = region

    def _region_for(self, addr: int) -> _Region | None:
        return self._regions.get(addr & ~(PAGE - 1))

    def _l2_read(self, base: int, region: _Region) -> bytes | bytearray:
        line = self._l2.get(base)
        if line is not None:
            return line
        if region.fill == 0:
            return _ZERO_LINE
        return bytes([region.fill]) * LINE

    def _l2_write(self, base: int, data: bytearray) -> None:
        line = self._l2.get(base)
        if line is None:
            self._l2[base] = bytearray(data)
        else:
            line[:] = data

    # ------------------------------------------------------------- internals

    def _abort(self, reason: str, leak_offset: int | None = None) -> None:
        """Roll back the running transaction and raise."""
        for line, old_bytes, old_dirty in reversed(self._undo):
            line.data[:] = old_bytes
            line.dirty = old_dirty
        assert self._snap is not None
        self.regs, self.read_offset = self._snap
        self._txn = False
        self._undo = []
        self._snap = None
        self.stats["aborts"] += 1
        raise TransactionAbort(reason, leak_offset)

    def _lfb_alloc(self) -> _LfbEntry:
        victim = None
        for entry in self._lfb:
            if not entry.valid:
                victim = entry
                break
        if victim is None:
            victim = min(self._lfb, key=lambda e: e.age)
        return victim

    def _lfb_fill(self, base: int, data, writeback: bool) -> None:
        entry = self._lfb_alloc()
        entry.base = base
        entry.data[:] = data
        entry.valid = True
        self._age += 1
        entry.age = self._age
        entry.writeback = writeback

    def _install(self, base: int, region: _Region) -> _Line:
        """Demand-fill ``base`` into L1, evicting the set's LRU way.

        The fill transits the LFB (one entry, demand data). If the evicted
        way is dirty its bytes transit the LFB *again* as a younger
        write-back entry and are stored through to L2 synchronously — the
        write-back entry is the freshest thing in the buffer afterwards.
        """
        data = self._l2_read(base, region)
        self._lfb_fill(base, data, False)
        self.stats["fills"] += 1
        ways = self._sets[(base >> 6) & 63]
        slot = None
        for line in ways:
            if line.base is None:
                slot = line
                break
        if slot is None:
            slot = ways[0]
            for line in ways:
                if line.stamp < slot.stamp:
                    slot = line
            if slot.dirty:
                self._l2_write(slot.base, slot.data)
                self._lfb_fill(slot.base, slot.data, True)
                self.stats["writebacks"] += 1
        slot.base = base
        slot.data[:] = data
        slot.dirty = False
        self._stamp += 1
        slot.stamp = self._stamp
        return slot

    def _lookup(self, base: int) -> _Line | None:
        for line in self._sets[(base >> 6) & 63]:
            if line.base == base:
                return line
        return None

    def _access(self, addr: int, n: int, actor: str) -> tuple[int, _Line]:
        """Common load/store front end; returns (line offset, L1 line)."""
        offset = addr & (LINE - 1)
        if offset + n > LINE:
            raise ValueError("access crosses a line boundary")
        base = addr & _LINE_MASK
        region = self._region_for(addr)
        if region is None or region.domain != actor:
            if self._txn:
                self._abort("fault")
            raise MemoryFault(f"{actor} access to {addr:#x}")
        if base in self._marks:
            if self._txn:
                self._abort("marked-line", addr & (LINE - 1))
            self._marks.discard(base)
        line = self._lookup(base)
        if line is None:
            line = self._install(base, region)
        else:
            self._stamp += 1
            line.stamp = self._stamp
        return offset, line

    # -------------------------------------------------------------- data ops

    def load(self, addr: int, n: int = 8, *, actor: str = "attacker") -> bytes:
        """Load ``n`` bytes (within one line). Latches ``read_offset``.

        Inside a transaction, a load that faults or touches a marked line
        aborts before any cache or LFB state changes — only the offset
        latch moves, and the abort rollback restores even that.
        """
        self.stats["loads"] += 1
        self.read_offset = addr & (LINE - 1)
        offset, line = self._access(addr, n, actor)
        return bytes(line.data[offset:offset + n])

    def store(self, addr: int, data: bytes, *, actor: str = "attacker") -> None:
        """Write-allocate store of ``data`` (within one line)."""
        self.stats["stores"] += 1
        offset, line = self._access(addr, len(data), actor)
        if self._txn:
            self._undo.append((line, bytes(line.data), line.dirty))
        line.data[offset:offset + len(data)] = data
        line.dirty = True

    def clflush(self, addr: int, *, actor: str = "attacker") -> None:
        """Flush one line and arm it to abort transactional touches.

        A dirty line's bytes leave through the LFB (write-back entry) and
        reach L2; a clean or absent line just gets the abort mark. Inside a
        transaction ``clflush`` itself aborts.
        """
        if self._txn:
            self._abort("clflush")
        base = addr & _LINE_MASK
        region = self._region_for(addr)
        if region is None or region.domain != actor:
            raise MemoryFault(f"{actor} clflush of {addr:#x}")
        line = self._lookup(base)
        if line is not None:
            if line.dirty:
                self._l2_write(base, line.data)
                self._lfb_fill(base, line.data, True)
                self.stats["writebacks"] += 1
            line.base = None
            line.dirty = False
        self._marks.add(base)
        self.stats["flushes"] += 1

    def verw(self) -> None:
        """Microcode buffer scrub: zero and invalidate every LFB entry."""
        if self._txn:
            self._abort("privileged")
        for entry in self._lfb:
            entry.valid = False
            entry.writeback = False
            entry.base = 0
            entry.age = 0
            entry.data[:] = _ZERO_LINE

    def l1d_flush(self) -> None:
        """Privileged whole-L1 flush; dirty lines go straight to L2.

        This path does not allocate LFB entries, which is exactly why it
        works as a mitigation where ``verw`` does not.
        """
        if self._txn:
            self._abort("privileged")
        for ways in self._sets:
            for line in ways:
                if line.base is not None:
                    if line.dirty:
                        self._l2_write(line.base, line.data)
                    line.base = None
                    line.dirty = False

    # ---------------------------------------------------------- transactions

    def xbegin(self) -> None:
        if not self.tsx_enabled:
            raise TsxDisabledError("transactional extensions are disabled")
        if self._txn:
            raise RuntimeError("nested transactions are not modelled")
        self._txn = True
        self._undo = []
        self._snap = (dict(self.regs), self.read_offset)

    def xend(self) -> None:
        if not self._txn:
            raise RuntimeError("xend outside a transaction")
        self._txn = False
        self._undo = []
        self._snap = None

    def xabort(self) -> None:
        """Explicit abort (models xabort / capacity / interrupt causes)."""
        if not self._txn:
            raise RuntimeError("xabort outside a transaction")
        self._abort("explicit")

    @property
    def in_txn(self) -> bool:
        return self._txn

    # ------------------------------------------------------------- transient

    def lfb_transient_pair(self, offset: int, *, rng=None,
                           noise: NoiseConfig | None = None) -> tuple[int, int]:
        """Bytes ``(offset, offset+1)`` a transient forward would expose.

        This is the simulator's stand-in for the squashed load's value; it
        reads the LFB without touching any state. Selection prefers the
        youngest write-back entry (dirty data in flight) and falls back to
        the youngest valid entry; an empty buffer forwards zeros. With a
        ``noise`` model and ``rng`` the draw follows :class:`NoiseConfig`.
        """
        if not 0 <= offset <= LINE - 2:
            raise ValueError("offset must be in [0, 62]")
        best = None
        best_wb = None
        for entry in self._lfb:
            if entry.valid:
                if best is None or entry.age > best.age:
                    best = entry
                if entry.writeback and (best_wb is None or entry.age > best_wb.age):
                    best_wb = entry
        primary = best_wb if best_wb is not None else best
        if primary is None:
            return (0, 0)
        if noise is None or noise.noiseless:
            return (primary.data[offset], primary.data[offset + 1])
        draw = rng.random()
        if draw < noise.taa_success_prob:
            return (primary.data[offset], primary.data[offset + 1])
        if draw < noise.taa_success_prob + noise.spurious_entry_prob:
            others = [e for e in self._lfb if e.valid and e is not primary]
            if not others:
                return (0, 0)
            chosen = others[rng.randrange(len(others))]
            pair = [chosen.data[offset], chosen.data[offset + 1]]
            for i in (0, 1):
                if rng.random() < noise.zero_ff_inflation:
                    pair[i] = 0x00 if rng.random() < 0.5 else 0xFF
            return (pair[0], pair[1])
        return (0, 0)

    # ------------------------------------------------------------ inspection

    def state_key(self):
        """Hashable digest of all architectural + microarchitectural state.

        Two machines are behaviourally identical iff their keys match. The
        key deliberately covers L1 (tags, data, dirty, LRU order), LFB
        (tags, data, validity, age order, origin), the materialised part of
        L2, registers, the read-offset latch, abort marks, and the
        transaction flag.
        """
        l1 = tuple(
            tuple((ln.base, bytes(ln.data), ln.dirty, ln.stamp) for ln in ways)
            for ways in self._sets
        )
        lfb = tuple((e.valid, e.base, bytes(e.data), e.age, e.writeback)
                    for e in self._lfb)
        l2 = tuple(sorted((b, bytes(d)) for b, d in self._l2.items()))
        regs = tuple(sorted(self.regs.items()))
        return (l1, lfb, l2, regs, self.read_offset,
                tuple(sorted(self._marks)), self._txn)

    def snapshot(self) -> dict:
        """JSON-ready snapshot (hex strings, stable field order).

        L2 appears as a delta: only lines that have been written. Data
        bytes are lowercase hex. Intended for reports and replay checks.
        """
        l1 = []
        for set_index, ways in enumerate(self._sets):
            for way, line in enumerate(ways):
                if line.base is not None:
                    l1.append({
                        "set": set_index,
                        "way": way,
                        "base": f"{line.base:#x}",
                        "dirty": line.dirty,
                        "lru": line.stamp,
                        "data": bytes(line.data).hex(),
                    })
        lfb = []
        for slot, entry in enumerate(self._lfb):
            if entry.valid:
                lfb.append({
                    "slot": slot,
                    "base": f"{entry.base:#x}",
                    "age": entry.age,
                    "writeback": entry.writeback,
                    "data": bytes(entry.data).hex(),
                })
        l2 = [{"base": f"{base:#x}", "data": bytes(data).hex()}
              for base, data in sorted(self._l2.items())]
        return {
            "l1": l1,
            "lfb": lfb,
            "l2_delta": l2,
            "regs": dict(sorted(self.regs.items())),
            "read_offset": self.read_offset,
            "marks": [f"{m:#x}" for m in sorted(self._marks)],
            "in_txn": self._txn,
            "stats": dict(self.stats),
        }

    def poke(self, addr: int, data: bytes) -> None:
        """Plant bytes directly in the backing store — setup use only.

        Models data that was already in memory before the clock starts (a
        key file read at boot, a mapped binary). Touches no cache or LFB
        state and performs no domain check; online code never calls this.
        """
        pos = 0
        while pos < len(data):
            base = (addr + pos) & _LINE_MASK
            offset = (addr + pos) & (LINE - 1)
            take = min(len(data) - pos, LINE - offset)
            region = self._region_for(addr + pos)
            if region is None:
                raise MemoryFault(f"unmapped {addr + pos:#x}")
            line = self._l2.get(base)
            if line is None:
                line = bytearray(self._l2_read(base, region))
                self._l2[base] = line
            line[offset:offset + take] = data[pos:pos + take]
            pos += take

    def l1_contents(self, set_index: int) -> list[tuple[int, bool]]:
        """(base, dirty) of the valid ways in one set, LRU-oldest first."""
        lines = [ln for ln in self._sets[set_index] if ln.base is not None]
        lines.sort(key=lambda ln: ln.stamp)
        return [(ln.base, ln.dirty) for ln in lines]

    def memory_bytes(self, addr: int, n: int) -> bytes:
        """Coherent view of memory (L1 over L2) — harness/oracle use only.

        Attack and reconstruction code never calls this; it exists so tests
        can check ground truth without disturbing cache state.
        """
        out = bytearray()
        while n:
            base = addr & _LINE_MASK
            offset = addr & (LINE - 1)
            take = min(n, LINE - offset)
            region = self._region_for(addr)
            if region is None:
                raise MemoryFault(f"unmapped {addr:#x}")
            line = self._lookup(base)
            src = line.data if line is not None else self._l2_read(base, region)
            out += src[offset:offset + take]
            addr += take
            n -= take
        return bytes(out)
