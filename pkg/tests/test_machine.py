"""Cache/LFB machine tests: hand-derived golden traces plus a fuzz
against an independently written reference model."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evictleak.machine import (
    LINE,
    LFB_SLOTS,
    PAGE,
    WAYS,
    Machine,
    MemoryFault,
    NoiseConfig,
    TransactionAbort,
    TsxDisabledError,
)

ATT = 0x100000            # attacker region: plenty of pages
VIC = 0x300000            # victim page


def make_machine() -> Machine:
    m = Machine()
    m.map_region(ATT, 16 * PAGE, domain="attacker")
    m.map_region(VIC, PAGE, domain="victim")
    return m


def set0_line(i: int) -> int:
    """i-th distinct attacker line that maps to cache set 0."""
    return ATT + i * PAGE


# ------------------------------------------------------------ golden traces

def test_dirty_eviction_transits_fill_buffer():
    """store-miss -> 8 conflicting fills -> write-back entry holds the data."""
    m = make_machine()
    secret = bytes(range(0xA0, 0xA0 + 8))
    m.store(set0_line(0), secret)
    assert m.stats["stores"] == 1 and m.stats["fills"] == 1
    # the store's own demand fill carried the pre-store line (zeros)
    assert m.lfb_transient_pair(0) == (0, 0)

    for i in range(1, WAYS):           # fill the set: no eviction yet
        m.load(set0_line(i), 1)
    assert m.stats["writebacks"] == 0
    m.load(set0_line(WAYS), 1)         # ninth line: LRU way (the store) leaves
    assert m.stats["writebacks"] == 1
    assert m.lfb_transient_pair(0) == (secret[0], secret[1])
    assert m.lfb_transient_pair(6) == (secret[6], secret[7])
    # the write-back also reached the backing store, and the line is gone
    assert m.memory_bytes(set0_line(0), 8) == secret
    assert set0_line(0) not in [b for b, _ in m.l1_contents(0)]


def test_true_lru_respects_touches():
    m = make_machine()
    for i in range(WAYS):
        m.load(set0_line(i), 1)
    m.load(set0_line(0), 1)            # refresh line 0: line 1 is now LRU
    m.load(set0_line(WAYS), 1)
    bases = [b for b, _ in m.l1_contents(0)]
    assert set0_line(1) not in bases
    assert set0_line(0) in bases
    # oldest-first ordering is exactly the access order
    expected = [set0_line(i) for i in (2, 3, 4, 5, 6, 7, 0, 8)]
    assert bases == expected


def test_clflush_dirty_line_writes_back_and_arms_abort():
    m = make_machine()
    addr = set0_line(0) + 16
    secret = b"\xde\xad\xbe\xef\x01\x02\x03\x04"
    m.store(addr, secret)
    m.clflush(addr)
    assert m.lfb_transient_pair(16) == (0xDE, 0xAD)
    assert m.l1_contents(0) == []
    assert m.memory_bytes(addr, 8) == secret

    m.xbegin()
    with pytest.raises(TransactionAbort) as exc:
        m.load(addr, 1)
    assert exc.value.reason == "marked-line"
    assert exc.value.leak_offset == 16
    assert not m.in_txn
    assert m.stats["aborts"] == 1

    # a completed (non-transactional) access disarms the mark
    assert m.load(addr, 8) == secret
    m.xbegin()
    assert m.load(addr, 8) == secret
    m.xend()


def test_clflush_clean_line_allocates_nothing():
    m = make_machine()
    m.load(set0_line(0), 8)
    before = len(m.snapshot()["lfb"])
    m.clflush(set0_line(0))
    assert len(m.snapshot()["lfb"]) == before
    assert m.l1_contents(0) == []


def test_clflush_inside_transaction_aborts():
    m = make_machine()
    m.xbegin()
    with pytest.raises(TransactionAbort) as exc:
        m.clflush(set0_line(0))
    assert exc.value.reason == "clflush"


def test_abort_rolls_back_stores_but_not_fills():
    m = make_machine()
    m.store(set0_line(0), b"\x11" * 8)
    m.regs["r1"] = 5
    m.load(set0_line(0), 1)
    fills_before = m.stats["fills"]

    m.xbegin()
    m.store(set0_line(0), b"\x99" * 8)     # will roll back
    m.load(set0_line(1), 1)                # fill survives the abort
    m.regs["r1"] = 77
    with pytest.raises(TransactionAbort) as exc:
        m.xabort()
    assert exc.value.reason == "explicit"

    assert m.memory_bytes(set0_line(0), 8) == b"\x11" * 8
    assert m.regs["r1"] == 5
    assert m.stats["fills"] == fills_before + 1
    assert set0_line(1) in [b for b, _ in m.l1_contents(0)]


def test_commit_keeps_transactional_stores():
    m = make_machine()
    m.xbegin()
    m.store(set0_line(0), b"\x42" * 8)
    m.xend()
    assert m.memory_bytes(set0_line(0), 8) == b"\x42" * 8


def test_in_transaction_fault_aborts_cleanly():
    m = make_machine()
    m.xbegin()
    with pytest.raises(TransactionAbort) as exc:
        m.load(VIC, 1)                     # wrong domain for "attacker"
    assert exc.value.reason == "fault"
    assert not m.in_txn
    # outside a transaction the same access is an architectural fault
    with pytest.raises(MemoryFault):
        m.load(VIC, 1)


def test_verw_scrubs_every_entry():
    m = make_machine()
    m.store(set0_line(0), b"\xaa" * 8)
    m.clflush(set0_line(0))
    assert m.lfb_transient_pair(0) != (0, 0)
    m.verw()
    assert m.lfb_transient_pair(0) == (0, 0)
    assert m.snapshot()["lfb"] == []
    m.verw()                               # idempotent on an empty buffer
    assert m.snapshot()["lfb"] == []
    m.xbegin()
    with pytest.raises(TransactionAbort) as exc:
        m.verw()
    assert exc.value.reason == "privileged"


def test_l1d_flush_bypasses_fill_buffer():
    m = make_machine()
    m.verw()
    m.store(set0_line(0), b"\x77" * 8)     # one demand-fill entry
    entries_before = len(m.snapshot()["lfb"])
    image_before = m.memory_bytes(ATT, 4 * PAGE)
    m.l1d_flush()
    assert len(m.snapshot()["lfb"]) == entries_before
    assert m.l1_contents(0) == []
    # lossless: the coherent memory image is unchanged
    assert m.memory_bytes(ATT, 4 * PAGE) == image_before
    assert m.memory_bytes(set0_line(0), 8) == b"\x77" * 8
    m.l1d_flush()                          # empty-cache flush is a no-op
    assert m.l1_contents(0) == []


def test_writeback_residue_survives_eleven_fills_not_twelve():
    """A write-back entry stays readable until 12 later allocations."""
    m = make_machine()
    m.verw()
    secret = b"\xc5\xc6\xc7\xc8\xc9\xca\xcb\xcc"
    m.store(set0_line(0), secret)
    m.clflush(set0_line(0))                # write-back entry allocated

    # 11 younger demand fills: entry still present, still preferred
    for i in range(11):
        m.load(ATT + PAGE * (i % 12) + (i + 1) * LINE, 1)
    assert m.lfb_transient_pair(0) == (secret[0], secret[1])

    m.load(ATT + 13 * LINE, 1)             # twelfth: FIFO replaces it
    assert m.lfb_transient_pair(0) != (secret[0], secret[1])


def test_writeback_entry_preferred_over_younger_fills():
    m = make_machine()
    m.verw()
    secret = b"\x31\x32\x33\x34\x35\x36\x37\x38"
    m.store(set0_line(0), secret)
    m.clflush(set0_line(0))
    m.load(ATT + 5 * LINE, 1)              # younger, but a demand fill
    assert m.lfb_transient_pair(0) == (secret[0], secret[1])


def test_empty_buffer_forwards_zeros():
    m = make_machine()
    m.verw()
    assert m.lfb_transient_pair(0) == (0, 0)
    assert m.lfb_transient_pair(62) == (0, 0)


def test_access_validation():
    m = make_machine()
    with pytest.raises(ValueError):
        m.load(set0_line(0) + 60, 8)       # crosses the line boundary
    with pytest.raises(MemoryFault):
        m.load(0x9999000, 1)               # unmapped
    with pytest.raises(ValueError):
        m.lfb_transient_pair(63)
    with pytest.raises(ValueError):
        m.lfb_transient_pair(-1)
    with pytest.raises(ValueError):
        m.map_region(0x123, PAGE, domain="x")
    with pytest.raises(ValueError):
        m.map_region(0x700000, PAGE // 2, domain="x")
    with pytest.raises(ValueError):
        m.map_region(ATT, PAGE, domain="x")   # already mapped
    with pytest.raises(RuntimeError):
        m.xend()
    with pytest.raises(RuntimeError):
        m.xabort()
    m.xbegin()
    with pytest.raises(RuntimeError):
        m.xbegin()


def test_tsx_disable_switch():
    m = Machine(tsx_enabled=False)
    with pytest.raises(TsxDisabledError):
        m.xbegin()


def test_poke_plants_in_backing_store_only():
    m = make_machine()
    m.load(set0_line(0), 8)                # cache the line (zeros)
    m.poke(set0_line(0), b"\x55" * 8)
    # the cached copy shadows the poke, exactly like real memory
    assert m.load(set0_line(0), 8) == bytes(8)
    # an uncached line sees the poked bytes on refill
    m.poke(set0_line(1) + 60, b"\x01\x02\x03\x04\x05\x06\x07\x08")
    assert m.load(set0_line(1) + 60, 4) == b"\x01\x02\x03\x04"
    assert m.load(set0_line(1) + LINE, 4) == b"\x05\x06\x07\x08"
    with pytest.raises(MemoryFault):
        m.poke(0x9999000, b"\x00")


def test_state_key_tracks_behaviour():
    a, b = make_machine(), make_machine()
    for m in (a, b):
        m.store(set0_line(0), b"\x10" * 8)
        m.clflush(set0_line(0))
    assert a.state_key() == b.state_key()
    b.load(set0_line(1), 1)
    assert a.state_key() != b.state_key()


def test_noisy_transient_read_never_mutates_state():
    import random
    m = make_machine()
    m.store(set0_line(0), b"\x61" * 8)
    m.clflush(set0_line(0))
    m.load(set0_line(1), 1)
    rng = random.Random(7)
    key = m.state_key()
    for _ in range(50):
        m.lfb_transient_pair(4, rng=rng, noise=NoiseConfig.default())
    assert m.state_key() == key


def test_noise_config_surface():
    assert NoiseConfig.off().noiseless
    assert not NoiseConfig.default().noiseless
    assert NoiseConfig.default().taa_success_prob == 0.75
    assert NoiseConfig.default().spurious_entry_prob == 0.15
    assert NoiseConfig.default().zero_ff_inflation == 0.3


def test_snapshot_shape():
    m = make_machine()
    m.store(set0_line(0), b"\x77" * 8)
    snap = m.snapshot()
    assert snap["l1"][0]["dirty"] is True
    assert snap["l1"][0]["base"] == hex(set0_line(0))
    assert snap["lfb"][0]["writeback"] is False
    assert snap["in_txn"] is False
    assert snap["stats"]["stores"] == 1


# ------------------------------------------------------- reference model

class RefMachine:
    """Deliberately different implementation of the documented contract.

    Per-set MRU-ordered lists instead of stamps, an insertion-ordered list
    for the fill buffer instead of ages — if the two implementations agree
    on every observable under random programs, the stamp bookkeeping in
    the real one is right.
    """

    def __init__(self):
        self.sets = {}            # set_index -> list of [base, bytearray, dirty], MRU last
        self.mem = {}             # line base -> bytearray
        self.lfb = []             # (serial, base, bytes, writeback), append-only order
        self.serial = 0

    def _mem_line(self, base):
        line = self.mem.get(base)
        if line is None:
            line = self.mem[base] = bytearray(LINE)
        return line

    def _lfb_push(self, base, data, writeback):
        self.serial += 1
        if len(self.lfb) >= LFB_SLOTS:
            oldest = min(range(len(self.lfb)), key=lambda i: self.lfb[i][0])
            self.lfb.pop(oldest)
        self.lfb.append((self.serial, base, bytes(data), writeback))

    def _touch(self, base):
        ways = self.sets.setdefault((base >> 6) & 63, [])
        for i, way in enumerate(ways):
            if way[0] == base:
                ways.append(ways.pop(i))
                return way
        data = bytearray(self._mem_line(base))
        self._lfb_push(base, data, False)
        if len(ways) >= WAYS:
            victim = ways.pop(0)
            if victim[2]:
                self._mem_line(victim[0])[:] = victim[1]
                self._lfb_push(victim[0], victim[1], True)
        way = [base, data, False]
        ways.append(way)
        return way

    def load(self, addr, n):
        base, off = addr & ~(LINE - 1), addr & (LINE - 1)
        way = self._touch(base)
        return bytes(way[1][off:off + n])

    def store(self, addr, data):
        base, off = addr & ~(LINE - 1), addr & (LINE - 1)
        way = self._touch(base)
        way[1][off:off + len(data)] = data
        way[2] = True

    def clflush(self, addr):
        base = addr & ~(LINE - 1)
        ways = self.sets.get((base >> 6) & 63, [])
        for i, way in enumerate(ways):
            if way[0] == base:
                if way[2]:
                    self._mem_line(base)[:] = way[1]
                    self._lfb_push(base, way[1], True)
                ways.pop(i)
                break

    def verw(self):
        self.lfb = []

    def l1d_flush(self):
        for ways in self.sets.values():
            for way in ways:
                if way[2]:
                    self._mem_line(way[0])[:] = way[1]
        self.sets = {}

    def transient_pair(self, offset):
        wbs = [e for e in self.lfb if e[3]]
        source = max(wbs or self.lfb, key=lambda e: e[0], default=None)
        if source is None:
            return (0, 0)
        return (source[2][offset], source[2][offset + 1])

    def l1_contents(self, set_index):
        return [(w[0], w[2]) for w in self.sets.get(set_index, [])]

    def memory_bytes(self, addr, n):
        base, off = addr & ~(LINE - 1), addr & (LINE - 1)
        ways = self.sets.get((base >> 6) & 63, [])
        for way in ways:
            if way[0] == base:
                return bytes(way[1][off:off + n])
        return bytes(self._mem_line(base)[off:off + n])


LINE_CHOICES = [ATT + page * PAGE + s * LINE for page in range(10) for s in (0, 1, 2)]

op_strategy = st.one_of(
    st.tuples(st.just("load"), st.sampled_from(LINE_CHOICES),
              st.integers(0, 56), st.integers(1, 8)),
    st.tuples(st.just("store"), st.sampled_from(LINE_CHOICES),
              st.integers(0, 56), st.binary(min_size=1, max_size=8)),
    st.tuples(st.just("clflush"), st.sampled_from(LINE_CHOICES)),
    st.tuples(st.just("verw")),
    st.tuples(st.just("l1d_flush")),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(op_strategy, min_size=1, max_size=40))
def test_machine_matches_reference_model(ops):
    real = make_machine()
    ref = RefMachine()
    for op in ops:
        if op[0] == "load":
            _, base, off, n = op
            n = min(n, LINE - off)
            assert real.load(base + off, n) == ref.load(base + off, n)
        elif op[0] == "store":
            _, base, off, data = op
            data = data[:LINE - off]
            real.store(base + off, data)
            ref.store(base + off, data)
        elif op[0] == "clflush":
            real.clflush(op[1])
            ref.clflush(op[1])
        elif op[0] == "verw":
            real.verw()
            ref.verw()
        else:
            real.l1d_flush()
            ref.l1d_flush()
        for probe in (0, 17, 62):
            assert real.lfb_transient_pair(probe) == ref.transient_pair(probe)
    for s in (0, 1, 2):
        assert real.l1_contents(s) == ref.l1_contents(s)
    for base in LINE_CHOICES:
        assert real.memory_bytes(base, LINE) == ref.memory_bytes(base, LINE)
