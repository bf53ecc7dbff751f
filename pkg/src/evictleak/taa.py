"""Transaction-abort leak channel and its flush-reload probing arrays.

One leak iteration is the classic recipe:

1. ``clflush`` a line of a private, never-written page. Flushing arms the
   line so that a transactional touch aborts (the flush creates exactly
   the coherence conflict the abort logic watches for).
2. Open a transaction and load that line at the offset of interest. The
   load aborts before it can fill anything, but during the squash window
   the load's slot in the fill buffer forwards whatever the buffer holds
   at that line offset.
3. Two dependent accesses spread the forwarded byte pair across two
   256-slot probing arrays; the abort rolls back the registers but not
   the probe footprints.

The simulator collapses step 3's cache-timing scan into exact presence
bits per slot — the recovered pair is the unique hot slot of each array.
"""

from __future__ import annotations

import random

from .machine import LINE, Machine, NoiseConfig, TransactionAbort, TsxDisabledError

__all__ = ["ProbingArray", "TaaChannel", "TaaResult", "TsxDisabledError"]

PROBE_SLOTS = 256


class ProbingArray:
    """Presence bits over 256 byte-indexed slots.

    A real probe array is 256 pages scanned with flush+reload; here each
    slot is a single bit that a transient access sets. ``decode`` returns
    the hot slot when exactly one bit is set.
    """

    def __init__(self) -> None:
        self.bits = [False] * PROBE_SLOTS

    def reset(self) -> None:
        self.bits = [False] * PROBE_SLOTS

    def touch(self, value: int) -> None:
        self.bits[value] = True

    def decode(self) -> int | None:
        hot = None
        for value, bit in enumerate(self.bits):
            if bit:
                if hot is not None:
                    return None
                hot = value
        return hot


class TaaResult:
    """Byte pair recovered by one leak iteration."""

    __slots__ = ("offset", "b0", "b1")

    def __init__(self, offset: int, b0: int, b1: int) -> None:
        self.offset = offset
        self.b0 = b0
        self.b1 = b1

    def pair(self) -> tuple[int, int]:
        return (self.b0, self.b1)

    def __repr__(self) -> str:
        return f"TaaResult(offset={self.offset}, b0={self.b0:#04x}, b1={self.b1:#04x})"


class TaaChannel:
    """Drives abort-window leaks against one machine.

    The channel owns the only RNG in the online pipeline; a noiseless
    channel never draws from it, so noiseless runs are RNG-free end to
    end. ``leak_page`` must be an attacker-mapped page that is never
    stored to (its lines stay clean, so flushing them never writes back).
    """

    def __init__(self, machine: Machine, leak_page: int, *,
                 noise: NoiseConfig | None = None,
                 rng: random.Random | None = None) -> None:
        self.machine = machine
        self.leak_page = leak_page
        self.noise = noise if noise is not None else NoiseConfig.off()
        self.rng = rng if rng is not None else random.Random(0)
        self.array0 = ProbingArray()
        self.array1 = ProbingArray()
        # Arm the leak line once at setup. The mark is sticky (nothing ever
        # completes a non-transactional access to this page), so from here
        # on a leak's flush is idempotent and an aborted leak leaves the
        # machine's state key bit-for-bit unchanged.
        machine.clflush(leak_page, actor="attacker")

    def leak(self, offset: int) -> TaaResult:
        """Run one flush → transact → abort → probe cycle at ``offset``.

        Returns the decoded byte pair; with an empty fill buffer or a
        squashed forward that is ``(0, 0)``. Raises
        :class:`TsxDisabledError` when transactions are off.
        """
        if not 0 <= offset <= LINE - 2:
            raise ValueError("offset must be in [0, 62]")
        m = self.machine
        if not m.tsx_enabled:
            raise TsxDisabledError("transactional extensions are disabled")
        m.clflush(self.leak_page, actor="attacker")
        self.array0.reset()
        self.array1.reset()
        m.xbegin()
        try:
            m.load(self.leak_page + offset, 1, actor="attacker")
        except TransactionAbort as abort:
            if abort.reason != "marked-line":
                raise
            b0, b1 = m.lfb_transient_pair(abort.leak_offset, rng=self.rng,
                                          noise=self.noise)
            self.array0.touch(b0)
            self.array1.touch(b1)
        else:  # pragma: no cover - the marked load always aborts
            m.xend()
            raise RuntimeError("leak load unexpectedly committed")
        hot0 = self.array0.decode()
        hot1 = self.array1.decode()
        assert hot0 is not None and hot1 is not None
        return TaaResult(offset, hot0, hot1)
