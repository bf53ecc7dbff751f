"""Victim programs the attacks are aimed at.

Each victim owns a mapped region in its own protection domain and
exposes ``step`` methods that perform one quantum of realistic work
(loads and stores through the shared machine). Ground-truth accessors
are for the harness and tests only — attack and reconstruction code
receives nothing but leaked byte pairs.

Victims also publish which cache sets their secrets live in. That is
scenario configuration, not cheating: a real attacker profiles set usage
in minutes, and the experiments here are about the leak itself.
"""

from __future__ import annotations

import random
import struct

from . import aes
from .machine import LINE, PAGE, Machine

__all__ = [
    "SecretLineVictim", "SecretReaderVictim", "AesDecryptVictim",
    "RsaCrtVictim", "NnInferenceVictim", "KernelVictim",
    "EnclavePageVictim", "random_weight_bytes", "WEIGHT_COUNT",
    "WEIGHT_BLOB_OFFSET",
]


class SecretLineVictim:
    """Writes a secret to one line of its zero-initialised page each step.

    The workhorse for calibration sweeps: the page starts as zeros, so the
    only nonzero bytes that can ever transit the fill buffer from this
    victim are the secret itself — any off-target recovery is exactly zero
    by construction, not just with high probability.
    """

    def __init__(self, machine: Machine, *, base: int, set_index: int,
                 secret: bytes, domain: str = "victim") -> None:
        if not 1 <= len(secret) <= LINE:
            raise ValueError("secret must fit one line")
        machine.map_region(base, PAGE, domain=domain)
        self.machine = machine
        self.domain = domain
        self.set_index = set_index
        self.addr = base + set_index * LINE
        self.secret = bytes(secret)

    def step(self) -> None:
        self.machine.store(self.addr, self.secret, actor=self.domain)


class SecretReaderVictim:
    """Loads (never writes) a planted secret line each step."""

    def __init__(self, machine: Machine, *, base: int, set_index: int,
                 secret: bytes, domain: str = "victim") -> None:
        machine.map_region(base, PAGE, domain=domain)
        self.machine = machine
        self.domain = domain
        self.set_index = set_index
        self.addr = base + set_index * LINE
        machine.poke(self.addr, secret)

    def step(self) -> None:
        self.machine.load(self.addr, 8, actor=self.domain)


class AesDecryptVictim:
    """Decryption service: touches its expanded key schedule every call.

    The cipher context is one struct: a 16-byte header (magic and key
    length, constant for the context's lifetime) followed by the expanded
    schedule — lines 0..2 of the page for AES-128, 0..3 for the bigger
    keys, planted at setup as if the key had been expanded at service
    start. Each step reads the whole context line-by-line while
    decrypting one counter block; the plaintext goes to a caller buffer
    in a separate page (and a cache set no context line occupies), the
    way an API writes output where it is told to.
    """

    def __init__(self, machine: Machine, *, base: int, key: bytes,
                 domain: str = "victim") -> None:
        machine.map_region(base, 2 * PAGE, domain=domain)
        self.machine = machine
        self.domain = domain
        self.base = base
        self._key = bytes(key)
        self._schedule = aes.expand_key(key)
        header = b"AESCTX\x00\x00" + len(key).to_bytes(4, "little") + bytes(4)
        machine.poke(base, header)
        machine.poke(base + 16, self._schedule)
        self._counter = 0
        self._out = base + PAGE + 40 * LINE
        span = 16 + len(self._schedule)
        self.secret_sets = tuple(range((span + LINE - 1) // LINE))

    def step(self) -> None:
        m = self.machine
        end = 16 + len(self._schedule)
        for offset in range(0, end, 8):
            m.load(self.base + offset, 8, actor=self.domain)
        self._counter += 1
        block = self._counter.to_bytes(16, "big")
        plain = aes.decrypt_block(self._key, block)
        m.store(self._out, plain[:8], actor=self.domain)
        m.store(self._out + 8, plain[8:], actor=self.domain)

    def ground_truth_key(self) -> bytes:
        """Harness/test use only."""
        return self._key


class RsaCrtVictim:
    """CRT signer: reads both prime factors on every exponentiation.

    The primes sit in consecutive lines (little-endian 8-byte limbs,
    planted at setup). A signer reads p and q once per CRT half; the store
    at the end models the signature write-out into a separate page so the
    prime lines themselves stay clean — read-path material.
    """

    def __init__(self, machine: Machine, *, base: int, p: int, q: int,
                 modulus_bits: int, domain: str = "victim") -> None:
        self.prime_bytes = modulus_bits // 16
        if self.prime_bytes % LINE and self.prime_bytes > LINE:
            raise ValueError("prime length must be line-friendly")
        machine.map_region(base, 2 * PAGE, domain=domain)
        self.machine = machine
        self.domain = domain
        self.base = base
        self._p = p
        self._q = q
        span = max(LINE, self.prime_bytes)
        self.q_base = base + span
        machine.poke(base, p.to_bytes(self.prime_bytes, "little"))
        machine.poke(self.q_base, q.to_bytes(self.prime_bytes, "little"))
        first = (base >> 6) & 63
        self.secret_sets = tuple(
            (first + i) % 64 for i in range(2 * (span // LINE)))
        # Signature write-out lives in a set no prime line ever occupies,
        # so evicting a prime set never writes back signer scratch.
        self._out = base + PAGE + 40 * LINE

    def step(self) -> None:
        m = self.machine
        for offset in range(0, self.prime_bytes, 8):
            m.load(self.base + offset, 8, actor=self.domain)
        for offset in range(0, self.prime_bytes, 8):
            m.load(self.q_base + offset, 8, actor=self.domain)
        m.store(self._out, b"\x5a" * 8, actor=self.domain)

    def ground_truth(self) -> tuple[int, int]:
        """Harness/test use only."""
        return self._p, self._q


WEIGHT_COUNT = 376
WEIGHT_BLOB_OFFSET = 0x20


def random_weight_bytes(rng: random.Random, count: int = WEIGHT_COUNT) -> bytes:
    """Plausible little-endian float32 weights.

    Sign/exponent bytes land in the band real trained nets occupy
    (magnitudes roughly 0.03..500, both signs); mantissa bytes avoid
    0x00/0xFF so ground truth is never confusable with squash garbage.
    """
    out = bytearray()
    for _ in range(count):
        msb = rng.randrange(0x3D, 0x43)
        if rng.random() < 0.5:
            msb |= 0x80
        out += bytes((rng.randrange(1, 0xFF), rng.randrange(1, 0xFF),
                      rng.randrange(1, 0xFF), msb))
    return bytes(out)


class NnInferenceVictim:
    """Inference loop over a fixed-architecture 376-weight network.

    The weight blob sits at page offset 0x20 (the header of the on-disk
    format comes first), so 1504 bytes of float32s span lines 0..23 of the
    page. A step walks every weight line once, the way a dense forward
    pass streams its matrices, and accumulates into a scratch page.
    """

    def __init__(self, machine: Machine, *, base: int, weights: bytes,
                 domain: str = "victim") -> None:
        if len(weights) != 4 * WEIGHT_COUNT:
            raise ValueError("expected 376 float32 weights")
        machine.map_region(base, 2 * PAGE, domain=domain)
        self.machine = machine
        self.domain = domain
        self.base = base
        self._weights = bytes(weights)
        machine.poke(base + WEIGHT_BLOB_OFFSET, weights)
        span = WEIGHT_BLOB_OFFSET + len(weights)
        self.secret_sets = tuple(range(span // LINE))
        # Accumulator set is disjoint from every weight set, so evicting a
        # weight set never writes back inference scratch.
        self._scratch = base + PAGE + 30 * LINE

    def step(self) -> None:
        m = self.machine
        for line_index in self.secret_sets:
            m.load(self.base + line_index * LINE, 8, actor=self.domain)
        m.store(self._scratch, b"\x00" * 8, actor=self.domain)

    def ground_truth_weights(self) -> tuple[float, ...]:
        """Harness/test use only."""
        return struct.unpack(f"<{WEIGHT_COUNT}f", self._weights)


KERNEL_TEXT_BASE = 0xFFFFFFFF80000000
KASLR_ALIGN = 0x200000
KASLR_SLOTS = 512


class KernelVictim:
    """Kernel-mode activity on the same core as the attacker.

    Each step services a fake interrupt: it rewrites a function pointer
    (text address, randomised per boot by a 2 MiB-aligned slide) and a
    stack canary (random per boot, low byte zero) into its per-CPU page.
    Both writes dirty kernel lines a user attacker could never read
    architecturally — the write-path leak does not care.
    """

    POINTER_LINE = 3
    CANARY_LINE = 9

    def __init__(self, machine: Machine, *, base: int,
                 boot_rng: random.Random, domain: str = "kernel") -> None:
        machine.map_region(base, PAGE, domain=domain)
        self.machine = machine
        self.domain = domain
        self.base = base
        slide_slot = boot_rng.randrange(KASLR_SLOTS)
        self._pointer = KERNEL_TEXT_BASE + slide_slot * KASLR_ALIGN + 0x1480
        canary = 0
        while canary == 0:
            canary = (boot_rng.getrandbits(56) << 8) & 0x00FFFFFFFFFFFF00
        self._canary = canary
        self.pointer_addr = base + self.POINTER_LINE * LINE
        self.canary_addr = base + self.CANARY_LINE * LINE
        self.secret_sets = (self.POINTER_LINE, self.CANARY_LINE)

    def step(self) -> None:
        m = self.machine
        m.store(self.pointer_addr, self._pointer.to_bytes(8, "little"),
                actor=self.domain)
        m.store(self.canary_addr, self._canary.to_bytes(8, "little"),
                actor=self.domain)

    def ground_truth(self) -> tuple[int, int]:
        """Harness/test use only: (pointer, canary)."""
        return self._pointer, self._canary


class EnclavePageVictim:
    """Enclave whose secret pages get repeatedly swapped back in.

    Paging a protected page back in decrypts it and *writes* the whole
    4 KiB through the cache, dirtying one line per set per page — write
    path again, against memory even the kernel cannot read. Re-touching
    only the line the attacker just evicted is behaviourally equivalent
    to replaying the full page load (the other 63 lines stay dirty in L1
    throughout) and keeps experiments quick.
    """

    def __init__(self, machine: Machine, *, base: int, secret: bytes,
                 domain: str = "enclave") -> None:
        pages = -(-len(secret) // PAGE)
        machine.map_region(base, pages * PAGE, domain=domain)
        self.machine = machine
        self.domain = domain
        self.base = base
        self._secret = bytes(secret) + bytes(pages * PAGE - len(secret))
        self.pages = pages

    def page_load(self, page_index: int) -> None:
        """Swap one page in: dirty-store all 64 lines."""
        base = self.base + page_index * PAGE
        for line_index in range(64):
            off = page_index * PAGE + line_index * LINE
            self.machine.store(base + line_index * LINE,
                               self._secret[off:off + LINE],
                               actor=self.domain)

    def touch_line(self, page_index: int, line_index: int) -> None:
        """Re-dirty one line of one page (targeted page-load replay)."""
        off = page_index * PAGE + line_index * LINE
        self.machine.store(self.base + off, self._secret[off:off + LINE],
                           actor=self.domain)

    def ground_truth(self) -> bytes:
        """Harness/test use only."""
        return self._secret
