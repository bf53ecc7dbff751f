"""Offline reconstruction: from leaked byte soup to usable secrets.

Nothing in this module touches a machine. Inputs are byte streams,
pair histograms, or candidate pools produced by the online attacks;
outputs are keys, primes, weights, images, and address classifications.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from . import aes

__all__ = [
    "RsaReconstructionError", "rsa_reconstruct",
    "aes_locate", "AesCandidate",
    "weight_filter", "WeightCandidate", "EXPONENT_BAND",
    "image_reconstruct", "ppm_bytes",
    "find_static_locations", "StaticLocation",
    "candidate_product_search",
]


# --------------------------------------------------------------------- RSA

class RsaReconstructionError(Exception):
    """Factor reconstruction ran out of consistent extensions.

    ``deepest_level`` is the last chunk position that still had at least
    one consistent partial factorisation — the usual symptom of a corrupt
    pool is dying within the first level or two.
    """

    def __init__(self, message: str, deepest_level: int) -> None:
        super().__init__(f"{message} (deepest consistent level: {deepest_level})")
        self.deepest_level = deepest_level


def rsa_reconstruct(chunks: Iterable[int], modulus: int, *,
                    chunk_bytes: int = 8,
                    beam: int | None = None) -> tuple[int, int]:
    """Factor ``modulus`` given the shuffled multiset of both primes' chunks.

    The pool holds every ``chunk_bytes``-byte little-endian slice of p and
    of q, in no particular order and with no position or origin labels.
    Reconstruction grows both primes from the least significant chunk up:
    a pair of pool values extends a partial (p̂, q̂) at level ``k`` only if
    ``p̂·q̂`` matches the modulus in its low ``chunk_bytes*(k+1)`` bytes.
    That one congruence is brutal — random wrong pairs survive a level
    with probability about ``256**-chunk_bytes``.

    States are deduplicated under the p/q swap symmetry, so the final
    level yields one factorisation. ``beam`` optionally caps the number of
    live states per level (unlimited by default; clean pools rarely carry
    more than a couple of states anyway).

    Returns ``(p, q)`` with ``p <= q``; raises
    :class:`RsaReconstructionError` when no consistent assignment exists.

    >>> rsa_reconstruct([61, 53], 3233, chunk_bytes=1)
    (53, 61)
    """
    pool = Counter(int(c) for c in chunks)
    total = sum(pool.values())
    if total == 0 or total % 2:
        raise ValueError("pool must hold an even, positive number of chunks")
    levels = total // 2
    radix = 256 ** chunk_bytes
    if any(not 0 <= c < radix for c in pool):
        raise ValueError("chunk value out of range for chunk_bytes")

    # state: (p_partial, q_partial) with p <= q; the remaining pool is
    # implied (initial pool minus the chunks the partials are made of).
    states: dict[tuple[int, int], Counter] = {(0, 0): pool}
    deepest = 0
    for level in range(levels):
        shift = 8 * chunk_bytes * level
        mask = 256 ** (chunk_bytes * (level + 1))
        want = modulus % mask
        nxt: dict[tuple[int, int], Counter] = {}
        for (p, q), remaining in states.items():
            values = sorted(remaining)
            for a, b in itertools.product(values, repeat=2):
                if a == b and remaining[a] < 2:
                    continue
                cand_p = p + (a << shift)
                cand_q = q + (b << shift)
                if cand_p * cand_q % mask != want:
                    continue
                key = (cand_p, cand_q) if cand_p <= cand_q else (cand_q, cand_p)
                if key in nxt:
                    continue
                taken = remaining.copy()
                taken[a] -= 1
                taken[b] -= 1
                if taken[a] == 0:
                    del taken[a]
                if b in taken and taken[b] == 0:
                    del taken[b]
                nxt[key] = taken
        if not nxt:
            raise RsaReconstructionError("no consistent chunk pairing", deepest)
        deepest = level + 1
        if beam is not None and len(nxt) > beam:
            nxt = dict(sorted(nxt.items())[:beam])
        states = nxt
    for p, q in sorted(states):
        if p * q == modulus and p > 1 and q > 1:
            return (p, q)
    raise RsaReconstructionError("no full-width factorisation", deepest)


# --------------------------------------------------------------------- AES

@dataclass(frozen=True)
class AesCandidate:
    offset: int
    score: float


def schedule_match_score(stream: Sequence[int | None], offset: int,
                         key_bytes: int, *, stop_below: float = 0.0) -> float:
    """Fraction of the expanded-schedule tail that matches the stream.

    Treats the ``key_bytes`` window at ``offset`` as a candidate key and
    checks the bytes its expansion *would* place right after it. Unknown
    (None) or out-of-range stream bytes count as mismatches. With
    ``stop_below`` the scan aborts as soon as the score can no longer
    reach that bound, which is what makes mass scanning affordable.
    """
    window = stream[offset:offset + key_bytes]
    if len(window) < key_bytes or any(b is None for b in window):
        return 0.0
    key = bytes(window)
    tail_len = aes.SCHEDULE_BYTES[key_bytes] - key_bytes
    allowed_miss = tail_len - int(stop_below * tail_len)
    matches = 0
    misses = 0
    pos = offset + key_bytes
    words = aes.expanded_words(key)
    for _ in range(key_bytes // 4):
        next(words)
    stream_len = len(stream)
    for word in words:
        for byte in word:
            if pos < stream_len and stream[pos] == byte:
                matches += 1
            else:
                misses += 1
                if misses > allowed_miss:
                    return matches / tail_len
            pos += 1
    return matches / tail_len


def aes_locate(stream: Sequence[int | None], *, key_bytes: int = 16,
               threshold: float = 0.9, top: int = 5) -> list[AesCandidate]:
    """Find expanded AES key schedules inside a recovered byte stream.

    Every offset is scored with :func:`schedule_match_score`; offsets at
    or above ``threshold`` are hits, and the best ``top`` (score desc,
    offset asc) come back for inspection. An expanded schedule is wildly
    self-inconsistent for wrong keys, so random data essentially never
    clears a 0.9 threshold.
    """
    if key_bytes not in aes.SCHEDULE_BYTES:
        raise ValueError("key_bytes must be 16, 24 or 32")
    scored: list[tuple[float, int]] = []
    last = len(stream) - key_bytes
    for offset in range(last + 1):
        score = schedule_match_score(stream, offset, key_bytes,
                                     stop_below=threshold)
        if score > 0.0:
            scored.append((-score, offset))
    scored.sort()
    return [AesCandidate(offset, -neg) for neg, offset in scored[:top]]


# ------------------------------------------------------------- NN weights

EXPONENT_BAND = ((0x3D, 0x43), (0xBD, 0xC3))


@dataclass(frozen=True)
class WeightCandidate:
    value: int          # little-endian float32 bit pattern
    score: float


def _in_band(msb: int) -> bool:
    return any(lo <= msb <= hi for lo, hi in EXPONENT_BAND)


def weight_filter(observed: Sequence[Mapping[int, int]], *,
                  inflation_penalty: float = 0.25,
                  top: int = 5) -> list[list[WeightCandidate]]:
    """Rank observed 32-bit weight candidates by plausibility.

    ``observed[i]`` maps candidate bit patterns for weight ``i`` to how
    often they were seen. Candidates whose sign/exponent byte falls
    outside the band trained-network weights occupy are rejected outright;
    candidates containing a 0x00 or 0xFF byte — the signature of squash
    garbage — keep only ``inflation_penalty`` of their count. Ties break
    to the smaller bit pattern.
    """
    ranked: list[list[WeightCandidate]] = []
    for counter in observed:
        scored = []
        for value, count in counter.items():
            msb = (value >> 24) & 0xFF
            if not _in_band(msb):
                continue
            score = float(count)
            b = value
            for _ in range(4):
                if (b & 0xFF) in (0x00, 0xFF):
                    score *= inflation_penalty
                    break
                b >>= 8
            scored.append(WeightCandidate(value, score))
        scored.sort(key=lambda c: (-c.score, c.value))
        ranked.append(scored[:top])
    return ranked


# ------------------------------------------------------------------ images

_SENTINEL = (255, 0, 255)

Color = tuple[int, int, int]


def _dist2(a: Color, b: Color) -> int:
    return ((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2)


def image_reconstruct(candidates: Sequence[Sequence[tuple[Color, int]]],
                      width: int, height: int, *,
                      mode: str = "neighbor",
                      rng=None,
                      use_product_form: bool = False,
                      sentinel: Color = _SENTINEL) -> list[Color]:
    """Choose one colour per pixel from per-pixel weighted candidates.

    ``mode="neighbor"`` starts from the most frequent candidate per pixel
    and makes one raster refinement pass, re-picking each pixel to sit
    closest (summed squared RGB distance; frequency breaks ties) to its
    already-chosen 4-neighbours. ``use_product_form`` multiplies the
    per-neighbour distances instead of summing them, which punishes a
    single hostile neighbour much harder. ``mode="random"`` draws each
    pixel uniformly from its candidates (the strawman baseline).

    Pixels with no candidates get the sentinel colour and are skipped as
    neighbours.
    """
    if len(candidates) != width * height:
        raise ValueError("need exactly width*height candidate lists")
    if mode not in ("neighbor", "random"):
        raise ValueError("mode must be 'neighbor' or 'random'")
    if mode == "random":
        if rng is None:
            raise ValueError("random mode needs an rng")
        return [rng.choice([c for c, _ in cands]) if cands else sentinel
                for cands in candidates]

    chosen: list[Color] = []
    known: list[bool] = []
    for cands in candidates:
        if not cands:
            chosen.append(sentinel)
            known.append(False)
        else:
            best = min(cands, key=lambda cw: (-cw[1], cw[0]))
            chosen.append(best[0])
            known.append(True)

    for y in range(height):
        row = y * width
        for x in range(width):
            i = row + x
            cands = candidates[i]
            if len(cands) < 2:
                continue
            neighbours = []
            if x > 0 and known[i - 1]:
                neighbours.append(chosen[i - 1])
            if x + 1 < width and known[i + 1]:
                neighbours.append(chosen[i + 1])
            if y > 0 and known[i - width]:
                neighbours.append(chosen[i - width])
            if y + 1 < height and known[i + width]:
                neighbours.append(chosen[i + width])
            if not neighbours:
                continue
            best_key = None
            best_color = chosen[i]
            for color, count in cands:
                if use_product_form:
                    closeness = 1
                    for n in neighbours:
                        closeness *= _dist2(color, n) + 1
                else:
                    closeness = sum(_dist2(color, n) for n in neighbours)
                key = (closeness, -count, color)
                if best_key is None or key < best_key:
                    best_key = key
                    best_color = color
            chosen[i] = best_color
    return chosen


def ppm_bytes(pixels: Sequence[Color], width: int, height: int) -> bytes:
    """Binary PPM (P6) encoding."""
    if len(pixels) != width * height:
        raise ValueError("need exactly width*height pixels")
    header = f"P6\n{width} {height}\n255\n".encode()
    body = bytearray()
    for r, g, b in pixels:
        body += bytes((r, g, b))
    return header + bytes(body)


# --------------------------------------------------- static-location survey

@dataclass(frozen=True)
class StaticLocation:
    """An 8-byte slot that holds a well-defined value in every epoch."""

    offset: int
    kind: str                     # "stable" or "varying"
    values: tuple[int, ...]       # little-endian value per epoch


def find_static_locations(epoch_runs: Sequence[Sequence[bytes]], *,
                          window: int = 8,
                          min_dominance: float = 0.6) -> list[StaticLocation]:
    """Classify aligned 8-byte slots of repeated dumps of one page.

    ``epoch_runs[e]`` holds the page images recovered during epoch ``e``
    (one boot / one power cycle). A slot qualifies when, within every
    epoch, one nonzero value accounts for at least ``min_dominance`` of
    the runs. Slots whose per-epoch values all agree are ``"stable"``
    (state that survives reboots lives outside the rebooted machine);
    slots that change between epochs are ``"varying"`` — the signature of
    per-boot randomisation.
    """
    if not epoch_runs or not epoch_runs[0]:
        return []
    page_len = len(epoch_runs[0][0])
    out: list[StaticLocation] = []
    for offset in range(0, page_len - window + 1, window):
        per_epoch: list[int] = []
        ok = True
        for runs in epoch_runs:
            values = Counter(
                int.from_bytes(run[offset:offset + window], "little")
                for run in runs)
            value, count = min(values.items(), key=lambda kv: (-kv[1], kv[0]))
            if value == 0 or count < min_dominance * len(runs):
                ok = False
                break
            per_epoch.append(value)
        if not ok:
            continue
        kind = "stable" if len(set(per_epoch)) == 1 else "varying"
        out.append(StaticLocation(offset, kind, tuple(per_epoch)))
    return out


# ------------------------------------------------------- candidate products

def candidate_product_search(candidate_sets: Sequence[Sequence],
                             predicate: Callable[[tuple], bool], *,
                             limit: int | None = 1) -> list[tuple]:
    """Search the cartesian product of small candidate sets.

    The generic closer for attacks that end with "a handful of candidates
    per position, one consistent combination": walk the product
    lexicographically, keep tuples the predicate accepts, stop after
    ``limit`` hits (None exhausts the space).
    """
    hits = []
    for combo in itertools.product(*candidate_sets):
        if predicate(combo):
            hits.append(combo)
            if limit is not None and len(hits) >= limit:
                break
    return hits
