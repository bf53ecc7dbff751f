"""Calibration sweeps: how many ways, which set, which offset.

These are the experiments that establish the channel works before any
real victim is attacked. Each builds a fresh machine per cell/seed so
results depend on nothing but the stated configuration.
"""

from __future__ import annotations

import csv
import random

from .attack import Workspace, attack_write
from .machine import LINE, Machine, NoiseConfig
from .taa import TaaChannel
from .victims import SecretLineVictim

__all__ = [
    "eviction_size_sweep", "set_matrix", "offset_matrix",
    "write_rate_csv", "write_matrix_csv",
]

VICTIM_BASE = 0x00401000


def _secret_bytes(rng: random.Random, n: int) -> bytes:
    """Nonzero, non-0xFF bytes: never confusable with squash output."""
    return bytes(rng.randrange(1, 0xFF) for _ in range(n))


def _rig(seed: int, noise: NoiseConfig, *, set_index: int,
         secret: bytes) -> tuple[Machine, TaaChannel, Workspace, SecretLineVictim]:
    machine = Machine()
    workspace = Workspace(machine)
    channel = TaaChannel(machine, workspace.leak_page, noise=noise,
                         rng=random.Random(seed ^ 0x5EED))
    victim = SecretLineVictim(machine, base=VICTIM_BASE, set_index=set_index,
                              secret=secret)
    return machine, channel, workspace, victim


def eviction_size_sweep(*, seed: int = 1, iterations: int = 20,
                        noise: NoiseConfig | None = None,
                        sizes: range = range(1, 13)) -> list[tuple[int, float]]:
    """Recovery rate of a dirty victim line vs. eviction-set size.

    The victim line is the oldest thing in its set when the attacker runs,
    so with true LRU the break is sharp: seven ways leave it resident
    (nothing ever writes back), eight or more displace it every time.
    Returns ``[(size, rate), ...]``.
    """
    noise = noise or NoiseConfig.off()
    rng = random.Random(seed)
    results = []
    for size in sizes:
        secret = _secret_bytes(rng, 8)
        machine, channel, workspace, victim = _rig(
            seed * 1000 + size, noise, set_index=17, secret=secret)
        evict = workspace.eviction_set(17, size)
        hist = attack_write(machine, channel, victim.step, evict,
                            offsets=[0], iterations=iterations)
        want = (secret[0], secret[1])
        hits = hist.pairs_seen(17, 0)[want]
        results.append((size, hits / iterations))
    return results


def set_matrix(*, seed: int = 1, iterations: int = 2,
               noise: NoiseConfig | None = None) -> list[list[int]]:
    """64x64 grid: attacker evicts set x while the victim writes set y.

    Cell ``[y][x]`` counts iterations whose recovered pair equals the
    victim's secret. The victim's page starts zeroed and its line is only
    ever written back when its own set is evicted, so off-diagonal cells
    are structurally zero — noise can garble a reading but cannot invent
    the secret.
    """
    noise = noise or NoiseConfig.off()
    rng = random.Random(seed)
    grid = [[0] * 64 for _ in range(64)]
    for victim_set in range(64):
        secret = _secret_bytes(rng, 8)
        want = (secret[0], secret[1])
        machine, channel, workspace, victim = _rig(
            seed * 64 + victim_set, noise, set_index=victim_set,
            secret=secret)
        hist = None
        for attack_set in range(64):
            # Scrub between cells: fill-buffer entries stay valid after
            # use, so without this the previous cell's write-back residue
            # would smear one column to the right of the diagonal.
            machine.verw()
            evict = workspace.eviction_set(attack_set)
            hist = attack_write(machine, channel, victim.step, evict,
                                offsets=[0], iterations=iterations,
                                hist=hist)
            grid[victim_set][attack_set] = hist.pairs_seen(
                attack_set, 0)[want]
    return grid


def offset_matrix(*, seed: int = 1, iterations: int = 1,
                  noise: NoiseConfig | None = None) -> list[tuple[int, int]]:
    """Leak one full random line through all 63 pair offsets.

    Returns ``[(correct, incorrect), ...]`` indexed by offset, where a
    reading is correct when it equals the victim line's true byte pair at
    that offset.
    """
    noise = noise or NoiseConfig.off()
    rng = random.Random(seed)
    secret = _secret_bytes(rng, LINE)
    machine, channel, workspace, victim = _rig(seed, noise, set_index=29,
                                               secret=secret)
    evict = workspace.eviction_set(29)
    hist = attack_write(machine, channel, victim.step, evict,
                        offsets=range(LINE - 1), iterations=iterations)
    results = []
    for offset in range(LINE - 1):
        want = (secret[offset], secret[offset + 1])
        seen = hist.pairs_seen(29, offset)
        correct = seen[want]
        incorrect = sum(seen.values()) - correct
        results.append((correct, incorrect))
    return results


def write_rate_csv(path, rows: list[tuple[int, float]]) -> None:
    """Rows ``size,rate`` for the eviction-size sweep."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["size", "rate"])
        for size, rate in rows:
            writer.writerow([size, f"{rate:.6f}"])


def write_matrix_csv(path, grid: list[list[int]], *,
                     diagonal_secret: bool = True) -> None:
    """Rows ``x,y,correct,incorrect`` for heat-map style grids.

    ``correct`` is the cell count; ``incorrect`` is the iterations the
    cell observed minus that, already folded into the grid producer — so
    here it is emitted as 0 for producers that only track hits.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "correct", "incorrect"])
        for y, row in enumerate(grid):
            for x, value in enumerate(row):
                if isinstance(value, tuple):
                    correct, incorrect = value
                else:
                    correct, incorrect = value, 0
                writer.writerow([x, y, correct, incorrect])
