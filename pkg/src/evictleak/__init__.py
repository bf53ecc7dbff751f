"""Deterministic model of an L1-eviction transient-leak channel.

The package couples a small cache/fill-buffer machine with a TSX-style
abort channel, victim programs that handle secrets, and offline tooling
that turns noisy byte-pair histograms back into keys, weights, images
and kernel pointers.
"""

from .machine import (
    LINE,
    SETS,
    WAYS,
    LFB_SLOTS,
    PAGE,
    Machine,
    MemoryFault,
    NoiseConfig,
    TransactionAbort,
    TsxDisabledError,
)
from .taa import PROBE_SLOTS, ProbingArray, TaaChannel, TaaResult
from .attack import (
    EvictionSet,
    LeakHistogram,
    PageDump,
    StitchedLine,
    UnsupportedModeError,
    Workspace,
    attack_read,
    attack_write,
    dump_page,
    stitch_line,
)

__version__ = "0.1.0"

__all__ = [
    "LINE",
    "SETS",
    "WAYS",
    "LFB_SLOTS",
    "PAGE",
    "PROBE_SLOTS",
    "Machine",
    "MemoryFault",
    "NoiseConfig",
    "TransactionAbort",
    "TsxDisabledError",
    "ProbingArray",
    "TaaChannel",
    "TaaResult",
    "EvictionSet",
    "LeakHistogram",
    "PageDump",
    "StitchedLine",
    "UnsupportedModeError",
    "Workspace",
    "attack_read",
    "attack_write",
    "dump_page",
    "stitch_line",
    "__version__",
]
