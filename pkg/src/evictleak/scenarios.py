"""End-to-end attack scenarios: machine + victim + attack + offline pass.

Each scenario builds its own deterministic rig from (seed, noise,
mitigation), runs the online attack, hands nothing but leaked bytes to
the reconstruction step, and only then consults ground truth to say
whether the recovered secret is actually right. Reports are plain dicts
with insertion-ordered keys so serialising them is byte-stable.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field

from . import recon
from .attack import (LeakHistogram, Workspace, attack_read, attack_write,
                     dump_page, stitch_line)
from .machine import LINE, PAGE, Machine, NoiseConfig
from .taa import TaaChannel, TsxDisabledError
from .victims import (AesDecryptVictim, EnclavePageVictim, KernelVictim,
                      NnInferenceVictim, RsaCrtVictim, random_weight_bytes,
                      KASLR_ALIGN, KERNEL_TEXT_BASE, WEIGHT_BLOB_OFFSET,
                      WEIGHT_COUNT)
from .primes import rsa_keypair

__all__ = [
    "ScenarioConfig", "ScenarioOutcome", "OnlineFailure", "OfflineFailure",
    "SCENARIOS", "run_scenario", "noise_to_label", "label_to_noise",
    "synth_image",
]

VICTIM_BASE = 0x00401000
KERNEL_PAGE = 0x00C00000
SYMBOL_OFFSET = 0x1480   # link-time offset of the leaked kernel symbol


class OnlineFailure(Exception):
    """The channel itself could not run (exit code 3 territory)."""


class OfflineFailure(Exception):
    """Reconstruction or verification failed (exit code 4 territory)."""


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    seed: int = 1
    noise_label: str = "default"
    mitigation: str = "none"
    iterations: int | None = None
    params: dict = field(default_factory=dict)

    @property
    def noise(self) -> NoiseConfig:
        return label_to_noise(self.noise_label)

    def as_report_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "noise": self.noise_label,
            "mitigation": self.mitigation,
            "iterations": self.iterations,
            "params": dict(sorted(self.params.items())),
        }


@dataclass
class ScenarioOutcome:
    report: dict
    files: dict[str, bytes]
    verified: bool


def noise_to_label(noise: NoiseConfig) -> str:
    if noise.noiseless:
        return "off"
    if noise == NoiseConfig.default():
        return "default"
    return (f"{noise.taa_success_prob},{noise.spurious_entry_prob},"
            f"{noise.zero_ff_inflation}")


def label_to_noise(label: str) -> NoiseConfig:
    if label == "off":
        return NoiseConfig.off()
    if label == "default":
        return NoiseConfig.default()
    parts = [float(x) for x in label.split(",")]
    if len(parts) != 3:
        raise ValueError("noise must be 'off', 'default' or 'p,s,z'")
    return NoiseConfig(*parts)


def _rig(cfg: ScenarioConfig, *, salt: int = 0) -> tuple[Machine, Workspace, TaaChannel]:
    machine = Machine(tsx_enabled=cfg.mitigation != "tsx-off")
    workspace = Workspace(machine)
    channel = TaaChannel(machine, workspace.leak_page, noise=cfg.noise,
                         rng=random.Random((cfg.seed * 7919 + salt) ^ 0x7AA))
    return machine, workspace, channel


def _mitigation_kwargs(cfg: ScenarioConfig, *, same_thread: bool) -> dict:
    """Where a mitigation can actually bite for this victim placement.

    Buffer scrubbing and L1 flushing run at context switches. A victim on
    the sibling hyperthread never switches away, so for cross-thread
    scenarios these knobs have no insertion point and change nothing —
    which is the finding, not a modelling shortcut.
    """
    if not same_thread:
        return {}
    return {
        "verw_before_evict": cfg.mitigation == "verw",
        "l1d_flush_after_victim": cfg.mitigation == "l1dflush",
    }


def _best_pair(seen):
    """Pick the most credible pair from one offset's observations.

    An all-zero read is what the channel reports whenever the transaction
    squashed before forwarding, so (0, 0) soaks up every failure mode at
    once and can out-count the real value.  Any nonzero pair that repeats
    is almost certainly genuine (spurious reads land on near-unique junk),
    so prefer the best-repeating nonzero pair and only believe (0, 0) when
    nothing nonzero recurs.
    """
    if not seen:
        return None
    nonzero = {pair: n for pair, n in seen.items() if pair != (0, 0)}
    if nonzero:
        pair = min(nonzero, key=lambda k: (-nonzero[k], k))
        if nonzero[pair] >= 3:
            return pair
    return min(seen, key=lambda k: (-seen[k], k))


def _modal_line(hist: LeakHistogram, set_index: int,
                offsets=range(LINE - 1)) -> bytes:
    pairs = {off: _best_pair(hist.pairs_seen(set_index, off))
             for off in offsets}
    return stitch_line(pairs).data


# ----------------------------------------------------------------- AES

def run_aes(cfg: ScenarioConfig) -> ScenarioOutcome:
    """Cross-thread read attack on a decryption service's key schedule."""
    key_bytes = int(cfg.params.get("key_bytes", 16))
    reps = cfg.iterations or 24
    setup_rng = random.Random(cfg.seed * 31 + key_bytes)
    key = bytes(setup_rng.randrange(256) for _ in range(key_bytes))

    machine, workspace, channel = _rig(cfg)
    victim = AesDecryptVictim(machine, base=VICTIM_BASE, key=key)

    hist = LeakHistogram()
    try:
        for set_index in victim.secret_sets:
            machine.verw()   # inter-line hygiene, see sweeps.set_matrix
            attack_read(machine, channel, victim.step,
                        workspace.eviction_set(set_index),
                        offsets=range(LINE - 1), iterations=reps, hist=hist)
    except TsxDisabledError as exc:
        raise OnlineFailure(str(exc)) from exc

    stream = b"".join(_modal_line(hist, s) for s in victim.secret_sets)
    threshold = float(cfg.params.get("threshold", 0.9))
    candidates = recon.aes_locate(list(stream), key_bytes=key_bytes,
                                  threshold=threshold)
    hits = [c for c in candidates if c.score >= threshold]
    if not hits:
        raise OfflineFailure("no expanded key schedule located in the stream")
    best = hits[0]
    recovered = stream[best.offset:best.offset + key_bytes]
    verified = recovered == key

    report = {
        "config": cfg.as_report_dict(),
        "results": {
            "located_offset": best.offset,
            "located_score": round(best.score, 6),
            "candidates": [
                {"offset": c.offset, "score": round(c.score, 6)}
                for c in candidates
            ],
            "recovered_key": recovered.hex(),
        },
        "verified": verified,
    }
    files = {"key.txt": recovered.hex().encode() + b"\n"}
    _attach_hist(report, files, hist)
    return ScenarioOutcome(report, files, verified)


# ----------------------------------------------------------------- RSA

def run_rsa(cfg: ScenarioConfig) -> ScenarioOutcome:
    """Cross-thread read attack on a CRT signer, then chunk reassembly."""
    modulus_bits = int(cfg.params.get("modulus_bits", 1024))
    reps = cfg.iterations or 24
    setup_rng = random.Random(cfg.seed * 131 + modulus_bits)
    p, q, n = rsa_keypair(modulus_bits, setup_rng)

    machine, workspace, channel = _rig(cfg)
    victim = RsaCrtVictim(machine, base=VICTIM_BASE, p=p, q=q,
                          modulus_bits=modulus_bits)

    hist = LeakHistogram()
    try:
        for set_index in victim.secret_sets:
            machine.verw()
            attack_read(machine, channel, victim.step,
                        workspace.eviction_set(set_index),
                        offsets=range(LINE - 1), iterations=reps, hist=hist)
    except TsxDisabledError as exc:
        raise OnlineFailure(str(exc)) from exc

    prime_bytes = victim.prime_bytes
    lines_per_prime = max(1, prime_bytes // LINE)
    recovered = b"".join(_modal_line(hist, s) for s in victim.secret_sets)
    p_bytes = recovered[:lines_per_prime * LINE][:prime_bytes]
    q_off = lines_per_prime * LINE if prime_bytes >= LINE else LINE
    q_bytes = recovered[q_off:q_off + prime_bytes]

    chunks = [int.from_bytes(p_bytes[i:i + 8], "little")
              for i in range(0, prime_bytes, 8)]
    chunks += [int.from_bytes(q_bytes[i:i + 8], "little")
               for i in range(0, prime_bytes, 8)]
    # An attacker reading limbs out of leak soup has no order or origin
    # labels; shuffle so the reconstruction earns its keep.
    random.Random(cfg.seed ^ 0xD1CE).shuffle(chunks)

    try:
        rec_p, rec_q = recon.rsa_reconstruct(chunks, n, chunk_bytes=8)
    except recon.RsaReconstructionError as exc:
        raise OfflineFailure(str(exc)) from exc
    verified = rec_p * rec_q == n and {rec_p, rec_q} == {p, q}

    report = {
        "config": cfg.as_report_dict(),
        "results": {
            "modulus": f"{n:x}",
            "pool_size": len(chunks),
            "recovered_p": f"{rec_p:x}",
            "recovered_q": f"{rec_q:x}",
        },
        "verified": verified,
    }
    files = {"key.txt": f"p={rec_p:x}\nq={rec_q:x}\n".encode()}
    _attach_hist(report, files, hist)
    return ScenarioOutcome(report, files, verified)


# ------------------------------------------------------------ NN weights

def run_fann(cfg: ScenarioConfig) -> ScenarioOutcome:
    """Cross-thread read attack on an inference loop's weight pages.

    Several independent dumps at modest depth, then the plausibility
    filter picks per-weight winners across dumps.
    """
    dumps = int(cfg.params.get("dumps", 5))
    reps = cfg.iterations or 3
    setup_rng = random.Random(cfg.seed * 57)
    weights = random_weight_bytes(setup_rng)

    machine, workspace, channel = _rig(cfg)
    victim = NnInferenceVictim(machine, base=VICTIM_BASE, weights=weights)

    observed = [Counter() for _ in range(WEIGHT_COUNT)]
    try:
        for _ in range(dumps):
            hist = LeakHistogram()
            for set_index in victim.secret_sets:
                machine.verw()
                attack_read(machine, channel, victim.step,
                            workspace.eviction_set(set_index),
                            offsets=range(LINE - 1), iterations=reps,
                            hist=hist)
            blob = b"".join(_modal_line(hist, s) for s in victim.secret_sets)
            blob = blob[WEIGHT_BLOB_OFFSET:WEIGHT_BLOB_OFFSET + 4 * WEIGHT_COUNT]
            for i in range(WEIGHT_COUNT):
                value = int.from_bytes(blob[4 * i:4 * i + 4], "little")
                observed[i][value] += 1
    except TsxDisabledError as exc:
        raise OnlineFailure(str(exc)) from exc

    ranked = recon.weight_filter(observed)
    truth = [int.from_bytes(weights[4 * i:4 * i + 4], "little")
             for i in range(WEIGHT_COUNT)]
    in_top = {1: 0, 3: 0, 5: 0}
    for i, cands in enumerate(ranked):
        values = [c.value for c in cands]
        for k in in_top:
            if truth[i] in values[:k]:
                in_top[k] += 1
    accuracy = {f"top{k}": round(v / WEIGHT_COUNT, 6)
                for k, v in in_top.items()}
    verified = in_top[1] / WEIGHT_COUNT >= 0.9

    report = {
        "config": cfg.as_report_dict(),
        "results": {
            "weights": WEIGHT_COUNT,
            "dumps": dumps,
            "accuracy": accuracy,
        },
        "verified": verified,
    }
    top1 = [(cands[0].value if cands else 0) for cands in ranked]
    lines = "".join(f"{v:08x}\n" for v in top1)
    files = {"key.txt": lines.encode()}
    return ScenarioOutcome(report, files, verified)


# ----------------------------------------------------------------- image

def synth_image(seed: int, width: int = 128,
                height: int = 194) -> list[tuple[int, int, int]]:
    """Deterministic test card: smooth gradients plus a few solid shapes.

    Smoothness matters — neighbour-consistency scoring only has an edge
    when adjacent pixels actually correlate, which is also true of every
    photograph the technique would be pointed at.
    """
    rng = random.Random(seed * 977)
    pixels = []
    for y in range(height):
        for x in range(width):
            r = (x * 255) // (width - 1)
            g = (y * 255) // (height - 1)
            b = 255 - ((r + g) // 2)
            pixels.append((r, g, b))
    for _ in range(4):
        x0 = rng.randrange(width - 16)
        y0 = rng.randrange(height - 16)
        w = rng.randrange(8, 32)
        h = rng.randrange(8, 32)
        color = (rng.randrange(256), rng.randrange(256), rng.randrange(256))
        for y in range(y0, min(y0 + h, height)):
            for x in range(x0, min(x0 + w, width)):
                pixels[y * width + x] = color
    return pixels


def run_image(cfg: ScenarioConfig) -> ScenarioOutcome:
    """Write-path attack on enclave page reloads carrying an image.

    Recovers roughly the covered fraction of pixels, then compares
    neighbour-consistency candidate selection against uniform-random
    selection over the very same evidence.
    """
    width = int(cfg.params.get("width", 128))
    height = int(cfg.params.get("height", 194))
    coverage = float(cfg.params.get("coverage", 0.71))
    top_m = int(cfg.params.get("byte_candidates", 3))
    reps = cfg.iterations or 3

    pixels = synth_image(cfg.seed, width, height)
    image_bytes = b"".join(bytes(p) for p in pixels)
    total_pixels = width * height

    mask_rng = random.Random(cfg.seed * 313 + 7)
    missing = set(mask_rng.sample(range(total_pixels),
                                  round((1.0 - coverage) * total_pixels)))

    machine, workspace, channel = _rig(cfg)
    victim = EnclavePageVictim(machine, base=VICTIM_BASE, secret=image_bytes)

    def byte_missing(index: int) -> bool:
        return index >= len(image_bytes) or index // 3 in missing

    byte_counts: list[Counter] = [Counter() for _ in range(len(image_bytes))]
    try:
        for page in range(victim.pages):
            victim.page_load(page)
            page_lines = min(64, -(-(len(image_bytes) - page * PAGE) // LINE))
            hist = LeakHistogram()
            for line_index in range(page_lines):
                machine.verw()
                start = page * PAGE + line_index * LINE
                offsets = [k for k in range(LINE - 1)
                           if not (byte_missing(start + k)
                                   and byte_missing(start + k + 1))]
                if not offsets:
                    continue
                attack_write(machine, channel,
                             lambda: victim.touch_line(page, line_index),
                             workspace.eviction_set(line_index),
                             offsets=offsets, iterations=reps, hist=hist,
                             **_mitigation_kwargs(cfg, same_thread=True))
                for k in offsets:
                    for (b0, b1), count in hist.pairs_seen(
                            line_index, k).items():
                        if not byte_missing(start + k):
                            byte_counts[start + k][b0] += count
                        if not byte_missing(start + k + 1):
                            byte_counts[start + k + 1][b1] += count
    except TsxDisabledError as exc:
        raise OnlineFailure(str(exc)) from exc

    candidates = []
    for px in range(total_pixels):
        if px in missing:
            candidates.append([])
            continue
        per_byte = []
        for c in range(3):
            counter = byte_counts[3 * px + c]
            top = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
            per_byte.append(top[:top_m] or [(0, 1)])
        combos = []
        for (r, wr) in per_byte[0]:
            for (g, wg) in per_byte[1]:
                for (b, wb) in per_byte[2]:
                    combos.append(((r, g, b), wr * wg * wb))
        combos.sort(key=lambda cw: (-cw[1], cw[0]))
        candidates.append(combos)

    chosen = recon.image_reconstruct(candidates, width, height,
                                     mode="neighbor")
    baseline = recon.image_reconstruct(
        candidates, width, height, mode="random",
        rng=random.Random(cfg.seed ^ 0xBA5E))

    def exact_rate(result) -> float:
        hits = sum(1 for px in range(total_pixels)
                   if px not in missing and result[px] == pixels[px])
        return hits / (total_pixels - len(missing))

    neighbor_rate = exact_rate(chosen)
    random_rate = exact_rate(baseline)
    verified = neighbor_rate > random_rate

    report = {
        "config": cfg.as_report_dict(),
        "results": {
            "width": width,
            "height": height,
            "coverage": round(1.0 - len(missing) / total_pixels, 6),
            "pixel_exact_neighbor": round(neighbor_rate, 6),
            "pixel_exact_random": round(random_rate, 6),
        },
        "verified": verified,
    }
    files = {"image.ppm": recon.ppm_bytes(chosen, width, height)}
    return ScenarioOutcome(report, files, verified)


# --------------------------------------------------------- kernel secrets

def _kernel_epoch_dump(cfg: ScenarioConfig, epoch: int) -> tuple[bytes, KernelVictim]:
    """One boot: profile which lines see kernel writes, deep-dump those."""
    probe_reps = int(cfg.params.get("probe_reps", 12))
    reps = cfg.iterations or 24
    machine, workspace, channel = _rig(cfg, salt=epoch + 1)
    victim = KernelVictim(machine, base=KERNEL_PAGE,
                          boot_rng=random.Random(cfg.seed * 1009 + epoch))
    mit = _mitigation_kwargs(cfg, same_thread=True)

    active = []
    for set_index in range(64):
        machine.verw()
        hist = attack_write(machine, channel, victim.step,
                            workspace.eviction_set(set_index),
                            offsets=[0], iterations=probe_reps, **mit)
        # A line counts as active if any nonzero pair repeats: real kernel
        # writes re-read the same bytes, squashes read zero, and spurious
        # garbage almost never lands on the same pair twice.
        if any(pair != (0, 0) and count >= 2
               for pair, count in hist.pairs_seen(set_index, 0).items()):
            active.append(set_index)

    page = bytearray(PAGE)
    for set_index in active:
        machine.verw()
        hist = attack_write(machine, channel, victim.step,
                            workspace.eviction_set(set_index),
                            offsets=range(LINE - 1), iterations=reps, **mit)
        page[set_index * LINE:(set_index + 1) * LINE] = _modal_line(
            hist, set_index)
    return bytes(page), victim


def _run_kernel(cfg: ScenarioConfig, target: str) -> ScenarioOutcome:
    epochs = int(cfg.params.get("epochs", 3))
    dumps = []
    victims = []
    try:
        for epoch in range(epochs):
            page, victim = _kernel_epoch_dump(cfg, epoch)
            dumps.append(page)
            victims.append(victim)
    except TsxDisabledError as exc:
        raise OnlineFailure(str(exc)) from exc

    locations = recon.find_static_locations([[d] for d in dumps])
    pointers = [loc for loc in locations
                if loc.kind == "varying"
                and all(v >= KERNEL_TEXT_BASE for v in loc.values)]
    canaries = [loc for loc in locations
                if loc.kind == "varying"
                and all(v & 0xFF == 0 and v < KERNEL_TEXT_BASE
                        for v in loc.values)]

    if target == "pointer":
        if not pointers:
            raise OfflineFailure("no per-boot kernel text pointer found")
        loc = pointers[0]
        recovered = loc.values
        truth = tuple(v.ground_truth()[0] for v in victims)
        slides = [(v - KERNEL_TEXT_BASE - SYMBOL_OFFSET) // KASLR_ALIGN
                  for v in recovered]
        extra = {"slides": slides}
    else:
        if not canaries:
            raise OfflineFailure("no per-boot stack canary found")
        loc = canaries[0]
        recovered = loc.values
        truth = tuple(v.ground_truth()[1] for v in victims)
        extra = {}

    verified = recovered == truth
    report = {
        "config": cfg.as_report_dict(),
        "results": {
            "epochs": epochs,
            "window_offset": loc.offset,
            "kind": loc.kind,
            "values": [f"{v:016x}" for v in recovered],
            **{k: list(v) for k, v in extra.items()},
            "pointer_windows": [p.offset for p in pointers],
            "canary_windows": [c.offset for c in canaries],
        },
        "verified": verified,
    }
    files = {"key.txt": "".join(f"{v:016x}\n" for v in recovered).encode()}
    return ScenarioOutcome(report, files, verified)


def run_kaslr(cfg: ScenarioConfig) -> ScenarioOutcome:
    """Same-thread write attack on kernel interrupt activity: code pointer."""
    return _run_kernel(cfg, "pointer")


def run_canary(cfg: ScenarioConfig) -> ScenarioOutcome:
    """Same-thread write attack on kernel interrupt activity: stack canary."""
    return _run_kernel(cfg, "canary")


# -------------------------------------------------------------- plumbing

def _attach_hist(report: dict, files: dict[str, bytes],
                 hist: LeakHistogram) -> None:
    files["histograms.csv"] = hist.csv_bytes()
    report["histogram_cells"] = len(hist.counts)


SCENARIOS = {
    "aes": run_aes,
    "rsa": run_rsa,
    "fann": run_fann,
    "image": run_image,
    "kaslr": run_kaslr,
    "canary": run_canary,
}


def run_scenario(cfg: ScenarioConfig) -> ScenarioOutcome:
    try:
        runner = SCENARIOS[cfg.scenario]
    except KeyError:
        raise ValueError(f"unknown scenario {cfg.scenario!r}") from None
    return runner(cfg)
