"""Command-line harness: parameter sweeps, end-to-end attacks, page dumps.

Exit codes: 0 when ground-truth verification (or a replay comparison)
passed, 2 for usage errors, 3 when the online phase never produced a
leak, 4 when recovery completed but failed verification or a replay
diverged.  Reports never embed wall-clock time — identical config and
seed must reproduce byte-identical files — so timing goes to stdout.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:                         # Python < 3.11
    import tomli as tomllib

from . import __version__
from .attack import LeakHistogram, dump_page
from .machine import PAGE, TsxDisabledError
from .scenarios import (
    SCENARIOS,
    OfflineFailure,
    OnlineFailure,
    ScenarioConfig,
    ScenarioOutcome,
    _best_pair,
    _mitigation_kwargs,
    _rig,
    label_to_noise,
    run_scenario,
)
from .attack import stitch_line
from .victims import EnclavePageVictim
from . import sweeps

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ONLINE = 3
EXIT_OFFLINE = 4

AES_KEY_BYTES = {"128": 16, "192": 24, "256": 32}
RSA_MOD_BITS = ("512", "1024", "2048", "4096")
SWEEP_KINDS = ("eviction-size", "set-matrix", "offset-matrix")
DUMP_BASE = 0x00403000


# ------------------------------------------------------------ plumbing

def _load_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fold a JSON/TOML config file over the parsed flags (file wins)."""
    args.config_params = {}
    if not args.config:
        return
    path = Path(args.config)
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        else:
            data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        parser.error(f"cannot read config file {path}: {exc}")
    if not isinstance(data, dict):
        parser.error(f"config file {path} must hold a table/object")
    for key in ("seed", "noise", "mitigation", "iterations", "out"):
        if key in data:
            setattr(args, key, data[key])
    for key in ("scenario", "kind"):
        if key in data and hasattr(args, key):
            setattr(args, key, data[key])
    params = data.get("params", {})
    if not isinstance(params, dict):
        parser.error("config 'params' must be a table/object")
    args.config_params = params


def _checked_noise(args, parser) -> None:
    try:
        label_to_noise(str(args.noise))
    except ValueError as exc:
        parser.error(str(exc))
    if args.mitigation not in ("none", "verw", "l1dflush", "tsx-off"):
        parser.error(f"unknown mitigation '{args.mitigation}'")


def _write_outputs(outdir: Path, report: dict, files: dict[str, bytes]) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(report, indent=2, sort_keys=True) + "\n"
    (outdir / "report.json").write_bytes(payload.encode())
    for name, blob in files.items():
        (outdir / name).write_bytes(blob)


def _execute(cfg: ScenarioConfig) -> tuple[dict, dict[str, bytes], bool, int]:
    """Run one scenario and map its outcome onto report + exit code."""
    try:
        if cfg.scenario == "dump-page":
            outcome = _run_dump_page(cfg)
        else:
            outcome = run_scenario(cfg)
    except OnlineFailure as exc:
        report = {"config": cfg.as_report_dict(), "error": str(exc),
                  "phase": "online", "verified": False}
        return report, {}, False, EXIT_ONLINE
    except OfflineFailure as exc:
        report = {"config": cfg.as_report_dict(), "error": str(exc),
                  "phase": "offline", "verified": False}
        return report, {}, False, EXIT_OFFLINE
    code = EXIT_OK if outcome.verified else EXIT_OFFLINE
    return outcome.report, outcome.files, outcome.verified, code


# ----------------------------------------------------------- dump-page

def _run_dump_page(cfg: ScenarioConfig) -> ScenarioOutcome:
    """Recover one planted 4 KiB page through the write-path attack."""
    machine, workspace, channel = _rig(cfg)
    secret = random.Random(cfg.seed * 4049 + 11).randbytes(PAGE)
    victim = EnclavePageVictim(machine, base=DUMP_BASE, secret=secret)
    victim.page_load(0)
    iterations = cfg.iterations or (1 if cfg.noise.noiseless else 24)
    hist = LeakHistogram()
    try:
        dump = dump_page(machine, channel, workspace,
                         lambda i: victim.touch_line(0, i), DUMP_BASE,
                         iterations=iterations, hist=hist,
                         **_mitigation_kwargs(cfg, same_thread=True))
    except TsxDisabledError as exc:
        raise OnlineFailure(str(exc)) from exc

    # Re-stitch from the histogram with squash-aware pair selection, the
    # same read the scenarios use; the raw dump keeps plain modals.
    lines = []
    for set_index in range(64):
        pairs = {off: _best_pair(hist.pairs_seen(set_index, off))
                 for off in range(63)}
        lines.append(stitch_line(pairs).data)
    recovered = b"".join(lines)
    matches = sum(a == b for a, b in zip(recovered, secret))
    accuracy = matches / PAGE
    verified = recovered == secret

    report = {
        "config": cfg.as_report_dict(),
        "results": {
            "byte_accuracy": round(accuracy, 6),
            "raw_confidence": round(dump.confidence, 6),
        },
        "verified": verified,
    }
    files = {"page.bin": recovered, "histograms.csv": hist.csv_bytes()}
    return ScenarioOutcome(report, files, verified)


# ----------------------------------------------------------- commands

def cmd_attack(args, parser) -> int:
    name = args.scenario
    if not name:
        parser.error("attack: give a scenario name or a config file that sets one")
    base, _, suffix = name.partition("-")
    params: dict = {}
    if suffix:
        if base == "aes" and suffix in AES_KEY_BYTES:
            params["key_bytes"] = AES_KEY_BYTES[suffix]
        elif base == "rsa" and suffix in RSA_MOD_BITS:
            params["modulus_bits"] = int(suffix)
        else:
            parser.error(f"unknown scenario '{name}'")
    if base not in SCENARIOS:
        parser.error(f"unknown scenario '{name}' (have: {', '.join(sorted(SCENARIOS))})")
    params.update(args.config_params)
    cfg = ScenarioConfig(scenario=base, seed=args.seed,
                         noise_label=str(args.noise),
                         mitigation=args.mitigation,
                         iterations=args.iterations, params=params)

    started = time.time()
    report, files, verified, code = _execute(cfg)
    elapsed = time.time() - started
    outdir = Path(args.out) / name / str(cfg.seed)
    _write_outputs(outdir, report, files)
    status = ("verified" if verified
              else "online failure" if code == EXIT_ONLINE
              else "not verified")
    print(f"{name} seed={cfg.seed}: {status} in {elapsed:.2f}s -> {outdir}")
    if "error" in report:
        print(f"  {report['phase']}: {report['error']}", file=sys.stderr)
    return code


def cmd_sweep(args, parser) -> int:
    kind = args.kind
    if not kind:
        parser.error("sweep: give a sweep kind or a config file that sets one")
    if kind not in SWEEP_KINDS:
        parser.error(f"unknown sweep '{kind}' (have: {', '.join(SWEEP_KINDS)})")
    noise = label_to_noise(str(args.noise))
    outdir = Path(args.out) / kind / str(args.seed)
    outdir.mkdir(parents=True, exist_ok=True)
    target = outdir / "data.csv"

    started = time.time()
    if kind == "eviction-size":
        rows = sweeps.eviction_size_sweep(
            seed=args.seed, noise=noise,
            iterations=args.iterations or 20)
        sweeps.write_rate_csv(target, rows)
    elif kind == "set-matrix":
        grid = sweeps.set_matrix(
            seed=args.seed, noise=noise,
            iterations=args.iterations or (2 if noise.noiseless else 10))
        sweeps.write_matrix_csv(target, grid)
    else:
        cells = sweeps.offset_matrix(
            seed=args.seed, noise=noise,
            iterations=args.iterations or (1 if noise.noiseless else 24))
        sweeps.write_matrix_csv(target, [cells])
    elapsed = time.time() - started
    print(f"sweep {kind} seed={args.seed}: done in {elapsed:.2f}s -> {target}")
    return EXIT_OK


def cmd_dump_page(args, parser) -> int:
    cfg = ScenarioConfig(scenario="dump-page", seed=args.seed,
                         noise_label=str(args.noise),
                         mitigation=args.mitigation,
                         iterations=args.iterations,
                         params=dict(args.config_params))
    started = time.time()
    report, files, verified, code = _execute(cfg)
    elapsed = time.time() - started
    outdir = Path(args.out) / "dump-page" / str(cfg.seed)
    _write_outputs(outdir, report, files)
    status = "verified" if verified else ("online failure"
                                          if code == EXIT_ONLINE else "not verified")
    print(f"dump-page seed={cfg.seed}: {status} in {elapsed:.2f}s -> {outdir}")
    return code


def cmd_replay(args, parser) -> int:
    """Re-run the config embedded in a report and byte-compare outputs."""
    outdir = Path(args.directory)
    report_path = outdir / "report.json"
    try:
        stored = json.loads(report_path.read_text())
    except (OSError, ValueError) as exc:
        parser.error(f"cannot read {report_path}: {exc}")
    conf = stored.get("config")
    if not isinstance(conf, dict) or "scenario" not in conf:
        parser.error(f"{report_path} carries no usable config block")
    cfg = ScenarioConfig(scenario=conf["scenario"],
                         seed=int(conf.get("seed", 1)),
                         noise_label=str(conf.get("noise", "default")),
                         mitigation=conf.get("mitigation", "none"),
                         iterations=conf.get("iterations"),
                         params=conf.get("params") or {})

    started = time.time()
    report, files, _verified, _code = _execute(cfg)
    elapsed = time.time() - started
    regenerated = dict(files)
    regenerated["report.json"] = (
        json.dumps(report, indent=2, sort_keys=True) + "\n").encode()

    diverged = []
    for name, blob in sorted(regenerated.items()):
        on_disk = outdir / name
        if not on_disk.exists():
            diverged.append(f"{name} (missing on disk)")
        elif on_disk.read_bytes() != blob:
            diverged.append(name)
    if diverged:
        print(f"replay {outdir}: DIVERGED in {elapsed:.2f}s: "
              f"{', '.join(diverged)}", file=sys.stderr)
        return EXIT_OFFLINE
    print(f"replay {outdir}: byte-identical ({len(regenerated)} files, "
          f"{elapsed:.2f}s)")
    return EXIT_OK


# --------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evictleak",
        description="Deterministic transient-leak channel: sweeps, attacks, replay.")
    parser.add_argument("--version", action="version", version=__version__)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=1)
    common.add_argument("--noise", default="default",
                        help="off | default | p,s,z (success, spurious, inflation)")
    common.add_argument("--mitigation", default="none",
                        choices=["none", "verw", "l1dflush", "tsx-off"])
    common.add_argument("--iterations", type=int, default=None)
    common.add_argument("--out", default="out")
    common.add_argument("--config", default=None,
                        help="JSON or TOML file; its keys override flags")

    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", parents=[common],
                              help="run one end-to-end scenario")
    p_attack.add_argument("scenario", nargs="?",
                          help="aes[-128|-192|-256], rsa[-512..-4096], "
                               "fann, image, kaslr, canary")
    p_attack.set_defaults(func=cmd_attack)

    p_sweep = sub.add_parser("sweep", parents=[common],
                             help="write one figure-style CSV")
    p_sweep.add_argument("kind", nargs="?", help=" | ".join(SWEEP_KINDS))
    p_sweep.set_defaults(func=cmd_sweep)

    p_dump = sub.add_parser("dump-page", parents=[common],
                            help="recover a planted 4 KiB page")
    p_dump.set_defaults(func=cmd_dump_page)

    p_replay = sub.add_parser("replay",
                              help="re-run a report's config; exit 0 iff "
                                   "all outputs are byte-identical")
    p_replay.add_argument("directory")
    p_replay.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command != "replay":
        _load_config(args, parser)
        _checked_noise(args, parser)
        try:
            args.seed = int(args.seed)
            if args.iterations is not None:
                args.iterations = int(args.iterations)
        except (TypeError, ValueError):
            parser.error("seed and iterations must be integers")
    return args.func(args, parser)


if __name__ == "__main__":
    sys.exit(main())
