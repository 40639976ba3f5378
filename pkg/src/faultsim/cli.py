"""``faultsim`` command line: profile, golden, gen-faults, campaign, report.

Exit status is 0 on success, 1 when the fault-free run fails (campaign-level
failure) and 2 for usage or input errors.  Diagnostics go to stderr at the
level named by ``FAULTSIM_LOG`` (error, info or debug; default info).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from . import campaign as cp
from .cnn import load_idx, load_model
from .data import DIGITS_IMAGES, DIGITS_LABELS, LENET_SMALL
from .errors import CampaignAbort, FaultSimError, GoldenMismatch
from .faults import ALL_LANES, FaultConstraints, FaultKind, Mode, dump_fault_list, generate_fault_list
from .isa import FAULT_TARGET_UNITS, UnitClass
from .simt import DeviceConfig

log = logging.getLogger("faultsim")

EXIT_OK, EXIT_CAMPAIGN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_int_set(text: str) -> list[int]:
    """Parse ``"0..9"``, ``"0-3,7"``, ``"R0,R1,R5"`` into a sorted list of ints."""
    out: set[int] = set()
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        m = re.fullmatch(r"[Rr]?(\d+)(?:(?:\.\.|-)[Rr]?(\d+))?", part)
        if not m:
            raise UsageError(f"cannot parse {part!r} in {text!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) is not None else lo
        if hi < lo:
            raise UsageError(f"empty range {part!r}")
        out.update(range(lo, hi + 1))
    if not out:
        raise UsageError(f"empty set {text!r}")
    return sorted(out)


def load_device(path) -> DeviceConfig:
    if path is None:
        return DeviceConfig()
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"device config {path}: {e}") from None
    return DeviceConfig.from_dict(d)


def _write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


# --- commands --------------------------------------------------------------------

def cmd_profile(args) -> int:
    model = load_model(args.model)
    ds = load_idx(args.images, args.labels)
    if not 1 <= args.count <= len(ds):
        raise UsageError(f"--count must be in [1, {len(ds)}]")
    device = load_device(args.device)
    rows = cp.profile_registers(model, [ds.image(i) for i in range(args.count)], device)
    doc = {"model": model.name, "images": args.count,
           "total_writes": sum(c for _, c in rows),
           "registers": [{"register": f"R{r}", "count": c} for r, c in rows]}
    _write(args.out, json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def cmd_golden(args) -> int:
    cfg = cp.CampaignConfig.from_json(args.config)
    golden = cp.run_golden(cfg)
    _write(args.out or cfg.output_dir / "golden.json", golden.to_json())
    return EXIT_OK


def cmd_gen_faults(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    device = load_device(args.device)
    c = FaultConstraints()
    kw = {"sm_ids": tuple(parse_int_set(args.sm))}
    if args.bits:
        kw["bits"] = tuple(parse_int_set(args.bits))
    if args.kind == "register":
        if args.registers:
            kw["registers"] = tuple(parse_int_set(args.registers))
        if args.threads:
            kw["threads"] = tuple(parse_int_set(args.threads))
        if args.stuck_at:
            kw["stuck_at"] = tuple(parse_int_set(args.stuck_at))
    else:
        if args.units:
            try:
                kw["units"] = tuple(UnitClass(u.strip().upper()) for u in args.units.split(","))
            except ValueError as e:
                raise UsageError(str(e)) from None
            bad = [u.value for u in kw["units"] if u not in FAULT_TARGET_UNITS]
            if bad:
                raise UsageError(f"not fault targets: {bad}")
        if args.lanes:
            kw["lanes"] = ((ALL_LANES,) if args.lanes == ALL_LANES
                           else tuple(parse_int_set(args.lanes)))
        kw["modes"] = tuple(Mode(m) for m in args.mode.split(","))
    c = FaultConstraints(**{**c.__dict__, **kw})
    specs = generate_fault_list(args.seed, args.n, FaultKind(args.kind), c, device)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dump_fault_list(specs, args.out)
    log.info("wrote %d faults to %s", len(specs), args.out)
    return EXIT_OK


def cmd_campaign(args) -> int:
    cfg = cp.CampaignConfig.from_json(args.config)
    if args.jobs is not None:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg.jobs = args.jobs
    report = cp.run_campaign(cfg, resume=args.resume)
    log.info("campaign done: %d runs, %d faults", report.runs["total"], report.faults["total"])
    return EXIT_OK


def cmd_report(args) -> int:
    results = cp.read_results(args.results)
    groups = None
    if args.faults:
        from .faults import load_fault_list
        groups = {s.id: cp.fault_group(s) for s in load_fault_list(args.faults)}
    report = cp.aggregate(results, groups=groups)
    text = cp.render(report, args.format)
    if args.format == "table" and args.out is None:
        sys.stdout.write(text)
    else:
        out = args.out or Path(args.results).with_suffix(f".report.{args.format}")
        _write(out, text)
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="faultsim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="per-register write frequencies of a fault-free run")
    p.add_argument("--model", type=Path, default=LENET_SMALL)
    p.add_argument("--images", type=Path, default=DIGITS_IMAGES)
    p.add_argument("--labels", type=Path, default=DIGITS_LABELS)
    p.add_argument("--count", type=int, default=1, help="profile the first COUNT images")
    p.add_argument("--device", type=Path, help="device config JSON")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("golden", help="fault-free run of a campaign config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, help="default: <output_dir>/golden.json")
    p.set_defaults(func=cmd_golden)

    p = sub.add_parser("gen-faults", help="sample a seeded fault list")
    p.add_argument("--kind", choices=[k.value for k in FaultKind], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--registers", help="e.g. 0..9 or R0,R3,R7 (register faults)")
    p.add_argument("--threads", help="resident thread ids (register faults; default all)")
    p.add_argument("--stuck-at", help="stuck-at values, default 0,1 (register faults)")
    p.add_argument("--units", help="comma list of INT_CORE, FP_CORE, SFU (unit faults)")
    p.add_argument("--lanes", help="'all' or lane ids (unit faults; default all)")
    p.add_argument("--mode", default=Mode.FLIP.value,
                   help="comma list of flip, stuck_at_0, stuck_at_1 (unit faults)")
    p.add_argument("--sm", default="0", help="SM ids (default 0)")
    p.add_argument("--bits", help="bit positions (default 0..31)")
    p.add_argument("--device", type=Path, help="device config JSON")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_faults)

    p = sub.add_parser("campaign", help="run a fault-injection campaign")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--jobs", type=int, help="parallel worker processes (overrides config)")
    p.add_argument("--resume", action="store_true", help="keep completed faults in results.csv")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("report", help="aggregate a results CSV")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")
    p.add_argument("--faults", type=Path, help="fault list, to split the report by target")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return ap


def setup_logging() -> None:
    name = os.environ.get("FAULTSIM_LOG", "info").lower()
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(name)
    logging.basicConfig(level=level or logging.INFO, stream=sys.stderr,
                        format="faultsim: %(levelname)s: %(message)s", force=True)
    if level is None:
        log.warning("unknown FAULTSIM_LOG=%r, using info", name)


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CampaignAbort, GoldenMismatch) as e:
        log.error("%s", e)
        return EXIT_CAMPAIGN
    except (UsageError, FaultSimError, OSError, ValueError) as e:
        log.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
