"""Desk-scale fault-injection experiment on lenet-small.

Runs four campaigns and prints their report tables:

* ``register``: stuck-at faults on R0..R9 of random resident threads
* ``units``: permanent single-bit flips on one lane of INT_CORE, FP_CORE and SFU
* ``fp-low`` / ``fp-high``: single-lane FP_CORE flips restricted to mantissa bits
  0..10 and to exponent/sign bits 23..31, for the masking comparison

    python3 scripts/desk_campaign.py --out runs/desk --n 200 --images 2 --jobs 4
"""
import argparse
import logging
from pathlib import Path

from faultsim.campaign import CampaignConfig, render_table, run_campaign
from faultsim.faults import FaultConstraints, dump_fault_list, generate_fault_list
from faultsim.isa import UnitClass

log = logging.getLogger("desk_campaign")
LANES = tuple(range(32))


def campaigns(n: int) -> dict:
    sms = (0, 1)
    return {
        "register": ("register", FaultConstraints(sm_ids=sms)),
        "units": ("unit", FaultConstraints(sm_ids=sms, lanes=LANES,
                                           units=(UnitClass.INT_CORE, UnitClass.FP_CORE, UnitClass.SFU))),
        "fp-low": ("unit", FaultConstraints(sm_ids=sms, lanes=LANES, units=(UnitClass.FP_CORE,),
                                            bits=tuple(range(0, 11)))),
        "fp-high": ("unit", FaultConstraints(sm_ids=sms, lanes=LANES, units=(UnitClass.FP_CORE,),
                                             bits=tuple(range(23, 32)))),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--n", type=int, default=200, help="faults per campaign")
    ap.add_argument("--images", type=int, default=2, help="images per fault")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--only", nargs="*", help="subset of campaign names")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    masked = {}
    for i, (name, (kind, cons)) in enumerate(campaigns(args.n).items()):
        if args.only and name not in args.only:
            continue
        d = args.out / name
        d.mkdir(parents=True, exist_ok=True)
        faults = d / "faults.jsonl"
        dump_fault_list(generate_fault_list(args.seed + i, args.n, kind, cons), faults)
        cfg = CampaignConfig(faults, d, image_count=args.images, seed=args.seed, jobs=args.jobs)
        (d / "config.json").write_text(cfg.to_json())
        report = run_campaign(cfg)
        masked[name] = report.runs["categories"]["MASKED"]["percent"]
        print(f"== {name} ({args.n} faults x {args.images} images)")
        print(render_table(report))

    if "fp-low" in masked and "fp-high" in masked:
        lo, hi = masked["fp-low"], masked["fp-high"]
        verdict = "holds" if lo > hi else "does not hold"
        print(f"FP_CORE masked: bits 0-10 {lo:.2f}%, bits 23-31 {hi:.2f}% -> low > high {verdict}")


if __name__ == "__main__":
    main()
