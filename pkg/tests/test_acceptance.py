"""Acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints a
PASS/FAIL line for each criterion.
"""
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import NOTES
from faultsim.campaign import (CampaignConfig, Category, FaultResult, Outcome, RunResult,
                               aggregate, classify, profile_registers, run_campaign, run_fault,
                               run_golden)
from faultsim.cnn import Conv, Dense, MaxPool, Relu, Softmax, infer, random_model, reference_infer
from faultsim.errors import Trap
from faultsim.faults import (FaultConstraints, FaultSpec, Mode, RegisterFault, UnitFault,
                             corrupt_value, dump_fault_list, generate_fault_list, make_hook)
from faultsim.isa import UnitClass
from faultsim.simt import TrapKind

U32 = np.uint32
F32 = np.float32


# -- oracle equivalence -------------------------------------------------------------

SMALL_ARCHS = [
    ((1, 10, 10), (Conv(3, 3), Relu(), MaxPool(2, 2), Dense(10), Softmax())),
    ((2, 9, 9), (Conv(4, 3, 2, 1), Relu(), MaxPool(2, 1), Dense(6), Softmax())),
    ((1, 8, 8), (Conv(2, 5, 1, 2), Relu(), Dense(8), Relu(), Dense(4), Softmax())),
    ((16,), (Dense(12), Relu(), Dense(10), Softmax())),
]


@pytest.mark.acceptance("oracle equivalence (>=20 pairs, bit-exact, <1 min)")
def test_oracle_equivalence(lenet_cm, lenet, digits):
    t0 = time.perf_counter()
    pairs = 0
    for i in range(12):
        img = digits.image(i)
        assert np.array_equal(infer(lenet_cm, img).probs.view(U32), reference_infer(lenet, img).view(U32))
        pairs += 1
    for seed in range(12):
        shape, layers = SMALL_ARCHS[seed % len(SMALL_ARCHS)]
        m = random_model(f"r{seed}", shape, layers, seed)
        x = np.random.default_rng(100 + seed).uniform(0, 1, shape).astype(F32)
        assert np.array_equal(infer(m, x).probs.view(U32), reference_infer(m, x).view(U32))
        pairs += 1
    elapsed = time.perf_counter() - t0
    NOTES["oracle equivalence (>=20 pairs, bit-exact, <1 min)"] = f"{pairs} pairs in {elapsed:.1f}s"
    assert pairs >= 20 and elapsed < 60


# -- golden determinism -------------------------------------------------------------

@pytest.mark.acceptance("golden determinism (byte-identical vectors, stats, files)")
def test_golden_determinism(tmp_path):
    blobs = []
    for name in ("a", "b"):
        cfg = CampaignConfig(tmp_path / "f.jsonl", tmp_path / name, image_count=4, seed=5)
        g = run_golden(cfg)
        (tmp_path / f"{name}.json").write_text(g.to_json())
        blobs.append((g, (tmp_path / f"{name}.json").read_bytes()))
    (a, fa), (b, fb) = blobs
    assert fa == fb
    for x, y in zip(a.vectors, b.vectors):
        assert x.tobytes() == y.tobytes()
    for x, y in zip(a.stats, b.stats):
        assert x.to_json() == y.to_json()


# -- fault model --------------------------------------------------------------------

def _oracle(v: int, bit: int, mode: Mode) -> int:
    """Bit-string manipulation, independent of the integer arithmetic under test."""
    s = list(format(v, "032b"))
    i = 31 - bit
    s[i] = {"stuck_at_0": "0", "stuck_at_1": "1"}.get(mode.value, "1" if s[i] == "0" else "0")
    return int("".join(s), 2)


@pytest.mark.acceptance("fault-model unit suite (32 bits x 1000 values, <5 s)")
def test_fault_model_exhaustive():
    t0 = time.perf_counter()
    vals = [int(v) for v in np.random.default_rng(2024).integers(0, 2**32, 1000, dtype=np.uint64)]
    for bit in range(32):
        for v in vals:
            f = corrupt_value(v, bit, Mode.FLIP)
            assert f == _oracle(v, bit, Mode.FLIP)
            assert corrupt_value(f, bit, Mode.FLIP) == v          # involution
            assert f ^ v == 1 << bit                               # single-bit locality
            for m in (Mode.STUCK_AT_0, Mode.STUCK_AT_1):
                s = corrupt_value(v, bit, m)
                assert s == _oracle(v, bit, m)
                assert corrupt_value(s, bit, m) == s              # idempotence
                assert (s ^ v) & ~(1 << bit) == 0
    elapsed = time.perf_counter() - t0
    NOTES["fault-model unit suite (32 bits x 1000 values, <5 s)"] = f"{elapsed:.2f}s"
    assert elapsed < 5


# -- matching soundness --------------------------------------------------------------

class DiffTrace:
    """Wraps a fault hook and compares every write against an independent expectation."""

    def __init__(self, fault: RegisterFault):
        self.f = fault
        self.inner = make_hook(fault)
        self.false_pos = self.false_neg = self.matched = 0

    def _check(self, instr, sm, rt, before, after):
        hit = (sm == self.f.sm_id) & (rt == self.f.thread_id) & (instr.dst == self.f.register)
        want = before.copy()
        for i in np.flatnonzero(hit):
            want[i] = _oracle(int(before[i]), self.f.bit, self.f.mode)
        self.matched += int(hit.sum())
        wrong = after != want
        self.false_pos += int((wrong & ~hit).sum())
        self.false_neg += int((wrong & hit).sum())

    def apply_lanes(self, instr, sm, rt, vals):
        out = np.asarray(self.inner.apply_lanes(instr, sm, rt, vals), U32)
        self._check(instr, np.asarray(sm), np.asarray(rt), np.asarray(vals, U32), out)
        return out

    def __call__(self, coord, instr, v):
        out = self.inner(coord, instr, v)
        self._check(instr, np.array([coord.sm_id]), np.array([coord.resident_thread_id]),
                    np.array([v], U32), np.array([out], U32))
        return out


@pytest.mark.acceptance("matching soundness (100 seeded RegisterFaults, zero FP/FN)")
def test_matching_soundness(lenet_cm, digits):
    specs = generate_fault_list(17, 100, "register", FaultConstraints(sm_ids=(0, 1)))
    img = digits.image(0)
    total_matched = 0
    for s in specs:
        tr = DiffTrace(s.fault)
        try:
            infer(lenet_cm, img, hook=tr)
        except Trap:
            pass
        assert tr.false_pos == 0 and tr.false_neg == 0, s
        total_matched += tr.matched
    NOTES["matching soundness (100 seeded RegisterFaults, zero FP/FN)"] = \
        f"{total_matched} matching writes checked"
    assert total_matched > 0


# -- classification -----------------------------------------------------------------

@pytest.mark.acceptance("classification truth table")
def test_classification_truth_table():
    g = np.array([0.05, 0.8, 0.15], F32)
    assert classify(g, g.copy()) == Outcome(Category.MASKED)
    assert classify(g, np.array([0.05, 0.79, 0.16], F32)) == Outcome(Category.SDC_SAFE)
    assert classify(g, np.nextafter(g, 1).astype(F32)) == Outcome(Category.SDC_SAFE)
    assert classify(g, np.array([0.5, 0.3, 0.2], F32)) == Outcome(Category.SDC_CRITICAL)
    for kind in TrapKind:
        assert classify(g, Trap(kind, "k", 3, "")) == Outcome(Category.DUE, kind.value)


# -- never-written registers --------------------------------------------------------

@pytest.mark.acceptance("never-written-register faults are MASKED with 0 corrupted writes")
def test_never_written_registers(lenet_cm, digits):
    imgs = [digits.image(0)]
    written = {r for r, _ in profile_registers(lenet_cm, imgs)}
    absent = [r for r in range(lenet_cm.device.regs_per_thread) if r not in written]
    assert absent
    golden = [infer(lenet_cm, imgs[0]).probs]
    rng = np.random.default_rng(3)
    for r in absent:
        f = RegisterFault(int(rng.integers(0, 2)), int(rng.integers(0, 256)), r,
                          int(rng.integers(0, 32)), int(rng.integers(0, 2)))
        res = run_fault(lenet_cm, imgs, golden, [0], FaultSpec(f"N{r}", f))
        assert res.outcome == Outcome(Category.MASKED)
        assert res.corrupted_writes == 0
    NOTES["never-written-register faults are MASKED with 0 corrupted writes"] = \
        f"R{absent[0]}..R{absent[-1]} ({len(absent)} registers)"


# -- parallelism invariance ---------------------------------------------------------

@pytest.mark.acceptance("parallelism invariance (200 faults, jobs 1 vs 8, <10 min)")
def test_parallelism_invariance(tmp_path):
    t0 = time.perf_counter()
    specs = (generate_fault_list(21, 120, "register", FaultConstraints(sm_ids=(0, 1)))
             + [FaultSpec(f"U{i:06d}", s.fault) for i, s in enumerate(generate_fault_list(
                 22, 80, "unit", FaultConstraints(sm_ids=(0, 1), lanes=("all",) + tuple(range(32)))))])
    dump_fault_list(specs, tmp_path / "faults.jsonl")
    reports = []
    for jobs in (1, 8):
        cfg = CampaignConfig(tmp_path / "faults.jsonl", tmp_path / f"j{jobs}", image_count=2,
                             seed=1, jobs=jobs)
        run_campaign(cfg)
        reports.append(((tmp_path / f"j{jobs}" / "report.json").read_bytes(),
                        (tmp_path / f"j{jobs}" / "results.csv").read_bytes()))
    elapsed = time.perf_counter() - t0
    NOTES["parallelism invariance (200 faults, jobs 1 vs 8, <10 min)"] = f"{elapsed:.0f}s for both runs"
    assert reports[0] == reports[1]
    assert elapsed < 600


# -- report integrity ---------------------------------------------------------------

outcomes = st.one_of(
    st.sampled_from([Outcome(Category.MASKED), Outcome(Category.SDC_SAFE),
                     Outcome(Category.SDC_CRITICAL), Outcome(Category.TOOL_ERROR)]),
    st.sampled_from([k.value for k in TrapKind]).map(lambda k: Outcome(Category.DUE, k)))


@pytest.mark.acceptance("report integrity (percent sums 100.00 +- 0.01, >=1000 cases)")
@settings(max_examples=1000, database=None)
@given(st.lists(st.tuples(st.lists(outcomes, min_size=1, max_size=6), st.sampled_from("ab")),
                min_size=1, max_size=60))
def test_report_integrity(data):
    results = [FaultResult(f"F{i}", [RunResult(f"F{i}", j, o, 0, 0, 0) for j, o in enumerate(outs)])
               for i, (outs, _) in enumerate(data)]
    groups = {f"F{i}": g for i, (_, g) in enumerate(data)}
    if all(o.category is Category.TOOL_ERROR for outs, _ in data for o in outs):
        return
    rep = aggregate(results, groups=groups)
    tables = [rep.runs, rep.faults] + [t[k] for t in rep.groups.values() for k in ("runs", "faults")]
    for tab in tables:
        if tab["total"] == 0:
            continue
        s = sum(e["percent"] for e in tab["categories"].values())
        assert abs(s - 100.0) <= 0.01
        assert sum(e["count"] for e in tab["categories"].values()) == tab["total"]


# -- directional check --------------------------------------------------------------

DIRECTIONAL = "directional check (FP_CORE low bits mask more than high bits; reported only)"


@pytest.mark.acceptance(DIRECTIONAL)
def test_directional_check(lenet_cm, digits):
    imgs = [digits.image(0)]
    golden = [infer(lenet_cm, imgs[0]).probs]
    rng = np.random.default_rng(8)

    def masked_fraction(bits, per_bit=6):
        masked = total = 0
        for b in bits:
            for _ in range(per_bit):
                f = UnitFault(int(rng.integers(0, 2)), UnitClass.FP_CORE, b, Mode.FLIP,
                              int(rng.integers(0, 32)))
                r = run_fault(lenet_cm, imgs, golden, [0], FaultSpec("D", f))
                masked += r.outcome.category is Category.MASKED
                total += 1
        return masked / total

    low, high = masked_fraction(range(0, 11)), masked_fraction(range(23, 32))
    holds = low > high
    NOTES[DIRECTIONAL] = (f"masked low bits 0-10: {100 * low:.1f}%, bits 23-31: {100 * high:.1f}%, "
                          f"direction {'holds' if holds else 'does not hold'}")
    print(NOTES[DIRECTIONAL])


# -- DUE reachability ---------------------------------------------------------------

@pytest.mark.acceptance("DUE reachability (address-register fault -> OutOfBoundsAccess)")
def test_due_reachability(tmp_path):
    # R2 holds the byte address of every load; a stuck-at-1 high bit throws it past memory
    spec = FaultSpec("ADDR", RegisterFault(0, 0, 2, 30, 1))
    dump_fault_list([spec], tmp_path / "f.jsonl")
    rep = run_campaign(CampaignConfig(tmp_path / "f.jsonl", tmp_path / "out"))
    assert rep.faults["categories"]["DUE"]["count"] == 1
    assert rep.faults["due_by_trap"] == {"OutOfBoundsAccess": {"count": 1, "percent": 100.0}}
