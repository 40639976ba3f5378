import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faultsim.campaign import (CSV_HEADER, CampaignConfig, Category, FaultResult, Outcome,
                               RunResult, aggregate, classify, collapse, profile_registers,
                               read_results, render, run_campaign, run_fault, run_golden,
                               select_images, top1)
from faultsim.cnn import compile_model, infer, reference_infer
from faultsim.errors import (CampaignAbort, ConfigError, EmptyResults, LengthMismatch, Trap)
from faultsim.faults import (FaultConstraints, FaultSpec, RegisterFault, dump_fault_list,
                             generate_fault_list)
from faultsim.isa import UnitClass
from faultsim.simt import DeviceConfig, TrapKind

F32 = np.float32
G = np.array([0.1, 0.7, 0.2], F32)


def trap(kind=TrapKind.OUT_OF_BOUNDS):
    return Trap(kind, "k", 0, "x")


def test_classify_cases():
    assert classify(G, G.copy()) == Outcome(Category.MASKED)
    assert classify(G, np.array([0.1, 0.6, 0.3], F32)) == Outcome(Category.SDC_SAFE)
    assert classify(G, np.array([0.5, 0.2, 0.3], F32)) == Outcome(Category.SDC_CRITICAL)
    for k in TrapKind:
        o = classify(G, trap(k))
        assert o.category is Category.DUE and o.trap_kind == k.value
        assert str(o) == f"DUE{{{k.value}}}"
    with pytest.raises(LengthMismatch):
        classify(G, G[:2])


def test_classify_is_bitwise():
    z = np.array([0.0, 1.0], F32)
    # -0.0 == 0.0 numerically but differs in bits
    assert classify(z, np.array([-0.0, 1.0], F32)).category is Category.SDC_SAFE


def test_top1_ties_and_nan():
    assert top1([0.5, 0.5, 0.1]) == 0
    assert top1([np.nan, 0.2, 0.3]) == 2
    g = np.array([0.5, 0.5], F32)
    assert classify(g, np.array([0.4, 0.4], F32)).category is Category.SDC_SAFE
    assert classify(np.array([0.1, 0.9], F32), np.array([np.nan, np.nan], F32)).category \
        is Category.SDC_CRITICAL


outcomes = st.one_of(
    st.sampled_from([Outcome(Category.MASKED), Outcome(Category.SDC_SAFE),
                     Outcome(Category.SDC_CRITICAL)]),
    st.sampled_from([k.value for k in TrapKind]).map(lambda k: Outcome(Category.DUE, k)))


@given(st.lists(outcomes, min_size=1, max_size=10), outcomes)
def test_collapse_is_max_and_monotone(xs, y):
    c = collapse(xs)
    assert c.severity == max(o.severity for o in xs)
    assert collapse(xs + [y]).severity >= c.severity
    if c.category is Category.DUE:
        assert c == next(o for o in xs if o.category is Category.DUE)


def test_collapse_empty():
    with pytest.raises(EmptyResults):
        collapse([])


def fr(fid, *outs):
    return FaultResult(fid, [RunResult(fid, i, o, 0, 0, 0) for i, o in enumerate(outs)])


@settings(max_examples=200)
@given(st.lists(st.lists(outcomes, min_size=1, max_size=4), min_size=1, max_size=30))
def test_aggregate_sums(groups):
    rep = aggregate([fr(f"F{i}", *g) for i, g in enumerate(groups)])
    for tab, n in ((rep.runs, sum(map(len, groups))), (rep.faults, len(groups))):
        assert tab["total"] == n
        assert sum(e["count"] for e in tab["categories"].values()) == n
        assert abs(sum(e["percent"] for e in tab["categories"].values()) - 100) <= 0.01
        due = tab["categories"]["DUE"]["count"]
        assert sum(e["count"] for e in tab["due_by_trap"].values()) == due


def test_aggregate_excludes_tool_errors():
    rep = aggregate([fr("A", Outcome(Category.MASKED)), fr("B", Outcome(Category.TOOL_ERROR))])
    assert rep.faults["total"] == 1 and rep.faults["tool_errors"] == 1
    assert rep.faults["categories"]["MASKED"]["percent"] == 100.0


def test_aggregate_empty():
    with pytest.raises(EmptyResults):
        aggregate([])


def test_all_masked_renders_100():
    rep = aggregate([fr("A", Outcome(Category.MASKED))])
    assert "100.00" in render(rep, "table")


def test_json_and_csv_carry_same_numbers():
    rep = aggregate([fr("A", Outcome(Category.MASKED), Outcome(Category.DUE, "Timeout")),
                     fr("B", Outcome(Category.SDC_SAFE)), fr("C", Outcome(Category.SDC_CRITICAL))],
                    groups={"A": "register", "B": "register", "C": "FP_CORE"})
    d = json.loads(render(rep, "json"))
    rows = list(csv.DictReader(render(rep, "csv").splitlines()))
    seen = 0
    for r in rows:
        if r["category"] == "TOOL_ERROR" or r["category"].startswith("DUE:"):
            continue
        t = d if r["target"] == "all" else d["groups"][r["target"]]
        e = t[r["granularity"]]["categories"][r["category"]]
        assert int(r["count"]) == e["count"] and float(r["percent"]) == e["percent"]
        seen += 1
    assert seen == 3 * 2 * 4


# -- config -----------------------------------------------------------------------

def test_config_json(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"faults": "f.jsonl", "output_dir": "out",
                                                 "image_count": 3, "device": {"num_sms": 2}}))
    c = CampaignConfig.from_json(tmp_path / "c.json")
    assert c.faults == tmp_path / "f.jsonl" and c.image_count == 3 and c.device.num_sms == 2
    (tmp_path / "c.json").write_text(c.to_json())
    assert CampaignConfig.from_json(tmp_path / "c.json") == c


@pytest.mark.parametrize("text", ["{", "[]", '{"faults": "f"}', '{"faults": "f", "output_dir": "o", "bogus": 1}',
                                  '{"faults": "f", "output_dir": "o", "image_count": 0}'])
def test_config_errors(tmp_path, text):
    (tmp_path / "c.json").write_text(text)
    with pytest.raises(ConfigError):
        CampaignConfig.from_json(tmp_path / "c.json")


def test_select_images():
    assert select_images(200, 5, 3) == select_images(200, 5, 3)
    assert len(set(select_images(200, 50, 1))) == 50
    with pytest.raises(ConfigError):
        select_images(10, 11, 0)


# -- golden run and faults -----------------------------------------------------------

def test_golden_run(tmp_path, lenet, digits):
    cfg = CampaignConfig(tmp_path / "f", tmp_path, image_count=5, seed=2)
    a, b = run_golden(cfg, lenet, digits), run_golden(cfg, lenet, digits)
    assert len(a.vectors) == 5
    for i, v, w in zip(a.image_indices, a.vectors, b.vectors):
        assert abs(float(v.sum(dtype=np.float64)) - 1) < 1e-5
        assert np.array_equal(v.view(np.uint32), w.view(np.uint32))
        assert np.array_equal(v, reference_infer(lenet, digits.image(i)))
    assert a.to_json() == b.to_json()
    assert a.instr_budget == 20 * max(s.instructions_executed for s in a.stats)


def test_golden_trap_aborts(tmp_path, lenet, digits):
    cfg = CampaignConfig(tmp_path / "f", tmp_path, device=DeviceConfig(instr_budget=1000))
    with pytest.raises(CampaignAbort):
        run_golden(cfg, lenet, digits)


def test_never_written_register_is_masked(lenet, lenet_cm, digits):
    g = infer(lenet_cm, digits.image(0)).probs
    r = run_fault(lenet_cm, [digits.image(0)], [g], [0], FaultSpec("X", RegisterFault(1, 3, 33, 7, 1)))
    assert r.outcome == Outcome(Category.MASKED) and r.corrupted_writes == 0


def test_address_register_fault_is_due(lenet_cm, digits):
    g = infer(lenet_cm, digits.image(0)).probs
    # R2 carries the byte address of loads; bit 30 pushes it far outside memory
    r = run_fault(lenet_cm, [digits.image(0)], [g], [0], FaultSpec("X", RegisterFault(0, 0, 2, 30, 1)))
    assert r.outcome == Outcome(Category.DUE, "OutOfBoundsAccess")
    assert r.corrupted_writes > 0


def _campaign(tmp_path, specs, name="out", **kw):
    dump_fault_list(specs, tmp_path / "faults.jsonl")
    cfg = CampaignConfig(tmp_path / "faults.jsonl", tmp_path / name, **kw)
    return cfg, run_campaign(cfg)


def test_unit_campaign_rerun_counts(tmp_path):
    specs = generate_fault_list(4, 200, "unit", FaultConstraints(
        units=(UnitClass.FP_CORE,), sm_ids=(0, 1), lanes=("all",) + tuple(range(32))))
    _, a = _campaign(tmp_path, specs, "a")
    _, b = _campaign(tmp_path, specs, "b")
    assert a.to_json() == b.to_json()
    assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "b/results.csv").read_bytes()


def test_resume_equivalence(tmp_path):
    specs = generate_fault_list(9, 12, "register", FaultConstraints(registers=range(10), sm_ids=(0,),
                                                                    threads=range(64)))
    cfg, full = _campaign(tmp_path, specs, image_count=2)
    csv_path = cfg.output_dir / "results.csv"
    want = csv_path.read_text()
    assert len(want.splitlines()) == 1 + 12 * 2
    # simulate an interruption after five faults, with a half-written sixth
    csv_path.write_text("\n".join(want.splitlines()[:1 + 5 * 2 + 1]) + "\n")
    again = run_campaign(cfg, resume=True)
    assert csv_path.read_text() == want
    assert again.to_json() == full.to_json()


def test_results_csv_shape(tmp_path):
    specs = generate_fault_list(1, 10, "register")
    cfg, _ = _campaign(tmp_path, specs, image_count=3)
    rows = list(csv.reader((cfg.output_dir / "results.csv").open()))
    assert rows[0] == CSV_HEADER and len(rows) == 31
    assert [f.fault_id for f in read_results(cfg.output_dir / "results.csv")] == [s.id for s in specs]


# -- profiler ------------------------------------------------------------------------

def test_profile_conservation(lenet_cm, digits):
    imgs = [digits.image(0), digits.image(1)]
    prof = profile_registers(lenet_cm, imgs)
    total = sum(infer(lenet_cm, x).stats.register_writes for x in imgs)
    assert sum(c for _, c in prof) == total
    counts = [c for _, c in prof]
    assert counts == sorted(counts, reverse=True)
    assert {r for r, _ in prof} >= set(range(10))
    assert profile_registers(lenet_cm, imgs) == prof
