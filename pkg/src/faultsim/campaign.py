"""Fault-injection campaigns: golden run, faulty runs, classification, reports.

A campaign injects one permanent fault at a time, runs inference on a fixed
image subset with the fault active in every kernel, and compares each output
with the fault-free (golden) output.  Results are recorded per
``(fault, image)`` run and collapsed per fault by severity.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cnn import Dataset, Model, compile_model, infer, load_idx, load_model, reference_infer
from .cnn.runtime import CompiledModel, run_compiled
from .data import DIGITS_IMAGES, DIGITS_LABELS, LENET_SMALL
from .errors import (CampaignAbort, ConfigError, EmptyResults, FaultSimError, FormatError,
                     GoldenMismatch, LengthMismatch, Trap)
from .faults import FaultSpec, RegisterFault, load_fault_list, make_hook, validate_fault
from .simt import DeviceConfig, ExecStats

log = logging.getLogger(__name__)

F32 = np.float32
U32 = np.uint32
BUDGET_FACTOR = 20
CSV_HEADER = ["fault_id", "image_index", "outcome", "trap_kind", "corrupted_writes",
              "golden_top1", "faulty_top1"]


class Category(enum.Enum):
    MASKED = "MASKED"
    SDC_SAFE = "SDC_SAFE"
    SDC_CRITICAL = "SDC_CRITICAL"
    DUE = "DUE"
    TOOL_ERROR = "TOOL_ERROR"


SEVERITY = {Category.MASKED: 0, Category.SDC_SAFE: 1, Category.SDC_CRITICAL: 2,
            Category.DUE: 3, Category.TOOL_ERROR: 4}
REPORTED = (Category.DUE, Category.SDC_CRITICAL, Category.SDC_SAFE, Category.MASKED)


@dataclass(frozen=True)
class Outcome:
    category: Category
    trap_kind: str | None = None   # only for DUE

    def __str__(self):
        return f"DUE{{{self.trap_kind}}}" if self.category is Category.DUE else self.category.value

    @property
    def severity(self) -> int:
        return SEVERITY[self.category]


def top1(vec) -> int:
    """Index of the largest entry; ties go to the lowest index, NaN never wins
    unless every entry is NaN."""
    v = np.asarray(vec, F32)
    v = np.where(np.isnan(v), -np.inf, v)
    return int(np.argmax(v))


def classify(golden, faulty) -> Outcome:
    """Outcome of one faulty run against its golden vector."""
    if isinstance(faulty, Trap):
        return Outcome(Category.DUE, faulty.kind.value)
    g = np.ascontiguousarray(golden, F32).reshape(-1)
    f = np.ascontiguousarray(faulty, F32).reshape(-1)
    if g.size != f.size:
        raise LengthMismatch(f"golden has {g.size} entries, faulty has {f.size}")
    if np.array_equal(g.view(U32), f.view(U32)):
        return Outcome(Category.MASKED)
    if top1(f) == top1(g):
        return Outcome(Category.SDC_SAFE)
    return Outcome(Category.SDC_CRITICAL)


def collapse(outcomes) -> Outcome:
    """Most severe outcome: TOOL_ERROR > DUE > SDC_CRITICAL > SDC_SAFE > MASKED.

    Among DUEs the first one in image order supplies the trap kind.
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyResults("no outcomes to collapse")
    return max(outcomes, key=lambda o: o.severity)


# --- configuration -------------------------------------------------------------

@dataclass
class CampaignConfig:
    faults: Path
    output_dir: Path
    model: Path = LENET_SMALL
    images: Path = DIGITS_IMAGES
    labels: Path = DIGITS_LABELS
    image_count: int = 1
    seed: int = 0
    device: DeviceConfig = field(default_factory=DeviceConfig)
    instr_budget: int | None = None   # None: BUDGET_FACTOR x golden instruction count
    jobs: int = 1
    keep_vectors: bool = False

    _PATHS = ("faults", "output_dir", "model", "images", "labels")

    def __post_init__(self):
        for k in self._PATHS:
            setattr(self, k, Path(getattr(self, k)))
        if isinstance(self.device, dict):
            self.device = DeviceConfig.from_dict(self.device)
        if self.image_count < 1:
            raise ConfigError("image_count must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.instr_budget is not None and self.instr_budget < 1:
            raise ConfigError("instr_budget must be >= 1")

    @classmethod
    def from_json(cls, path) -> "CampaignConfig":
        """Load a JSON config; relative paths resolve against its directory."""
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        for k in cls._PATHS:
            if k in d:
                p = Path(d[k])
                d[k] = p if p.is_absolute() else path.parent / p
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"{path}: {e}") from None

    def to_json(self) -> str:
        d = {k: str(getattr(self, k)) for k in self._PATHS}
        d.update(image_count=self.image_count, seed=self.seed, device=self.device.to_dict(),
                 instr_budget=self.instr_budget, jobs=self.jobs, keep_vectors=self.keep_vectors)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def select_images(n_available: int, count: int, seed: int) -> list[int]:
    if not 1 <= count <= n_available:
        raise ConfigError(f"image_count {count} outside [1, {n_available}]")
    return sorted(random.Random(seed).sample(range(n_available), count))


# --- golden run ------------------------------------------------------------------

@dataclass
class GoldenRun:
    model: Model
    image_indices: list
    vectors: list         # float32 arrays
    stats: list           # ExecStats per image
    instr_budget: int

    def to_json(self) -> str:
        d = {"model": self.model.name,
             "image_indices": self.image_indices,
             "vectors": [[f"0x{b:08x}" for b in v.view(U32)] for v in self.vectors],
             "top1": [top1(v) for v in self.vectors],
             "stats": [s.to_json() for s in self.stats],
             "instr_budget": self.instr_budget}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _load_inputs(config: CampaignConfig) -> tuple[Model, Dataset]:
    model = load_model(config.model)
    ds = load_idx(config.images, config.labels)
    if ds.images.shape[1:] != model.input_shape:
        raise FormatError(f"dataset images {ds.images.shape[1:]} do not match model "
                          f"input {model.input_shape}")
    return model, ds


def run_golden(config: CampaignConfig, model: Model | None = None,
               dataset: Dataset | None = None) -> GoldenRun:
    """Fault-free inference on the selected images, checked against the reference.

    Raises CampaignAbort if any golden run traps and GoldenMismatch if the
    simulator disagrees with the sequential reference.
    """
    if model is None or dataset is None:
        model, dataset = _load_inputs(config)
    indices = select_images(len(dataset), config.image_count, config.seed)
    cm = compile_model(model, config.device)
    vectors, stats = [], []
    for i in indices:
        img = dataset.image(i)
        try:
            res = run_compiled(cm, img)
        except Trap as t:
            raise CampaignAbort(f"golden run on image {i} trapped: {t}") from t
        ref = reference_infer(model, img)
        if not np.array_equal(res.probs.view(U32), ref.view(U32)):
            raise GoldenMismatch(f"image {i}: simulator output differs from reference")
        vectors.append(res.probs)
        stats.append(res.stats)
    budget = config.instr_budget or BUDGET_FACTOR * max(s.instructions_executed for s in stats)
    return GoldenRun(model, indices, vectors, stats, budget)


# --- per-fault runs --------------------------------------------------------------

@dataclass
class RunResult:
    fault_id: str
    image_index: int
    outcome: Outcome
    corrupted_writes: int
    golden_top1: int
    faulty_top1: int | None
    probs: np.ndarray | None = None

    def row(self) -> list:
        return [self.fault_id, self.image_index, self.outcome.category.value,
                self.outcome.trap_kind or "", self.corrupted_writes, self.golden_top1,
                "" if self.faulty_top1 is None else self.faulty_top1]

    @classmethod
    def from_row(cls, r: dict) -> "RunResult":
        try:
            cat = Category(r["outcome"])
            return cls(r["fault_id"], int(r["image_index"]), Outcome(cat, r["trap_kind"] or None),
                       int(r["corrupted_writes"]), int(r["golden_top1"]),
                       int(r["faulty_top1"]) if r["faulty_top1"] else None)
        except (KeyError, ValueError, TypeError) as e:
            raise FormatError(f"bad results row {r}: {e}") from None


@dataclass
class FaultResult:
    fault_id: str
    runs: list

    @property
    def outcome(self) -> Outcome:
        return collapse(r.outcome for r in self.runs)

    @property
    def corrupted_writes(self) -> int:
        return sum(r.corrupted_writes for r in self.runs)


def run_fault(cm: CompiledModel, images: list, golden: list, image_indices: list,
              spec: FaultSpec, keep_vectors: bool = False) -> FaultResult:
    """Run every selected image with ``spec`` active and classify each run."""
    runs = []
    for idx, img, g in zip(image_indices, images, golden):
        hook = make_hook(spec)
        probs = None
        try:
            res = run_compiled(cm, img, hook)
            outcome, probs, cw = classify(g, res.probs), res.probs, res.stats.corrupted_writes
        except Trap as t:
            outcome, cw = classify(g, t), t.stats.corrupted_writes if t.stats else 0
        except FaultSimError as e:
            log.warning("fault %s image %d: tool error: %s", spec.id, idx, e)
            outcome, cw = Outcome(Category.TOOL_ERROR), 0
        runs.append(RunResult(spec.id, idx, outcome, cw, top1(g),
                              None if probs is None else top1(probs),
                              probs if keep_vectors else None))
    return FaultResult(spec.id, runs)


_WORKER: dict = {}


def _init_worker(ctx: dict) -> None:
    _WORKER.clear()
    _WORKER.update(ctx)


def _work(spec: FaultSpec) -> FaultResult:
    w = _WORKER
    return run_fault(w["cm"], w["images"], w["golden"], w["indices"], spec, w["keep"])


# --- aggregation -----------------------------------------------------------------

def _table(outcomes: list[Outcome]) -> dict:
    counted = [o for o in outcomes if o.category is not Category.TOOL_ERROR]
    total = len(counted)

    def entry(n):
        return {"count": n, "percent": 100.0 * n / total if total else 0.0}

    cats = {c.value: entry(sum(o.category is c for o in counted)) for c in REPORTED}
    kinds = sorted({o.trap_kind for o in counted if o.category is Category.DUE})
    due = {k: entry(sum(o.trap_kind == k for o in counted)) for k in kinds}
    return {"total": total, "categories": cats, "due_by_trap": due,
            "tool_errors": len(outcomes) - total}


@dataclass
class CampaignReport:
    runs: dict          # per (fault, image)
    faults: dict        # per-fault severity collapse
    groups: dict = field(default_factory=dict)   # fault target -> {"runs", "faults"}
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"runs": self.runs, "faults": self.faults, "groups": self.groups,
                "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignReport":
        return cls(d["runs"], d["faults"], d.get("groups", {}), d.get("metadata", {}))


def fault_group(spec: FaultSpec) -> str:
    """Report row a fault belongs to: ``register`` or the unit class name."""
    f = spec.fault
    if isinstance(f, RegisterFault):
        return "register"
    unit = getattr(f, "unit", None)
    return unit.value if unit is not None else "transient"


def aggregate(results: list[FaultResult], metadata: dict | None = None,
              groups: dict | None = None) -> CampaignReport:
    """Counts and percentages per category at run and fault granularity.

    ``groups`` optionally maps fault id to a group label; each group gets its
    own pair of tables.
    """
    results = sorted(results, key=lambda r: r.fault_id)
    if not results or not any(r.runs for r in results):
        raise EmptyResults("no results to aggregate")

    def tables(rs):
        return (_table([run.outcome for r in rs for run in r.runs]),
                _table([r.outcome for r in rs]))

    runs, faults = tables(results)
    by_group = {}
    if groups:
        for g in sorted(set(groups.get(r.fault_id, "unknown") for r in results)):
            gr, gf = tables([r for r in results if groups.get(r.fault_id, "unknown") == g])
            by_group[g] = {"runs": gr, "faults": gf}
    return CampaignReport(runs, faults, by_group, dict(metadata or {}))


def read_results(path) -> list[FaultResult]:
    """Group the rows of a results CSV by fault id, preserving file order."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return []
            if reader.fieldnames != CSV_HEADER:
                raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
            rows = [RunResult.from_row(r) for r in reader]
    except OSError as e:
        raise FormatError(f"{path}: {e}") from None
    out: dict[str, FaultResult] = {}
    for r in rows:
        out.setdefault(r.fault_id, FaultResult(r.fault_id, [])).runs.append(r)
    return list(out.values())


# --- campaign driver -------------------------------------------------------------

def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_campaign(config: CampaignConfig, resume: bool = False) -> CampaignReport:
    """Run every fault of the configured list and write results and report.

    Output files in ``config.output_dir``: ``golden.json``, ``results.csv``
    (one row per run, written as faults complete, in fault-list order) and
    ``report.json``.  With ``resume`` set, faults whose rows are already
    complete in ``results.csv`` are kept and not rerun.
    """
    specs = load_fault_list(config.faults)
    if not specs:
        raise EmptyResults(f"{config.faults}: empty fault list")
    for s in specs:
        validate_fault(s.fault, config.device)
    model, ds = _load_inputs(config)
    golden = run_golden(config, model, ds)
    device = replace(config.device, instr_budget=golden.instr_budget)
    cm = compile_model(model, device)

    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "golden.json").write_text(golden.to_json())
    csv_path = out / "results.csv"

    done: dict[str, FaultResult] = {}
    if resume and csv_path.exists():
        ids = {s.id for s in specs}
        for fr in read_results(csv_path):
            if fr.fault_id not in ids:
                raise ConfigError(f"{csv_path}: fault {fr.fault_id} is not in {config.faults}")
            if [r.image_index for r in fr.runs] == golden.image_indices:
                done[fr.fault_id] = fr
        log.info("resuming: %d of %d faults already complete", len(done), len(specs))
    todo = [s for s in specs if s.id not in done]

    results: dict[str, FaultResult] = dict(done)
    images = [ds.image(i) for i in golden.image_indices]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in specs:
            if s.id in done:
                w.writerows(r.row() for r in done[s.id].runs)
        fh.flush()

        def record(fr: FaultResult):
            results[fr.fault_id] = fr
            w.writerows(r.row() for r in fr.runs)
            fh.flush()
            n = len(results)
            if n % 50 == 0 or n == len(specs):
                log.info("%d/%d faults done", n, len(specs))

        if config.jobs == 1 or len(todo) <= 1:
            for s in todo:
                record(run_fault(cm, images, golden.vectors, golden.image_indices, s,
                                 config.keep_vectors))
        else:
            ctx = {"cm": cm, "images": images, "golden": golden.vectors,
                   "indices": golden.image_indices, "keep": config.keep_vectors}
            with ProcessPoolExecutor(config.jobs, initializer=_init_worker,
                                     initargs=(ctx,)) as ex:
                for fr in ex.map(_work, todo):
                    record(fr)

    metadata = {"seed": config.seed, "device": device.to_dict(), "model": model.name,
                "model_sha256": file_digest(config.model),
                "fault_list_sha256": file_digest(config.faults), "faults": len(specs),
                "image_count": config.image_count, "image_indices": golden.image_indices}
    report = aggregate([results[s.id] for s in specs], metadata,
                       {s.id: fault_group(s) for s in specs})
    (out / "report.json").write_text(report.to_json())
    return report


# --- profiler --------------------------------------------------------------------

def profile_registers(model: Model | CompiledModel, images, device: DeviceConfig | None = None
                      ) -> list[tuple[int, int]]:
    """Destination-register write counts over fault-free runs.

    Returns ``(register, count)`` for every register written at least once,
    most frequent first, ties by register index.
    """
    cm = model if isinstance(model, CompiledModel) else compile_model(model, device)
    total = ExecStats.empty(cm.device.regs_per_thread)
    for img in images:
        total = total.merge(infer(cm, img).stats)
    rows = [(r, c) for r, c in enumerate(total.reg_write_counts) if c]
    return sorted(rows, key=lambda rc: (-rc[1], rc[0]))


# --- rendering -------------------------------------------------------------------

_LABELS = {"DUE": "DUE (%)", "SDC_SAFE": "SDC Safe (%)", "SDC_CRITICAL": "SDC Critical (%)",
           "MASKED": "Masked (%)"}
_COLUMNS = ("DUE", "SDC_SAFE", "SDC_CRITICAL", "MASKED")


def render_table(report: CampaignReport) -> str:
    head = ["Target", "Granularity", "N"] + [_LABELS[c] for c in _COLUMNS] + ["Tool errors"]
    rows = []
    sections = [("all", {"runs": report.runs, "faults": report.faults})]
    sections += sorted(report.groups.items())
    for target, t in sections:
        for gran in ("runs", "faults"):
            tab = t[gran]
            rows.append([target, gran, str(tab["total"])]
                        + [f"{tab['categories'][c]['percent']:.2f}" for c in _COLUMNS]
                        + [str(tab["tool_errors"])])
    widths = [max(len(r[i]) for r in rows + [head]) for i in range(len(head))]
    fmt = lambda r: "  ".join(x.rjust(w) if i > 1 else x.ljust(w)  # noqa: E731
                              for i, (x, w) in enumerate(zip(r, widths)))
    lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    due = report.runs["due_by_trap"]
    if due:
        lines.append("")
        lines.append("DUE by trap kind (runs): " + ", ".join(
            f"{k} {v['count']} ({v['percent']:.2f}%)" for k, v in due.items()))
    return "\n".join(lines) + "\n"


def render_csv(report: CampaignReport) -> str:
    lines = ["target,granularity,category,count,percent"]
    sections = [("all", {"runs": report.runs, "faults": report.faults})]
    sections += sorted(report.groups.items())
    for target, t in sections:
        for gran in ("runs", "faults"):
            tab = t[gran]
            for c in _COLUMNS:
                e = tab["categories"][c]
                lines.append(f"{target},{gran},{c},{e['count']},{e['percent']!r}")
            for k, e in tab["due_by_trap"].items():
                lines.append(f"{target},{gran},DUE:{k},{e['count']},{e['percent']!r}")
            lines.append(f"{target},{gran},TOOL_ERROR,{tab['tool_errors']},")
    return "\n".join(lines) + "\n"


def render(report: CampaignReport, fmt: str) -> str:
    if fmt == "table":
        return render_table(report)
    if fmt == "json":
        return report.to_json()
    if fmt == "csv":
        return render_csv(report)
    raise ValueError(f"unknown format {fmt!r}")
