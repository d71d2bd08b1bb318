"""Experiment runner: seed-aligned sweeps, k-sample accuracy, aggregation.

Seed alignment is the core discipline: the trajectory seed for cell
(knob value v, repeat j, problem q) is derived only from (j, q), never from v,
so knob effects are paired rather than confounded. Raw JSONL traces are the
source of truth; every table cell is recomputable from them.
"""

from __future__ import annotations

import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .backends.base import Backend
from .core import AcceptanceThreshold, EngineConfig, RunMetrics, Scheme
from .engine import TrajectoryResult, run_trajectory, run_vanilla
from .seeding import derive_seed
from .simlab import ANSWER_RE, ChainTask

RESULTS_SCHEMA = "stepspec.results.v1"

CSV_COLUMNS = (
    "scheme",
    "knob",
    "knob_value",
    "problems",
    "repeats",
    "pass_at_1",
    "mean_latency_s",
    "mean_thinking_tokens",
    "mean_accepted_fraction",
    "mean_rejected_count",
    "budget_exhausted_rate",
)


class Knob(str, Enum):
    THRESHOLD = "Threshold"
    FORCE_FIRST_N = "ForceFirstN"
    TOKEN_BUDGET = "TokenBudget"
    DRAFT_LENGTH = "DraftLength"


class MissingSamples(ValueError):
    pass


class MismatchedRunSets(ValueError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    knob: Knob
    values: tuple
    base_config: EngineConfig
    repeats: int = 16

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("a sweep needs at least one knob value")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not isinstance(self.values, tuple):
            object.__setattr__(self, "values", tuple(self.values))


@dataclass(frozen=True)
class RunRecord:
    """One trajectory's identity and measurements within a sweep."""

    problem_id: str
    repeat: int
    scheme: Scheme
    knob_value: Any
    metrics: RunMetrics

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "trajectory",
            "problem_id": self.problem_id,
            "repeat": self.repeat,
            "scheme": self.scheme.value,
            "knob_value": self.knob_value,
            "metrics": self.metrics.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunRecord":
        return cls(
            problem_id=data["problem_id"],
            repeat=data["repeat"],
            scheme=Scheme(data["scheme"]),
            knob_value=data["knob_value"],
            metrics=RunMetrics.from_dict(data["metrics"]),
        )


@dataclass(frozen=True)
class CellAggregate:
    """Aggregate measurements for one (scheme, knob value) sweep cell."""

    scheme: Scheme
    knob: Knob
    knob_value: Any
    problems: int
    repeats: int
    pass_at_1: float
    mean_latency_s: float
    median_latency_s: float
    mean_thinking_tokens: float
    mean_accepted_fraction: float | None
    mean_rejected_count: float
    budget_exhausted_rate: float


@dataclass
class SweepResult:
    spec: SweepSpec
    schemes: tuple[Scheme, ...]
    cells: list[CellAggregate]
    records: list[RunRecord]
    traces: dict[tuple[str, Any], list[dict]]

    def cell(self, scheme: Scheme, knob_value: Any) -> CellAggregate:
        for cell in self.cells:
            if cell.scheme is scheme and cell.knob_value == knob_value:
                return cell
        raise KeyError((scheme, knob_value))

    def records_for(self, scheme: Scheme, knob_value: Any) -> list[RunRecord]:
        return [
            r
            for r in self.records
            if r.scheme is scheme and r.knob_value == knob_value
        ]


def pass_at_1(results_by_problem: Mapping[str, Sequence[RunMetrics]], k: int) -> float:
    """Mean over problems of (correct samples / k)."""
    if not results_by_problem:
        raise MissingSamples("no problems supplied")
    fractions = []
    for problem_id, runs in results_by_problem.items():
        if len(runs) != k:
            raise MissingSamples(
                f"problem {problem_id} has {len(runs)} samples, expected {k}"
            )
        fractions.append(sum(1 for r in runs if r.correct) / k)
    return sum(fractions) / len(fractions)


def speedup(
    scheme_records: Sequence[RunRecord], baseline_records: Sequence[RunRecord]
) -> float:
    """Baseline mean latency over scheme mean latency, on identical run sets."""
    scheme_keys = sorted((r.problem_id, r.repeat) for r in scheme_records)
    baseline_keys = sorted((r.problem_id, r.repeat) for r in baseline_records)
    if not scheme_keys or scheme_keys != baseline_keys:
        raise MismatchedRunSets("scheme and baseline cover different (problem, seed) sets")
    scheme_mean = statistics.fmean(r.metrics.latency_s for r in scheme_records)
    baseline_mean = statistics.fmean(r.metrics.latency_s for r in baseline_records)
    return baseline_mean / scheme_mean


def grade_answer(answer_text: str | None, expected: int) -> bool:
    """Match the declared final answer; falls back to the last integer in the text."""
    if not answer_text:
        return False
    declared = ANSWER_RE.findall(answer_text)
    if declared:
        return int(declared[-1]) == expected
    import re

    numbers = re.findall(r"-?\d+", answer_text)
    return bool(numbers) and int(numbers[-1]) == expected


def apply_knob(config: EngineConfig, knob: Knob, value: Any) -> EngineConfig:
    if knob is Knob.THRESHOLD:
        return replace(config, threshold=AcceptanceThreshold(int(value)))
    if knob is Knob.FORCE_FIRST_N:
        return replace(config, force_first_n=int(value))
    if knob is Knob.TOKEN_BUDGET:
        return replace(config, token_budget=int(value))
    if knob is Knob.DRAFT_LENGTH:
        return replace(config, draft_length=int(value))
    raise ValueError(f"unknown knob {knob}")


def run_scheme(
    scheme: Scheme,
    config: EngineConfig,
    problem: str,
    small: Backend,
    base: Backend,
) -> TrajectoryResult:
    if scheme is Scheme.BASE_ONLY:
        return run_vanilla(config, problem, base)
    if scheme is Scheme.SMALL_ONLY:
        return run_vanilla(config, problem, small)
    if scheme is Scheme.SPEC_DECODE:
        return run_vanilla(config, problem, base, draft=small, token_speculative=True)
    if scheme is Scheme.SPEC_REASON:
        return run_trajectory(replace(config, hierarchical=False), problem, small, base)
    if scheme is Scheme.SPEC_REASON_DECODE:
        return run_trajectory(replace(config, hierarchical=True), problem, small, base)
    raise ValueError(f"unknown scheme {scheme}")


def trajectory_seed(base_seed: int, problem_id: str, repeat: int) -> int:
    """Cell seeds depend only on (problem, repeat), never on the knob value."""
    return derive_seed("trajectory", base_seed, problem_id, repeat)


def run_sweep(
    sweep: SweepSpec,
    tasks: Sequence[ChainTask],
    small: Backend,
    base: Backend,
    schemes: Sequence[Scheme] = (Scheme.SPEC_REASON,),
    parallelism: int = 1,
    output_dir: str | Path | None = None,
) -> SweepResult:
    """Run every (knob value x scheme x problem x repeat) trajectory and
    aggregate per (scheme, knob value) cell. A failed trajectory is recorded
    with its cell coordinates and skipped, not fatal.
    """
    if not tasks:
        raise ValueError("run_sweep needs at least one task")
    schemes = tuple(schemes)
    problems = {f"task{i:04d}": task for i, task in enumerate(tasks)}

    jobs = [
        (value, scheme, problem_id, repeat)
        for value in sweep.values
        for scheme in schemes
        for problem_id in problems
        for repeat in range(sweep.repeats)
    ]

    failures: list[dict] = []

    def run_one(job):
        value, scheme, problem_id, repeat = job
        task = problems[problem_id]
        config = apply_knob(sweep.base_config, sweep.knob, value)
        config = replace(
            config, seed=trajectory_seed(sweep.base_config.seed, problem_id, repeat)
        )
        try:
            result = run_scheme(scheme, config, task.problem_text(), small, base)
        except Exception as exc:  # recorded, not fatal
            return job, None, exc
        correct = grade_answer(result.state.final_answer, task.final_answer())
        metrics = replace(result.metrics, correct=correct)
        return job, (metrics, result.trace), None

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outputs = list(pool.map(run_one, jobs))
    else:
        outputs = [run_one(job) for job in jobs]

    records: list[RunRecord] = []
    traces: dict[tuple[str, Any], list[dict]] = {}
    for (value, scheme, problem_id, repeat), payload, error in outputs:
        if error is not None:
            failures.append(
                {
                    "knob_value": value,
                    "scheme": scheme.value,
                    "problem_id": problem_id,
                    "repeat": repeat,
                    "error": repr(error),
                }
            )
            continue
        metrics, trace = payload
        record = RunRecord(problem_id, repeat, scheme, value, metrics)
        records.append(record)
        key = (scheme.value, value)
        bucket = traces.setdefault(key, [])
        for item in trace:
            bucket.append(
                {"problem_id": problem_id, "repeat": repeat, **item}
            )
        bucket.append(record.to_dict())

    records.sort(key=lambda r: (r.scheme.value, str(r.knob_value), r.problem_id, r.repeat))
    cells = aggregate_records(records, sweep.knob, sweep.values, schemes)
    result = SweepResult(sweep, schemes, cells, records, traces)
    if output_dir is not None:
        write_outputs(result, Path(output_dir), failures)
    return result


def aggregate_records(
    records: Sequence[RunRecord],
    knob: Knob,
    values: Iterable[Any],
    schemes: Iterable[Scheme],
) -> list[CellAggregate]:
    cells = []
    for value in values:
        for scheme in schemes:
            cell_records = [
                r for r in records if r.scheme is scheme and r.knob_value == value
            ]
            if not cell_records:
                continue
            by_problem: dict[str, list[RunMetrics]] = {}
            for record in cell_records:
                by_problem.setdefault(record.problem_id, []).append(record.metrics)
            # tolerate ragged cells (failed runs are recorded, not fatal)
            repeats = max(len(runs) for runs in by_problem.values())
            fractions_by_problem = [
                sum(1 for m in runs if m.correct) / len(runs)
                for runs in by_problem.values()
            ]
            cell_pass_at_1 = sum(fractions_by_problem) / len(fractions_by_problem)
            latencies = [r.metrics.latency_s for r in cell_records]
            fractions = [
                r.metrics.accepted_fraction
                for r in cell_records
                if r.metrics.accepted_fraction is not None
            ]
            cells.append(
                CellAggregate(
                    scheme=scheme,
                    knob=knob,
                    knob_value=value,
                    problems=len(by_problem),
                    repeats=repeats,
                    pass_at_1=cell_pass_at_1,
                    mean_latency_s=statistics.fmean(latencies),
                    median_latency_s=statistics.median(latencies),
                    mean_thinking_tokens=statistics.fmean(
                        r.metrics.thinking_tokens for r in cell_records
                    ),
                    mean_accepted_fraction=(
                        statistics.fmean(fractions) if fractions else None
                    ),
                    mean_rejected_count=statistics.fmean(
                        r.metrics.rejected_count for r in cell_records
                    ),
                    budget_exhausted_rate=statistics.fmean(
                        1.0 if r.metrics.budget_exhausted else 0.0
                        for r in cell_records
                    ),
                )
            )
    return cells


def _trace_file_name(scheme_value: str, knob_value: Any) -> str:
    safe_value = str(knob_value).replace("/", "_").replace(" ", "")
    return f"{scheme_value}_{safe_value}.jsonl"


def write_outputs(result: SweepResult, output_dir: Path, failures: list[dict]) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    _write_results_csv(result.cells, output_dir / "results.csv")
    trace_dir = output_dir / "traces"
    trace_dir.mkdir(exist_ok=True)
    for (scheme_value, knob_value), items in sorted(
        result.traces.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))
    ):
        path = trace_dir / _trace_file_name(scheme_value, knob_value)
        with path.open("w") as handle:
            for item in items:
                handle.write(json.dumps(item) + "\n")
    summary = {
        "schema": RESULTS_SCHEMA,
        "knob": result.spec.knob.value,
        "values": list(result.spec.values),
        "repeats": result.spec.repeats,
        "schemes": [s.value for s in result.schemes],
        "base_config": result.spec.base_config.to_dict(),
        "failures": failures,
        "cells": [
            {
                "scheme": cell.scheme.value,
                "knob_value": cell.knob_value,
                "problems": cell.problems,
                "repeats": cell.repeats,
                "pass_at_1": cell.pass_at_1,
                "mean_latency_s": cell.mean_latency_s,
                "median_latency_s": cell.median_latency_s,
                "mean_thinking_tokens": cell.mean_thinking_tokens,
                "mean_accepted_fraction": cell.mean_accepted_fraction,
                "mean_rejected_count": cell.mean_rejected_count,
                "budget_exhausted_rate": cell.budget_exhausted_rate,
            }
            for cell in result.cells
        ],
    }
    (output_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    plot_dir = output_dir / "plots"
    plot_dir.mkdir(exist_ok=True)
    _write_plot_data(result.cells, plot_dir / "latency_accuracy.dat")
    _write_scatter_svg(result.cells, plot_dir / "latency_accuracy.svg")


def _write_results_csv(cells: Sequence[CellAggregate], path: Path) -> None:
    lines = [f"# schema: {RESULTS_SCHEMA}", ",".join(CSV_COLUMNS)]
    for cell in cells:
        lines.append(
            ",".join(
                [
                    cell.scheme.value,
                    cell.knob.value,
                    str(cell.knob_value),
                    str(cell.problems),
                    str(cell.repeats),
                    f"{cell.pass_at_1:.6f}",
                    f"{cell.mean_latency_s:.6f}",
                    f"{cell.mean_thinking_tokens:.3f}",
                    (
                        ""
                        if cell.mean_accepted_fraction is None
                        else f"{cell.mean_accepted_fraction:.6f}"
                    ),
                    f"{cell.mean_rejected_count:.3f}",
                    f"{cell.budget_exhausted_rate:.6f}",
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def read_results_csv(path: str | Path) -> list[dict[str, str]]:
    rows = []
    lines = Path(path).read_text().splitlines()
    header: list[str] | None = None
    for line in lines:
        if not line or line.startswith("#"):
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append(dict(zip(header, line.split(","))))
    return rows


def records_from_trace_dir(trace_dir: str | Path) -> list[RunRecord]:
    """Rebuild run records from raw JSONL traces (the source of truth)."""
    records = []
    for path in sorted(Path(trace_dir).glob("*.jsonl")):
        with path.open() as handle:
            for line in handle:
                item = json.loads(line)
                if item.get("kind") == "trajectory":
                    records.append(RunRecord.from_dict(item))
    return records


def _write_plot_data(cells: Sequence[CellAggregate], path: Path) -> None:
    lines = ["# scheme knob_value mean_latency_s pass_at_1"]
    for cell in cells:
        lines.append(
            f"{cell.scheme.value} {cell.knob_value} "
            f"{cell.mean_latency_s:.6f} {cell.pass_at_1:.6f}"
        )
    path.write_text("\n".join(lines) + "\n")


_SCHEME_COLORS = {
    Scheme.BASE_ONLY: "#555555",
    Scheme.SMALL_ONLY: "#999999",
    Scheme.SPEC_DECODE: "#1f77b4",
    Scheme.SPEC_REASON: "#d62728",
    Scheme.SPEC_REASON_DECODE: "#2ca02c",
}


def _write_scatter_svg(cells: Sequence[CellAggregate], path: Path) -> None:
    """Self-contained latency/accuracy scatter, one color per scheme."""
    width, height, margin = 640, 440, 60
    if cells:
        xs = [c.mean_latency_s for c in cells]
        ys = [c.pass_at_1 for c in cells]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
    else:
        x_lo = y_lo = 0.0
        x_hi = y_hi = 1.0
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0
    if y_hi - y_lo < 1e-12:
        y_hi = y_lo + 1.0

    def sx(x: float) -> float:
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def sy(y: float) -> float:
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 16}" text-anchor="middle" '
        f'font-size="13">mean latency (s)</text>',
        f'<text x="18" y="{height / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 18 {height / 2})">pass@1</text>',
        f'<text x="{margin}" y="{height - margin + 16}" font-size="11" '
        f'text-anchor="middle">{x_lo:.1f}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" font-size="11" '
        f'text-anchor="middle">{x_hi:.1f}</text>',
        f'<text x="{margin - 8}" y="{height - margin}" font-size="11" '
        f'text-anchor="end">{y_lo:.2f}</text>',
        f'<text x="{margin - 8}" y="{margin + 4}" font-size="11" '
        f'text-anchor="end">{y_hi:.2f}</text>',
    ]
    seen_schemes = []
    for cell in cells:
        color = _SCHEME_COLORS.get(cell.scheme, "#000000")
        parts.append(
            f'<circle cx="{sx(cell.mean_latency_s):.1f}" cy="{sy(cell.pass_at_1):.1f}" '
            f'r="5" fill="{color}"><title>{cell.scheme.value} '
            f"{cell.knob.value}={cell.knob_value}</title></circle>"
        )
        if cell.scheme not in seen_schemes:
            seen_schemes.append(cell.scheme)
    for i, scheme in enumerate(seen_schemes):
        y = margin + 14 * i
        color = _SCHEME_COLORS.get(scheme, "#000000")
        parts.append(
            f'<circle cx="{width - margin - 120}" cy="{y}" r="5" fill="{color}"/>'
        )
        parts.append(
            f'<text x="{width - margin - 110}" y="{y + 4}" font-size="11">'
            f"{scheme.value}</text>"
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
