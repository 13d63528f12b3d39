"""Run configuration, machine-readable run reports, and report comparison."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .contact import ForceModelParams
from .kernels import KernelParams
from .scenes import SceneSpec
from .stepping import StepConfig
from .surrogate import FitParams

REPORT_VERSION = 1

# informational fields ignored by comparisons and determinism checks
VOLATILE_KEYS = ("wall_time_ms",)


class SchemaMismatch(ValueError):
    pass


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    step: StepConfig = field(default_factory=StepConfig)
    kernel: KernelParams = field(default_factory=KernelParams)
    fit: FitParams = field(default_factory=FitParams)
    n_surrogate: int = 8
    n_steps: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    def as_dict(self) -> dict:
        out = {
            "scene": self.scene.as_dict(),
            "step": asdict(self.step),
            "kernel": asdict(self.kernel),
            "fit": asdict(self.fit),
            "n_surrogate": self.n_surrogate,
            "n_steps": self.n_steps,
            "seed": self.seed,
            "workers": self.workers,
        }
        return out

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        data = dict(data)
        scene = SceneSpec.from_dict(data.get("scene", {}))
        step_data = dict(data.get("step", {}))
        force = step_data.pop("force", None)
        step = StepConfig(**step_data)
        if force:
            step.force = ForceModelParams(**force)
        if isinstance(step.surrogate_force_damping, list):
            step.surrogate_force_damping = tuple(step.surrogate_force_damping)
        kernel = KernelParams(**data.get("kernel", {}))
        fit = FitParams(**data.get("fit", {}))
        return RunConfig(
            scene=scene,
            step=step,
            kernel=kernel,
            fit=fit,
            n_surrogate=int(data.get("n_surrogate", 8)),
            n_steps=int(data.get("n_steps", 10)),
            seed=int(data.get("seed", 0)),
            workers=int(data.get("workers", 1)),
        )


def step_record(stats, wall_time_ms: float) -> dict:
    return {
        "contacts": stats.contacts_merged,
        "picard_iterations": stats.picard_iterations,
        "checks_by_level": {str(k): int(v) for k, v in sorted(stats.checks_by_level.items())},
        "sweep_histograms": [
            {str(k): int(v) for k, v in sorted(h.items())} for h in stats.sweep_histograms
        ],
        "kernel": stats.kernel.as_dict(),
        "broad_phase_pairs": stats.broad_phase_pairs,
        "wall_time_ms": wall_time_ms,
    }


def build_report(config: RunConfig, steps: list[dict], system, wall_time_ms: float) -> dict:
    agg_checks: dict[str, int] = {}
    kernel = {"iterative_invocations": 0, "comparison_invocations": 0, "fallback_invocations": 0}
    picard_total = 0
    contacts_total = 0
    for s in steps:
        for lvl, count in s["checks_by_level"].items():
            agg_checks[lvl] = agg_checks.get(lvl, 0) + count
        for key in kernel:
            kernel[key] += s["kernel"][key]
        picard_total += s["picard_iterations"]
        contacts_total += s["contacts"]
    iterative = kernel["iterative_invocations"]
    fallback_rate = kernel["fallback_invocations"] / iterative if iterative else 0.0
    particles = [
        {
            "translation": [float(x) for x in p.motion.translation],
            "rotation": [float(x) for x in p.motion.rotation],
            "velocity": [float(x) for x in p.v],
            "omega": [float(x) for x in p.omega],
        }
        for p in system.particles
    ]
    return {
        "version": REPORT_VERSION,
        "config": config.as_dict(),
        "steps": steps,
        "aggregate": {
            "total_checks": sum(agg_checks.values()),
            "checks_by_level": {k: agg_checks[k] for k in sorted(agg_checks)},
            **kernel,
            "fallback_rate": fallback_rate,
            "picard_iterations_total": picard_total,
            "picard_iterations_mean": picard_total / len(steps) if steps else 0.0,
            "contacts_total": contacts_total,
            "wall_time_ms": wall_time_ms,
        },
        "final_state": {"time": system.time, "particles": particles},
    }


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def save_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report))


def load_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def strip_volatile(report) -> object:
    """Copy of a report with wall-time fields removed (for byte comparisons)."""
    if isinstance(report, dict):
        return {k: strip_volatile(v) for k, v in report.items() if k not in VOLATILE_KEYS}
    if isinstance(report, list):
        return [strip_volatile(v) for v in report]
    return report


def write_trace_csv(steps: list[dict], path) -> None:
    """Per (step, Picard sweep, level) check counts, spreadsheet-friendly."""
    lines = ["step,sweep,level,checks"]
    for si, s in enumerate(steps):
        for swi, hist in enumerate(s["sweep_histograms"]):
            for lvl in sorted(hist, key=int):
                lines.append(f"{si},{swi},{lvl},{hist[lvl]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _ratio(a: float, b: float) -> float | None:
    if b == 0:
        return None if a == 0 else float("inf")
    return a / b


def compare_reports(a: dict, b: dict) -> dict:
    """Counter ratios (a / b) of two reports of the same scene kind."""
    for r in (a, b):
        if r.get("version") != REPORT_VERSION:
            raise SchemaMismatch(f"unsupported report version {r.get('version')!r}")
    kind_a = a["config"]["scene"]["kind"]
    kind_b = b["config"]["scene"]["kind"]
    if kind_a != kind_b:
        raise SchemaMismatch(f"scene kinds differ: {kind_a} vs {kind_b}")
    agg_a, agg_b = a["aggregate"], b["aggregate"]
    ratios = {}
    for key in ("total_checks", "iterative_invocations", "comparison_invocations",
                "fallback_invocations", "picard_iterations_total", "contacts_total"):
        ratios[key] = _ratio(agg_a[key], agg_b[key])
    state_a = a.get("final_state", {}).get("particles", [])
    state_b = b.get("final_state", {}).get("particles", [])
    max_dev = None
    if len(state_a) == len(state_b) and state_a:
        max_dev = 0.0
        for pa, pb in zip(state_a, state_b):
            for key in ("translation", "velocity", "omega", "rotation"):
                dev = float(np.max(np.abs(np.asarray(pa[key]) - np.asarray(pb[key]))))
                max_dev = max(max_dev, dev)
    return {
        "scene_kind": kind_a,
        "counter_ratios": ratios,
        "max_state_deviation": max_dev,
        "mode_a": a["config"]["step"]["mode"],
        "mode_b": b["config"]["step"]["mode"],
    }
