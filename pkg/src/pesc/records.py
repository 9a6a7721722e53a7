"""Optimization records shared by the gradient and simplex optimizers."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .flux import FluxPulse, SampledControl, write_control_csv

TERMINATION_REASONS = ("tolerance", "iteration cap", "stagnation", "error")


@dataclass
class IterationRow:
    """One accepted iterate.

    ``j_t`` is the raw final-time functional, ``running_cost`` the penalty
    term of the total functional (Krotov step cost or spectral penalty),
    ``pe_clamped`` the value the stopping rule looks at.
    """

    iteration: int
    stage: str
    j_t: float
    running_cost: float
    pe_clamped: float
    eps_avg: tuple[float, float] = (float("nan"), float("nan"))
    lambda_a: float | None = None
    params: dict | None = None

    @property
    def j_total(self) -> float:
        return self.j_t + self.running_cost


@dataclass
class OptimizationRecord:
    rows: list[IterationRow] = field(default_factory=list)
    termination: str = "iteration cap"
    final_control: SampledControl | None = None
    final_pulse: FluxPulse | None = None
    metadata: dict = field(default_factory=dict)

    def append(self, row: IterationRow):
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError("iteration indices must increase")
        self.rows.append(row)

    @property
    def initial_value(self) -> float:
        return self.rows[0].pe_clamped

    @property
    def final_value(self) -> float:
        return self.rows[-1].pe_clamped

    @property
    def n_iterations(self) -> int:
        return self.rows[-1].iteration if self.rows else 0

    def stage_rows(self, stage: str) -> list[IterationRow]:
        return [r for r in self.rows if r.stage == stage]

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            d = asdict(r)
            d["eps_avg"] = list(r.eps_avg)
            d["j_total"] = r.j_total
            rows.append(d)
        return {
            "termination": self.termination,
            "initial_value": self.initial_value if self.rows else None,
            "final_value": self.final_value if self.rows else None,
            "rows": rows,
            "final_pulse": self.final_pulse.to_dict() if self.final_pulse else None,
            "metadata": self.metadata,
        }

    def write(self, json_path, csv_path=None):
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        if csv_path is not None and self.final_control is not None:
            write_control_csv(self.final_control, csv_path)
