"""Per-step and aggregate performance accounting.

Passenger hours traveled (PHT) weight each accumulation with its occupancy;
waiting time (WT) counts queued ride-hailing requests. The bus-speed violation
integral audits how far the realized commercial bus speed fell below a target.
All quantities are additive over trajectory segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dynamics import ModelParams, StepRates, SystemState, Trajectory

__all__ = ["StepMetrics", "SummaryRecord", "step_metrics", "summarize"]


@dataclass(frozen=True)
class StepMetrics:
    """One step's contribution: PHT split by mode (pax*hr), WT, violation (km)."""

    pht_pv: float
    pht_rs: float
    pht_b: float
    wt: float
    violation: float

    @property
    def pht(self) -> float:
        return self.pht_pv + self.pht_rs + self.pht_b


@dataclass
class SummaryRecord:
    """Aggregate performance of a run.

    ``bus_violation`` is n_buses * integral of max(v_target - v_b, 0) dt in
    veh*km; ``abandonment_total`` counts abandoning requests.
    """

    pht_total: float = 0.0
    wt_total: float = 0.0
    pht_pv: float = 0.0
    pht_rs: float = 0.0
    pht_b: float = 0.0
    abandonment_total: float = 0.0
    bus_violation: float = 0.0
    clamp_counts: dict[str, int] = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return self.pht_total + self.wt_total


def step_metrics(
    s: SystemState,
    rates: StepRates,
    p: ModelParams,
    v_target: float | None = None,
) -> StepMetrics:
    """Metrics of one step given its pre-step state and derived rates."""
    tau = p.tau
    pht_pv = tau * s.n_pv * p.occ_pv
    pht_rs = tau * (s.n_s * p.occ_solo + (s.n_p_v + s.n_p_b) * p.occ_pool)
    pht_b = tau * p.n_buses * s.o_b
    wt = tau * s.c
    violation = 0.0
    if v_target is not None:
        deficit = v_target - rates.v_b
        if deficit > 0.0:
            violation = tau * deficit
    return StepMetrics(pht_pv=pht_pv, pht_rs=pht_rs, pht_b=pht_b, wt=wt,
                       violation=violation)


def summarize(
    traj: Trajectory,
    p: ModelParams,
    v_target: float | None = None,
) -> SummaryRecord:
    """Sum step metrics over a trajectory."""
    if not traj.records:
        raise ValueError("cannot summarize an empty trajectory")
    out = SummaryRecord(clamp_counts=dict(traj.clamp_counts))
    for rec in traj.records:
        m = step_metrics(rec.state, rec.rates, p, v_target)
        out.pht_pv += m.pht_pv
        out.pht_rs += m.pht_rs
        out.pht_b += m.pht_b
        out.wt_total += m.wt
        out.bus_violation += m.violation
        out.abandonment_total += rec.rates.a
    out.pht_total = out.pht_pv + out.pht_rs + out.pht_b
    out.bus_violation *= p.n_buses
    return out
