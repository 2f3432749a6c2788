"""Fare-setting strategies.

Four families: fixed policies (no control, or pinned mode shares for the
bounding scenarios), a PI controller tracking a target commercial bus speed
through the pool fare in the bus network, a finite-horizon MPC minimizing
passenger hours traveled plus waiting time over piecewise-constant fare
schedules, and a receding-horizon loop that replans the MPC from the realized
plant state. A set-point sweep scores PI targets over constant-demand grids.

The MPC searches in fare space within the bounds implied by the multiplier
box [xi_min, xi_max], with a bounded derivative-free local search
(multi-start Nelder-Mead, zero fares always among the starts, seeded
restarts, fixed evaluation budget).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .choice import ControlFares, ShareMode
from .dynamics import (
    ConvergenceError,
    DemandLike,
    DemandSample,
    GridlockError,
    ModelParams,
    SystemState,
    Trajectory,
    _flatten,
    _step_raw,
    simulate,
    steady_state,
)
from .mfd import bus_speed
from .metrics import step_metrics, summarize

__all__ = [
    "PiConfig",
    "PiController",
    "FixedPolicyController",
    "forced_share_controller",
    "MpcConfig",
    "FareSchedule",
    "ScheduleController",
    "mpc_objective",
    "mpc_plan",
    "receding_horizon_run",
    "SweepRow",
    "setpoint_sweep",
    "best_setpoints",
]


# --- PI ------------------------------------------------------------------------


@dataclass(frozen=True)
class PiConfig:
    """Gains and set point of the bus-speed tracking controller.

    The integral term averages the error over the last ``window`` steps.
    Output fares are clipped to [phi_min, phi_max], the same box the MPC
    searches, so both controllers price within comparable ranges.
    """

    k_p: float = 5.0
    k_i: float = 11.0
    window: int = 100
    v_target: float = 17.0
    phi_min: float = -3.0
    phi_max: float = 3.0

    def __post_init__(self) -> None:
        if self.k_p <= 0.0:
            raise ValueError(f"k_p must be > 0, got {self.k_p}")
        if self.k_i < 0.0:
            raise ValueError(f"k_i must be >= 0, got {self.k_i}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.v_target <= 0.0:
            raise ValueError(f"v_target must be > 0, got {self.v_target}")
        if self.phi_min > self.phi_max:
            raise ValueError("phi_min must not exceed phi_max")


class PiController:
    """Tracks the target bus speed with phi_B; phi_V stays zero.

    phi_B(k) = k_p * eps(k) + (k_i / window) * sum of the stored past errors,
    where eps = v_target - v_b. The error history is private state; do not
    share one instance across concurrent runs.
    """

    share_mode = ShareMode.FREE

    def __init__(self, cfg: PiConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params
        self.history: deque[float] = deque(maxlen=cfg.window + 1)

    def fares(self, state: SystemState, k: int) -> ControlFares:
        cfg = self.cfg
        v_b = bus_speed(state.n_p_b, self.params.n_buses, self.params.mfd)
        eps = cfg.v_target - v_b
        phi_b = cfg.k_p * eps + (cfg.k_i / cfg.window) * sum(self.history)
        self.history.append(eps)
        phi_b = min(max(phi_b, cfg.phi_min), cfg.phi_max)
        return ControlFares(0.0, phi_b)


# --- fixed policies --------------------------------------------------------------


class FixedPolicyController:
    """Constant fares with an optional pinned share mode."""

    def __init__(self, share_mode: ShareMode = ShareMode.FREE,
                 fares: ControlFares = ControlFares(0.0, 0.0)):
        self.share_mode = share_mode
        self._fares = fares

    def fares(self, state: SystemState, k: int) -> ControlFares:
        return self._fares


def forced_share_controller(mode: ShareMode | str) -> FixedPolicyController:
    """Controller for the bounding scenarios (no_pool, pool_V_only, ...).

    Pinned share components bypass the logit; ``free`` is the plain
    zero-fare logit.
    """
    if isinstance(mode, str):
        mode = ShareMode(mode)
    return FixedPolicyController(share_mode=mode)


# --- MPC -------------------------------------------------------------------------


@dataclass(frozen=True)
class MpcConfig:
    """Shape and budget of the fare-schedule optimization.

    ``horizon`` is the planning window in steps, ``control_block`` the number
    of steps a fare stays constant, ``prediction_window``/``replan_period``
    drive the receding-horizon loop. ``control_dims`` is 1 (phi_B only) or 2
    (phi_V and phi_B). The multiplier box [xi_min, xi_max] maps to fare
    bounds; ``min_bus_speed`` adds a soft penalty of ``penalty_weight`` per
    km of bus-speed deficit integral.
    """

    horizon: int = 650
    control_block: int = 180
    xi_min: float = math.exp(-3.0)
    xi_max: float = math.exp(3.0)
    min_bus_speed: float | None = None
    control_dims: int = 1
    prediction_window: int = 650
    replan_period: int = 200
    budget: int = 2000
    n_starts: int = 3
    penalty_weight: float = 1.0e5
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.xi_min <= self.xi_max):
            raise ValueError(
                f"need 0 < xi_min <= xi_max, got [{self.xi_min}, {self.xi_max}]"
            )
        if not (1 <= self.control_block <= self.horizon):
            raise ValueError(
                f"need 1 <= control_block <= horizon, got "
                f"{self.control_block} vs {self.horizon}"
            )
        if self.control_dims not in (1, 2):
            raise ValueError(f"control_dims must be 1 or 2, got {self.control_dims}")
        if self.replan_period < 1 or self.replan_period > self.prediction_window:
            raise ValueError(
                f"need 1 <= replan_period <= prediction_window, got "
                f"{self.replan_period} vs {self.prediction_window}"
            )
        if self.budget < 1 or self.n_starts < 1:
            raise ValueError("budget and n_starts must be >= 1")
        if self.min_bus_speed is not None and self.min_bus_speed <= 0.0:
            raise ValueError(f"min_bus_speed must be > 0, got {self.min_bus_speed}")

    def fare_bounds(self, mu: float) -> tuple[float, float]:
        """Fare box [phi_lo, phi_hi] equivalent to the multiplier box."""
        return -math.log(self.xi_max) / mu, -math.log(self.xi_min) / mu


@dataclass(frozen=True)
class FareSchedule:
    """Piecewise-constant fares over a planning window.

    ``blocks`` holds (start_step, fares) pairs, contiguous from step 0;
    ``objective`` is the planned internal-model cost, and the remaining
    fields report how the search ended.
    """

    blocks: tuple[tuple[int, ControlFares], ...]
    horizon: int
    objective: float = math.nan
    evals_used: int = 0
    budget_exhausted: bool = False
    start_step: int = 0

    def __post_init__(self) -> None:
        if not self.blocks:
            raise ValueError("a schedule needs at least one block")
        if self.blocks[0][0] != 0:
            raise ValueError("first block must start at step 0")
        starts = [b[0] for b in self.blocks]
        if any(b <= a for a, b in zip(starts, starts[1:])) or starts[-1] >= self.horizon:
            raise ValueError("block starts must increase and stay inside the horizon")

    def fares_at(self, i: int) -> ControlFares:
        """Fares applied at plan-local step ``i``."""
        if not 0 <= i < self.horizon:
            raise IndexError(f"step {i} outside plan horizon [0, {self.horizon})")
        for start, fares in reversed(self.blocks):
            if i >= start:
                return fares
        raise AssertionError("unreachable: first block starts at 0")


class ScheduleController:
    """Plays back a fare schedule starting at an absolute plant step."""

    share_mode = ShareMode.FREE

    def __init__(self, schedule: FareSchedule, start_step: int | None = None):
        self.schedule = schedule
        self.start_step = (
            schedule.start_step if start_step is None else start_step
        )

    def fares(self, state: SystemState, k: int) -> ControlFares:
        return self.schedule.fares_at(k - self.start_step)


def mpc_objective(traj: Trajectory, p: ModelParams, cfg: MpcConfig) -> float:
    """Total PHT + WT of a trajectory, plus the soft bus-speed penalty.

    The penalty term uses the trajectory's realized bus speeds and only
    appears when the config sets a minimum bus speed.
    """
    total = 0.0
    penalty = 0.0
    for rec in traj.records:
        m = step_metrics(rec.state, rec.rates, p, cfg.min_bus_speed)
        total += m.pht + m.wt
        penalty += m.violation
    return total + cfg.penalty_weight * penalty


def _presample(demand: DemandLike, k0: int, horizon: int, tau: float):
    q_pv = [0.0] * horizon
    q_rs = [0.0] * horizon
    q_b = [0.0] * horizon
    for i in range(horizon):
        d = demand.at((k0 + i) * tau)
        q_pv[i] = d.q_pv
        q_rs[i] = d.q_rs
        q_b[i] = d.q_b
    return q_pv, q_rs, q_b


def _rollout_cost(
    st: tuple,
    k0: int,
    horizon: int,
    xs: Sequence[float],
    dims: int,
    block: int,
    fp: tuple,
    p: ModelParams,
    qs: tuple[list, list, list],
    vmin: float | None,
    pen_w: float,
) -> float:
    """Internal-model cost of one candidate: abandonment-free rollout."""
    occ_pv, occ_s, occ_p, n_b, tau = (
        p.occ_pv, p.occ_solo, p.occ_pool, p.n_buses, p.tau,
    )
    q_pv, q_rs, q_b = qs
    total = 0.0
    penalty = 0.0
    for i in range(horizon):
        b = i // block
        if dims == 1:
            phi_v, phi_b = 0.0, xs[b]
        else:
            phi_v, phi_b = xs[2 * b], xs[2 * b + 1]
        n_pv, n_e, n_s, n_p_v, n_p_b, c, o_b, _ = st
        total += (
            n_pv * occ_pv + n_s * occ_s + (n_p_v + n_p_b) * occ_p
            + n_b * o_b + c
        )
        st, rates, _ = _step_raw(
            st, k0 + i, q_pv[i], q_rs[i], q_b[i], phi_v, phi_b, fp, False, 0
        )
        if vmin is not None:
            deficit = vmin - rates[9]
            if deficit > 0.0:
                penalty += deficit
    return tau * total + pen_w * tau * penalty


def _search(fun, starts: list[np.ndarray], bounds, budget: int):
    """Multi-start bounded Nelder-Mead under a shared evaluation budget."""
    best_x: np.ndarray | None = None
    best_f = math.inf
    count = 0

    def wrapped(x: np.ndarray) -> float:
        nonlocal best_x, best_f, count
        count += 1
        try:
            f = fun(x)
        except GridlockError:
            f = math.inf
        if f < best_f:
            best_f = f
            best_x = np.array(x, dtype=float)
        return f

    n = len(starts[0])
    for i, x0 in enumerate(starts):
        remaining = budget - count
        if remaining < n + 2:
            break
        maxfev = remaining // (len(starts) - i)
        minimize(
            wrapped,
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={"maxfev": maxfev, "xatol": 1e-3, "fatol": 1e-2},
        )
    if best_x is None:
        # Budget too small for any search, or every candidate gridlocked;
        # fall back to the first start (zero fares in every caller).
        wrapped(starts[0])
        if best_x is None:
            best_x = np.array(starts[0], dtype=float)
    return best_x, best_f, count, count >= budget


def mpc_plan(
    s: SystemState,
    demand_forecast: DemandLike,
    p: ModelParams,
    cfg: MpcConfig,
    horizon: int | None = None,
    rng: np.random.Generator | None = None,
) -> FareSchedule:
    """Best piecewise-constant fare schedule found within the budget.

    The internal model rolls the plant forward without abandonment from
    ``s``; zero fares are always among the candidates, so the returned plan
    never scores worse than no control. In two-variable mode, the solution
    of the one-variable subproblem is seeded as an extra start.
    """
    horizon = cfg.horizon if horizon is None else horizon
    if horizon < 1:
        raise ValueError(f"plan horizon must be >= 1, got {horizon}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    mu = p.choice.scale
    lo, hi = cfg.fare_bounds(mu)
    block = cfg.control_block
    n_blocks = -(-horizon // block)
    dims = cfg.control_dims
    fp = _flatten(p)
    k0 = s.step_index
    qs = _presample(demand_forecast, k0, horizon, p.tau)
    st0 = s.as_tuple()

    def cost(x: np.ndarray) -> float:
        return _rollout_cost(
            st0, k0, horizon, [float(v) for v in x], dims, block, fp, p, qs,
            cfg.min_bus_speed, cfg.penalty_weight,
        )

    budget = cfg.budget
    seed_evals = 0
    starts = [np.zeros(n_blocks * dims)]
    if dims == 2:
        # Solve the phi_B-only subproblem on a budget slice and lift it.
        sub_budget = max(budget // 3, n_blocks + 2)

        def cost_1var(x: np.ndarray) -> float:
            return _rollout_cost(
                st0, k0, horizon, [float(v) for v in x], 1, block, fp, p, qs,
                cfg.min_bus_speed, cfg.penalty_weight,
            )

        sub_starts = [np.zeros(n_blocks)] + [
            rng.uniform(lo, hi, n_blocks) for _ in range(cfg.n_starts - 1)
        ]
        sub_x, _, seed_evals, _ = _search(
            cost_1var, sub_starts, [(lo, hi)] * n_blocks, sub_budget
        )
        lifted = np.zeros(n_blocks * 2)
        lifted[1::2] = sub_x
        starts.append(lifted)
        budget = max(budget - seed_evals, n_blocks * 2 + 2)
    starts += [rng.uniform(lo, hi, n_blocks * dims)
               for _ in range(max(cfg.n_starts - len(starts), 0))]

    best_x, best_f, evals, exhausted = _search(
        cost, starts, [(lo, hi)] * (n_blocks * dims), budget
    )
    xs = [min(max(float(v), lo), hi) for v in best_x]
    blocks = []
    for b in range(n_blocks):
        if dims == 1:
            fares = ControlFares(0.0, xs[b])
        else:
            fares = ControlFares(xs[2 * b], xs[2 * b + 1])
        blocks.append((b * block, fares))
    return FareSchedule(
        blocks=tuple(blocks),
        horizon=horizon,
        objective=best_f,
        evals_used=evals + seed_evals,
        budget_exhausted=exhausted,
        start_step=k0,
    )


def receding_horizon_run(
    s0: SystemState,
    demand: DemandLike,
    p: ModelParams,
    cfg: MpcConfig,
    run_len: int,
    abandonment_enabled: bool = False,
) -> Trajectory:
    """Plan / apply / reinitialize loop over a full run.

    Every ``replan_period`` steps a fresh plan is computed over (at most)
    ``prediction_window`` steps from the realized plant state; the plant runs
    with abandonment when enabled while the internal model never does. The
    trajectory records applied fares per step and one replan entry per plan.
    """
    if run_len < 1:
        raise ValueError(f"run_len must be >= 1, got {run_len}")
    traj = Trajectory()
    state = s0
    done = 0
    replan_idx = 0
    while done < run_len:
        horizon = min(cfg.prediction_window, run_len - done)
        rng = np.random.default_rng((cfg.seed, replan_idx))
        plan = mpc_plan(state, demand, p, cfg, horizon=horizon, rng=rng)
        traj.replans.append({
            "step": state.step_index,
            "objective": plan.objective,
            "evals": plan.evals_used,
            "budget_exhausted": plan.budget_exhausted,
            "fares": [(b, (f.phi_v, f.phi_b)) for b, f in plan.blocks],
        })
        apply = min(cfg.replan_period, run_len - done)
        seg = simulate(
            state, demand, ScheduleController(plan), p, apply,
            abandonment_enabled=abandonment_enabled,
        )
        traj.records.extend(seg.records)
        for name, count in seg.clamp_counts.items():
            traj.clamp_counts[name] += count
        state = seg.final_state
        done += apply
        replan_idx += 1
    traj.final_state = state
    return traj


# --- set-point sweep -------------------------------------------------------------


class _ConstantDemand:
    def __init__(self, d: DemandSample):
        self._d = d

    def at(self, t_hr: float) -> DemandSample:
        return self._d


@dataclass(frozen=True)
class SweepRow:
    """One PI run of the sweep grid; ``best`` marks the argmin per demand pair."""

    q_pv: float
    q_b: float
    v_target: float
    pht: float
    wt: float
    gridlocked: bool
    best: bool


def setpoint_sweep(
    q_pv_grid: Sequence[float],
    q_b_grid: Sequence[float],
    v_target_grid: Sequence[float],
    p: ModelParams,
    pi: PiConfig,
    q_rs: float = 10_000.0,
    horizon: int = 3600,
) -> list[SweepRow]:
    """Score every (demand pair, set point) cell with a PI-controlled run.

    Each cell starts from the zero-fare steady state of its constant demand
    and runs ``horizon`` steps. Within a demand pair the set point with the
    lowest PHT + WT wins, ties broken toward the larger target; gridlocked
    cells are flagged and excluded.
    """
    if not q_pv_grid or not q_b_grid or not v_target_grid:
        raise ValueError("sweep grids must be non-empty")
    rows: list[SweepRow] = []
    for q_pv in q_pv_grid:
        for q_b in q_b_grid:
            d = DemandSample(q_pv=q_pv, q_rs=q_rs, q_b=q_b)
            cell: list[SweepRow] = []
            for v_t in v_target_grid:
                cfg = replace(pi, v_target=v_t)
                try:
                    start = steady_state(d, ControlFares(0.0, 0.0), p)
                    traj = simulate(
                        start, _ConstantDemand(d), PiController(cfg, p), p, horizon
                    )
                    gridlocked = traj.gridlocked
                    summary = summarize(traj, p, v_target=v_t)
                    pht, wt = summary.pht_total, summary.wt_total
                except (GridlockError, ConvergenceError):
                    gridlocked, pht, wt = True, math.inf, math.inf
                cell.append(SweepRow(q_pv, q_b, v_t, pht, wt, gridlocked, False))
            best_i = None
            best_obj = math.inf
            for i, row in enumerate(cell):
                if not row.gridlocked and row.pht + row.wt <= best_obj:
                    best_obj = row.pht + row.wt
                    best_i = i
            if best_i is not None:
                cell[best_i] = replace(cell[best_i], best=True)
            rows.extend(cell)
    return rows


def best_setpoints(rows: Sequence[SweepRow]) -> list[SweepRow]:
    """The argmin rows of a sweep, one per (q_pv, q_b) pair."""
    return [r for r in rows if r.best]
