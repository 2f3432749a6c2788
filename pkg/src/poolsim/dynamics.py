"""Discrete-time state dynamics of the multi-modal network.

One step advances private-vehicle accumulation, the four ride-hailing fleet
states (empty / solo / pool-in-V / pool-in-B), the request queue, and the mean
bus occupancy, in a fixed order: subnetwork speeds, disutilities, mode shares,
matching (with feasibility clamps), abandonment, then the seven state updates.
The update preserves the ride-hailing fleet size exactly because the mode
shares sum to one.

A flat tuple-based step (`_step_raw`) carries the hot loops (simulation and
MPC rollouts); the dataclass wrappers around it form the public API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol

from .choice import (
    ChoiceParams,
    ControlFares,
    MatchingParams,
    ModeShares,
    ShareMode,
)
from .mfd import MfdParams, calibrate_bus_fleet

__all__ = [
    "SystemState",
    "ModelParams",
    "DemandSample",
    "StepRates",
    "StepRecord",
    "Trajectory",
    "SimulationError",
    "GridlockError",
    "ConvergenceError",
    "default_params",
    "empty_state",
    "completion_rates",
    "step",
    "simulate",
    "steady_state",
    "residuals",
    "CLAMP_NAMES",
]

DEFAULT_EMPTY_BUS_SPEED = 19.0  # km/hr, used to calibrate the default bus fleet


class SimulationError(RuntimeError):
    """A step produced or received an invalid state."""


class GridlockError(SimulationError):
    """A subnetwork speed collapsed to zero."""


class ConvergenceError(RuntimeError):
    """The fixed-point iteration ran out of iterations."""


@dataclass(frozen=True)
class SystemState:
    """Full state of one time step.

    Vehicle counts in veh, queue in requests, ``o_b`` in passengers per bus.
    ``match_avg`` is the running mean of past matching rates feeding the
    abandonment rule, and ``step_index`` the number of steps taken so far.
    """

    n_pv: float = 0.0
    n_e: float = 0.0
    n_s: float = 0.0
    n_p_v: float = 0.0
    n_p_b: float = 0.0
    c: float = 0.0
    o_b: float = 0.0
    match_avg: float = 0.0
    step_index: int = 0

    def fleet_total(self) -> float:
        return self.n_e + self.n_s + self.n_p_v + self.n_p_b

    def vehicle_net_accumulation(self) -> float:
        return self.n_pv + self.n_e + self.n_s + self.n_p_v

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.n_pv, self.n_e, self.n_s, self.n_p_v,
            self.n_p_b, self.c, self.o_b, self.match_avg,
        )


_STATE_FIELDS = ("n_pv", "n_e", "n_s", "n_p_v", "n_p_b", "c", "o_b", "match_avg")


@dataclass(frozen=True)
class DemandSample:
    """Exogenous demand rates (pax/hr) for private vehicles, ride-hailing, buses."""

    q_pv: float = 0.0
    q_rs: float = 0.0
    q_b: float = 0.0

    def __post_init__(self) -> None:
        if self.q_pv < 0.0 or self.q_rs < 0.0 or self.q_b < 0.0:
            raise ValueError(f"demand rates must be >= 0, got {self}")


@dataclass(frozen=True)
class ModelParams:
    """All calibrated constants of the plant.

    ``fleet_size`` is the (constant) ride-hailing fleet, ``n_buses`` the
    constant bus fleet. Occupancies are passengers per vehicle with the driver
    excluded. ``tau`` is the step duration in hours.

    ``abandon_to_bus_as_count`` selects the unit-consistent variant of the
    bus-occupancy update in which abandoning requests board buses as a count
    (A / n_buses) instead of entering the rate bracket; the default follows
    the rate-bracket form.
    """

    mfd: MfdParams = field(default_factory=MfdParams)
    choice: ChoiceParams = field(default_factory=ChoiceParams)
    matching: MatchingParams = field(default_factory=MatchingParams)
    fleet_size: float = 3500.0
    n_buses: float = 526.0
    occ_pv: float = 1.2
    occ_solo: float = 1.0
    occ_pool: float = 1.5
    trip_len_pv: float = 3.86
    trip_len_bus: float = 1.4 * 3.86
    tau: float = 1.0 / 600.0
    abandon_to_bus_as_count: bool = False

    def __post_init__(self) -> None:
        if self.fleet_size <= 0.0:
            raise ValueError(f"fleet_size must be > 0, got {self.fleet_size}")
        if self.n_buses <= 0.0:
            raise ValueError(f"n_buses must be > 0, got {self.n_buses}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.occ_pv <= 0.0 or self.occ_solo <= 0.0:
            raise ValueError("occupancies must be > 0")
        if not (1.0 < self.occ_pool <= 2.0):
            raise ValueError(f"occ_pool must lie in (1, 2], got {self.occ_pool}")
        if self.trip_len_pv <= 0.0 or self.trip_len_bus <= 0.0:
            raise ValueError("trip lengths must be > 0")
        # Outflow stability: one step may not drain more than a category holds.
        shortest = min(
            self.trip_len_pv,
            self.trip_len_bus,
            self.choice.trip_len_solo,
            self.choice.trip_len_solo + self.choice.driver_detour,
        )
        if self.tau * self.mfd.c0_lin >= shortest:
            raise ValueError(
                "tau too large: free-flow travel per step exceeds the shortest trip"
            )


@lru_cache(maxsize=1)
def default_params() -> ModelParams:
    """Calibrated defaults; bus fleet sized so the empty-network bus speed is 19 km/hr."""
    mfd = MfdParams()
    n_b = calibrate_bus_fleet(DEFAULT_EMPTY_BUS_SPEED, mfd)
    return ModelParams(mfd=mfd, n_buses=n_b)


def empty_state(p: ModelParams) -> SystemState:
    """The all-idle state: the whole fleet empty, nothing in motion or queued."""
    return SystemState(n_e=p.fleet_size)


@dataclass(frozen=True)
class StepRates:
    """Derived rates of one step, for logging and metrics.

    Trip completion rates in trips/hr (``o_b_rate`` in pax/hr), the matching
    rate in matches/hr, abandonment as a request count, speeds in km/hr.
    """

    o_pv: float
    o_s: float
    o_p_v: float
    o_p_b: float
    o_b_rate: float
    m: float
    a: float
    v_v: float
    v_p: float
    v_b: float
    shares: ModeShares


@dataclass(frozen=True)
class StepRecord:
    """One executed step: the pre-step state and what was applied/derived."""

    step: int
    time_hr: float
    state: SystemState
    fares: ControlFares
    rates: StepRates


CLAMP_NAMES = (
    "match_supply",
    "match_queue",
    "abandon_guard",
    "gridlock_vehicle",
    "gridlock_bus",
    "mfd_domain",
)


@dataclass
class Trajectory:
    """Ordered record of a full run plus the terminal state and diagnostics."""

    records: list[StepRecord] = field(default_factory=list)
    final_state: SystemState = field(default_factory=SystemState)
    clamp_counts: dict[str, int] = field(
        default_factory=lambda: {name: 0 for name in CLAMP_NAMES}
    )
    replans: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def gridlocked(self) -> bool:
        return (
            self.clamp_counts["gridlock_vehicle"] > 0
            or self.clamp_counts["gridlock_bus"] > 0
        )


class DemandLike(Protocol):
    def at(self, t_hr: float) -> DemandSample: ...


class ControllerLike(Protocol):
    share_mode: ShareMode

    def fares(self, state: SystemState, k: int) -> ControlFares: ...


# --- flat hot path -----------------------------------------------------------

_MODE_IDS = {
    ShareMode.FREE: 0,
    ShareMode.NO_POOL: 1,
    ShareMode.POOL_V_ONLY: 2,
    ShareMode.POOL_B_ONLY: 3,
    ShareMode.ALL_POOL_B: 4,
}


@lru_cache(maxsize=64)
def _flatten(p: ModelParams) -> tuple:
    """Pre-resolve every constant the raw step touches into one flat tuple."""
    m, ch, mt = p.mfd, p.choice, p.matching
    return (
        m.alpha,
        1.0 - m.alpha,
        m.a0_cubic,
        m.b0_quad,
        m.c0_lin,
        m.n_max,
        math.exp(-m.bus_reduction_rate * p.n_buses),  # r(n_b), constant fleet
        m.dwell_time / m.stop_spacing,
        ch.value_of_time,
        ch.scale,
        ch.fare_solo,
        ch.fare_pool,
        ch.trip_len_solo,
        ch.trip_len_solo + ch.passenger_detour,
        ch.trip_len_solo + ch.driver_detour,
        mt.a0,
        mt.alpha_e,
        mt.alpha_c,
        mt.w_max,
        p.n_buses,
        p.occ_pv,
        p.occ_pool,
        p.trip_len_pv,
        p.trip_len_bus,
        p.tau,
        1.0 if p.abandon_to_bus_as_count else 0.0,
    )


def _step_raw(
    st: tuple,
    k: int,
    q_pv: float,
    q_rs: float,
    q_b: float,
    phi_v: float,
    phi_b: float,
    fp: tuple,
    abandon: bool,
    mode: int,
) -> tuple[tuple, tuple, int]:
    """One transition on flat tuples. Returns (next_state, rates, clamp bits).

    Clamp bits: 1 match supply cap, 2 match queue cap, 4 abandonment guard,
    8 vehicle-net gridlock, 16 bus-net gridlock, 32 MFD domain exceeded.
    """
    (n_pv, n_e, n_s, n_p_v, n_p_b, c, o_b, match_avg) = st
    (
        alpha, bar_alpha, a0c, b0q, c0l, n_max, r_nb, dos, kappa, mu,
        f_s, f_p, l_s, l_pax, l_drv, a0m, al_e, al_c, w_max, n_b,
        occ_pv, occ_p, l_pv, l_b, tau, ab_count,
    ) = fp
    clamps = 0

    # Subnetwork speeds from the shared quadratic speed law.
    n_veh_net = n_pv + n_e + n_s + n_p_v
    x = n_veh_net / alpha
    y = (n_p_b + n_b) / bar_alpha
    if x > n_max or y > n_max:
        clamps |= 32
    v_v = (a0c * x + b0q) * x + c0l
    if v_v <= 0.0:
        v_v = 0.0
        clamps |= 8
    v_bus_net = (a0c * y + b0q) * y + c0l
    if v_bus_net <= 0.0:
        v_bus_net = 0.0
    v_p = v_bus_net * r_nb
    if v_p <= 0.0:
        clamps |= 16
    v_b = v_p / (1.0 + v_p * dos)

    # Disutilities of the three ride-hailing alternatives, control fares folded in.
    if v_v > 0.0:
        u_s = f_s + kappa * l_s / v_v
        u_pv = f_p + kappa * l_pax / v_v
    else:
        u_s = math.inf
        u_pv = math.inf
    u_pb = (f_p + kappa * l_pax / v_p) if v_p > 0.0 else math.inf

    # Mode shares (stable logit; pinned components bypass it).
    if mode == 1:  # no pooling anywhere
        beta_s, beta_v, beta_b = 1.0, 0.0, 0.0
    elif mode == 4:  # everyone pools in the bus network
        beta_s, beta_v, beta_b = 0.0, 0.0, 1.0
    else:
        w_s = -mu * u_s
        w_v = -mu * (u_pv + phi_v) if mode in (0, 2) else -math.inf
        w_b = -mu * (u_pb + phi_b) if mode in (0, 3) else -math.inf
        top = w_s if w_s >= w_v else w_v
        if w_b > top:
            top = w_b
        if top == -math.inf:
            raise GridlockError(
                f"no viable ride-hailing alternative at step {k}: "
                "both subnetworks are gridlocked"
            )
        e_s = math.exp(w_s - top)
        e_v = math.exp(w_v - top)
        e_b = math.exp(w_b - top)
        denom = e_s + e_v + e_b
        beta_v = e_v / denom
        beta_b = e_b / denom
        beta_s = 1.0 - beta_v - beta_b

    # Cobb-Douglas matching, capped so the step cannot overdraw vehicles or queue.
    pooled = beta_v + beta_b
    if n_e > 0.0 and c > 0.0:
        c_eff = (beta_s + 0.5 * pooled) * c
        m_rate = a0m * n_e**al_e * c_eff**al_c if c_eff > 0.0 else 0.0
    else:
        m_rate = 0.0
    supply_cap = n_e / tau
    if m_rate > supply_cap:
        m_rate = supply_cap
        clamps |= 1
    queue_cap = c / ((1.0 + pooled) * tau)
    if m_rate > queue_cap:
        m_rate = queue_cap
        clamps |= 2

    # Running mean of matching rates (first step excluded) and abandonment.
    if k == 0:
        new_avg = 0.0
    else:
        new_avg = (match_avg * (k - 1) + m_rate) / k
    a_req = 0.0
    if abandon and k > 0 and w_max != math.inf:
        a_req = c - new_avg * w_max
        if a_req < 0.0:
            a_req = 0.0

    # Completion rates; per-vehicle ratios collapse to speed / trip length.
    o_pv_rate = n_pv * v_v / l_pv
    o_s_rate = n_s * v_v / l_s
    o_p_v_rate = n_p_v * v_v / l_drv
    o_p_b_rate = n_p_b * v_p / l_drv
    o_b_rate = (n_b * v_b / l_b) * o_b

    # State updates; the queue first, so abandonment can be capped exactly.
    c_pre = c + tau * (q_rs - (1.0 + pooled) * m_rate)
    if a_req > c_pre:
        a_req = c_pre
        clamps |= 4
    new_c = c_pre - a_req

    new_n_pv = n_pv + tau * (q_pv / occ_pv - o_pv_rate)
    new_n_e = n_e + tau * (o_s_rate + o_p_v_rate + o_p_b_rate - m_rate)
    new_n_s = n_s + tau * (beta_s * m_rate - o_s_rate)
    new_n_p_v = n_p_v + tau * (beta_v * m_rate - o_p_v_rate)
    new_n_p_b = n_p_b + tau * (beta_b * m_rate - o_p_b_rate)
    if ab_count:
        new_o_b = o_b + tau / n_b * (q_b - o_b_rate) + a_req / n_b
    else:
        new_o_b = o_b + tau / n_b * (q_b + a_req - o_b_rate)

    new_state = (
        new_n_pv, new_n_e, new_n_s, new_n_p_v, new_n_p_b, new_c, new_o_b, new_avg,
    )
    rates = (
        o_pv_rate, o_s_rate, o_p_v_rate, o_p_b_rate, o_b_rate,
        m_rate, a_req, v_v, v_p, v_b, beta_s, beta_v, beta_b,
    )
    return new_state, rates, clamps


def _check_finite(st: tuple, k: int) -> None:
    for name, value in zip(_STATE_FIELDS, st):
        if not math.isfinite(value):
            raise SimulationError(
                f"non-finite state at step {k}: field '{name}' is {value!r}"
            )


def _wrap_rates(rates: tuple) -> StepRates:
    return StepRates(
        o_pv=rates[0],
        o_s=rates[1],
        o_p_v=rates[2],
        o_p_b=rates[3],
        o_b_rate=rates[4],
        m=rates[5],
        a=rates[6],
        v_v=rates[7],
        v_p=rates[8],
        v_b=rates[9],
        shares=ModeShares(beta_s=rates[10], beta_v=rates[11], beta_b=rates[12]),
    )


def _wrap_state(st: tuple, k: int) -> SystemState:
    return SystemState(
        n_pv=st[0], n_e=st[1], n_s=st[2], n_p_v=st[3],
        n_p_b=st[4], c=st[5], o_b=st[6], match_avg=st[7], step_index=k,
    )


def _count_clamps(counts: dict[str, int], bits: int) -> None:
    if bits:
        for i, name in enumerate(CLAMP_NAMES):
            if bits & (1 << i):
                counts[name] += 1


# --- public operations --------------------------------------------------------


def completion_rates(s: SystemState, p: ModelParams) -> StepRates:
    """Speeds, shares (at zero control fares) and outflow rates of a state."""
    fp = _flatten(p)
    _, rates, _ = _step_raw(
        s.as_tuple(), s.step_index, 0.0, 0.0, 0.0, 0.0, 0.0, fp, False, 0
    )
    return _wrap_rates(rates)


def step(
    s: SystemState,
    d: DemandSample,
    f: ControlFares,
    p: ModelParams,
    abandonment_enabled: bool = False,
    share_mode: ShareMode = ShareMode.FREE,
) -> tuple[SystemState, StepRates]:
    """Advance the plant one step of length ``p.tau``.

    Raises SimulationError on a non-finite input state and GridlockError when
    no ride-hailing alternative remains viable.
    """
    st = s.as_tuple()
    _check_finite(st, s.step_index)
    new_st, rates, _ = _step_raw(
        st,
        s.step_index,
        d.q_pv,
        d.q_rs,
        d.q_b,
        f.phi_v,
        f.phi_b,
        _flatten(p),
        abandonment_enabled,
        _MODE_IDS[share_mode],
    )
    return _wrap_state(new_st, s.step_index + 1), _wrap_rates(rates)


class _ZeroFares:
    """Fallback controller: free logit, no control fares."""

    share_mode = ShareMode.FREE
    _fares = ControlFares(0.0, 0.0)

    def fares(self, state: SystemState, k: int) -> ControlFares:
        return self._fares


def simulate(
    s0: SystemState,
    demand: DemandLike,
    controller: ControllerLike | None,
    p: ModelParams,
    horizon: int,
    abandonment_enabled: bool = False,
) -> Trajectory:
    """Run ``horizon`` steps, querying the controller for fares each step.

    Records the pre-step state, applied fares and derived rates for every
    step; the successor of the last step lands in ``final_state``.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if controller is None:
        controller = _ZeroFares()
    mode = _MODE_IDS[controller.share_mode]
    fp = _flatten(p)
    tau = p.tau
    traj = Trajectory()
    st = s0.as_tuple()
    k0 = s0.step_index
    _check_finite(st, k0)
    for i in range(horizon):
        k = k0 + i
        state = _wrap_state(st, k)
        t_hr = k * tau
        try:
            fares = controller.fares(state, k)
            d = demand.at(t_hr)
            st, rates, clamps = _step_raw(
                st, k, d.q_pv, d.q_rs, d.q_b,
                fares.phi_v, fares.phi_b, fp, abandonment_enabled, mode,
            )
        except SimulationError:
            raise
        except Exception as exc:
            raise SimulationError(f"step {k} failed: {exc}") from exc
        _check_finite(st, k + 1)
        _count_clamps(traj.clamp_counts, clamps)
        traj.records.append(
            StepRecord(step=k, time_hr=t_hr, state=state, fares=fares,
                       rates=_wrap_rates(rates))
        )
    traj.final_state = _wrap_state(st, k0 + horizon)
    return traj


def steady_state(
    d: DemandSample,
    f: ControlFares,
    p: ModelParams,
    tol: float = 1e-6,
    max_iters: int = 200_000,
    share_mode: ShareMode = ShareMode.FREE,
) -> SystemState:
    """Fixed point of the abandonment-free dynamics under constant demand.

    Iterates from the all-idle state until the max-norm state change of one
    step drops below ``tol``. Gridlock raises GridlockError (divergence);
    exceeding ``max_iters`` raises ConvergenceError.
    """
    if tol <= 0.0:
        raise ValueError(f"tol must be > 0, got {tol}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    fp = _flatten(p)
    mode = _MODE_IDS[share_mode]
    st = empty_state(p).as_tuple()
    delta = math.inf
    for it in range(max_iters):
        new_st, _, clamps = _step_raw(
            st, 1, d.q_pv, d.q_rs, d.q_b, f.phi_v, f.phi_b, fp, False, mode
        )
        if clamps & (8 | 16):
            raise GridlockError(
                f"gridlock while seeking steady state (iteration {it}): "
                "a subnetwork speed reached zero"
            )
        delta = max(
            abs(a - b) for a, b in zip(new_st[:7], st[:7])
        )
        st = new_st
        if delta < tol:
            return SystemState(
                n_pv=st[0], n_e=st[1], n_s=st[2], n_p_v=st[3],
                n_p_b=st[4], c=st[5], o_b=st[6], match_avg=0.0, step_index=0,
            )
    raise ConvergenceError(
        f"no steady state within {max_iters} iterations (last change {delta:.3e})"
    )


def residuals(s: SystemState, d: DemandSample, f: ControlFares, p: ModelParams,
              share_mode: ShareMode = ShareMode.FREE) -> dict[str, float]:
    """Net inflow-outflow rate of every category at a state (zero at equilibrium)."""
    nxt, _ = step(s, d, f, p, abandonment_enabled=False, share_mode=share_mode)
    tau = p.tau
    return {
        "n_pv": (nxt.n_pv - s.n_pv) / tau,
        "n_e": (nxt.n_e - s.n_e) / tau,
        "n_s": (nxt.n_s - s.n_s) / tau,
        "n_p_v": (nxt.n_p_v - s.n_p_v) / tau,
        "n_p_b": (nxt.n_p_b - s.n_p_b) / tau,
        "c": (nxt.c - s.c) / tau,
        "o_b": (nxt.o_b - s.o_b) / tau,
    }
