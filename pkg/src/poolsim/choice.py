"""Ride-hailing demand-side behavior.

Travelers requesting a ride choose between a solo trip, a pooled trip in the
vehicle subnetwork, or a pooled trip in the bus subnetwork, via a multinomial
logit over trip disutilities (fare + value-of-time * travel time). A regulator
shifts the pool fares with control fares (phi_V, phi_B); internally these act
through the multiplicative weights xi = exp(-mu * phi) on the logit
numerators. Waiting requests meet idle vehicles through a Cobb-Douglas
matching function, and requests that wait too long abandon the queue.

All functions are pure; the matching running average used by ``abandonment``
is state owned by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

__all__ = [
    "ChoiceParams",
    "MatchingParams",
    "ControlFares",
    "ModeShares",
    "ShareMode",
    "base_disutilities",
    "fare_to_xi",
    "xi_to_fare",
    "mode_shares",
    "pinned_mode_shares",
    "matching_rate",
    "clamp_matching_rate",
    "pool_split_of_matches",
    "abandonment",
]


@dataclass(frozen=True)
class ChoiceParams:
    """Logit and trip-cost constants.

    value_of_time in CHF/hr, scale in 1/CHF, fares in CHF, lengths in km.
    ``passenger_detour`` is the extra distance a pooled passenger rides;
    ``driver_detour`` the extra distance the driver covers for a pooled trip.
    """

    value_of_time: float = 30.0
    scale: float = 1.0
    fare_solo: float = 5.0
    fare_pool: float = 4.0
    trip_len_solo: float = 3.86
    passenger_detour: float = 0.15 * 3.86
    driver_detour: float = 0.7 * 3.86

    def __post_init__(self) -> None:
        if self.value_of_time <= 0.0:
            raise ValueError(f"value_of_time must be > 0, got {self.value_of_time}")
        if self.scale <= 0.0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if self.trip_len_solo <= 0.0:
            raise ValueError(f"trip_len_solo must be > 0, got {self.trip_len_solo}")
        if self.passenger_detour < 0.0 or self.driver_detour < 0.0:
            raise ValueError("detours must be >= 0")


@dataclass(frozen=True)
class MatchingParams:
    """Cobb-Douglas meeting function constants and abandonment tolerance.

    M = a0 * n_e^alpha_e * c_eff^alpha_c, with c_eff the solo-equivalent
    customer count. ``w_max`` (hr) is the waiting tolerance beyond which
    requests abandon; ``math.inf`` disables abandonment.
    """

    a0: float = 0.025
    alpha_e: float = 0.93
    alpha_c: float = 0.98
    w_max: float = math.inf

    def __post_init__(self) -> None:
        if self.a0 <= 0.0 or self.alpha_e <= 0.0 or self.alpha_c <= 0.0:
            raise ValueError("Cobb-Douglas constants must be > 0")
        if not self.w_max > 0.0:
            raise ValueError(f"w_max must be > 0, got {self.w_max}")


@dataclass(frozen=True)
class ControlFares:
    """Regulator surcharge (>0) or discount (<0) on the pool fare, per subnetwork."""

    phi_v: float = 0.0
    phi_b: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.phi_v) and math.isfinite(self.phi_b)):
            raise ValueError(f"control fares must be finite, got {self}")


@dataclass(frozen=True)
class ModeShares:
    """Fractions of ride-hailing requests choosing solo / pool-in-V / pool-in-B."""

    beta_s: float
    beta_v: float
    beta_b: float

    @property
    def pooled(self) -> float:
        return self.beta_v + self.beta_b


class ShareMode(Enum):
    """How mode shares are produced: the free logit, or with pinned components.

    Pinned-to-zero alternatives are removed from the choice set and the logit
    renormalizes over the remainder; ALL_POOL_B pins the bus-network pool share
    to one.
    """

    FREE = "free"
    NO_POOL = "no_pool"
    POOL_V_ONLY = "pool_V_only"
    POOL_B_ONLY = "pool_B_only"
    ALL_POOL_B = "all_pool_B"


def base_disutilities(
    v_v: float, v_p: float, cp: ChoiceParams
) -> tuple[float, float, float]:
    """Disutilities (u_s, u_pV, u_pB) in CHF, excluding control fares.

    Zero speed yields an infinite disutility; the logit then assigns that
    alternative zero share.
    """
    kappa = cp.value_of_time
    l_pool = cp.trip_len_solo + cp.passenger_detour
    u_s = cp.fare_solo + (kappa * cp.trip_len_solo / v_v if v_v > 0.0 else math.inf)
    u_pv = cp.fare_pool + (kappa * l_pool / v_v if v_v > 0.0 else math.inf)
    u_pb = cp.fare_pool + (kappa * l_pool / v_p if v_p > 0.0 else math.inf)
    return u_s, u_pv, u_pb


def fare_to_xi(phi: float, mu: float) -> float:
    """Logit weight xi = exp(-mu * phi) of a control fare."""
    return math.exp(-mu * phi)


def xi_to_fare(xi: float, mu: float) -> float:
    """Control fare phi = -ln(xi) / mu recovering a logit weight."""
    return -math.log(xi) / mu


def _stable_shares(weights: list[float]) -> list[float]:
    """Normalized exp-weights, computed with the max log-weight subtracted.

    ``weights`` holds log-numerators (-mu*u + ln xi); entries of -inf get
    share zero. Raises ValueError when every alternative is infeasible.
    """
    top = max(weights)
    if top == -math.inf:
        raise ValueError("no viable alternative: all disutilities are infinite")
    exps = [math.exp(w - top) for w in weights]
    total = sum(exps)
    return [e / total for e in exps]


def mode_shares(
    u_s: float,
    u_pv: float,
    u_pb: float,
    xi_v: float,
    xi_b: float,
    mu: float,
) -> ModeShares:
    """Multinomial-logit shares with control weights on the pool alternatives.

    beta_V and beta_B get numerators xi * exp(-mu*u); beta_s is the
    complement, so the three always sum to one exactly.
    """
    if xi_v <= 0.0 or xi_b <= 0.0:
        raise ValueError(f"xi weights must be > 0, got xi_v={xi_v}, xi_b={xi_b}")
    w_s = -mu * u_s
    w_v = -mu * u_pv + math.log(xi_v)
    w_b = -mu * u_pb + math.log(xi_b)
    _, s_v, s_b = _stable_shares([w_s, w_v, w_b])
    return ModeShares(beta_s=1.0 - s_v - s_b, beta_v=s_v, beta_b=s_b)


def pinned_mode_shares(
    mode: ShareMode,
    u_s: float,
    u_pv: float,
    u_pb: float,
    xi_v: float,
    xi_b: float,
    mu: float,
) -> ModeShares:
    """Mode shares under a share policy; FREE delegates to the full logit."""
    if mode is ShareMode.FREE:
        return mode_shares(u_s, u_pv, u_pb, xi_v, xi_b, mu)
    if mode is ShareMode.NO_POOL:
        return ModeShares(1.0, 0.0, 0.0)
    if mode is ShareMode.ALL_POOL_B:
        return ModeShares(0.0, 0.0, 1.0)
    if mode is ShareMode.POOL_V_ONLY:
        _, s_v = _stable_shares([-mu * u_s, -mu * u_pv + math.log(xi_v)])
        return ModeShares(1.0 - s_v, s_v, 0.0)
    if mode is ShareMode.POOL_B_ONLY:
        _, s_b = _stable_shares([-mu * u_s, -mu * u_pb + math.log(xi_b)])
        return ModeShares(1.0 - s_b, 0.0, s_b)
    raise ValueError(f"unknown share mode {mode!r}")


def matching_rate(n_e: float, c: float, shares: ModeShares, mp: MatchingParams) -> float:
    """Raw Cobb-Douglas vehicle-match rate (matches/hr), before feasibility clamps.

    Pooled requests count half: one match serves two of them.
    """
    if n_e <= 0.0 or c <= 0.0:
        return 0.0
    c_eff = (shares.beta_s + 0.5 * shares.pooled) * c
    if c_eff <= 0.0:
        return 0.0
    return mp.a0 * n_e**mp.alpha_e * c_eff**mp.alpha_c


def clamp_matching_rate(
    m_raw: float, n_e: float, c: float, shares: ModeShares, tau: float
) -> tuple[float, bool, bool]:
    """Clamp a match rate so one step never overdraws vehicles or requests.

    Matches consume n_e at rate M and the queue at rate (1 + pooled)*M, so M
    is capped at n_e/tau and c/((1 + pooled)*tau). Returns the clamped rate
    and which of the two caps fired (supply, queue).
    """
    supply_cap = n_e / tau
    queue_cap = c / ((1.0 + shares.pooled) * tau)
    m = m_raw
    supply_hit = m > supply_cap
    if supply_hit:
        m = supply_cap
    queue_hit = m > queue_cap
    if queue_hit:
        m = queue_cap
    return m, supply_hit, queue_hit


def pool_split_of_matches(
    m: float, shares: ModeShares
) -> tuple[float, float, float]:
    """Split a match rate into solo / pool-in-V / pool-in-B inflows."""
    return shares.beta_s * m, shares.beta_v * m, shares.beta_b * m


def abandonment(c: float, match_rate_running_avg: float, w_max: float) -> float:
    """Requests abandoning the queue this step (a count, not a rate).

    The queue sheds whatever exceeds the backlog a customer tolerates,
    avg-match-rate * w_max. An infinite tolerance yields zero; the first-step
    no-history convention (abandonment 0) is the caller's responsibility.
    """
    if not math.isfinite(w_max):
        return 0.0
    return max(c - match_rate_running_avg * w_max, 0.0)
