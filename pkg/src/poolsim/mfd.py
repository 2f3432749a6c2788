"""Network-level speed and production functions.

The full network obeys a cubic production MFD, P(n) = A0*n^3 + B0*n^2 + C0*n,
i.e. a quadratic speed-accumulation law v(n) = A0*n^2 + B0*n + C0. The network
is split into a vehicle subnetwork (fraction ``alpha`` of the space) and a bus
subnetwork (fraction ``1 - alpha``); each inherits the full-network law through
a rescaling of the accumulation. Inside the bus subnetwork, buses slow the
remaining traffic by a multiplicative factor r(n_b) = exp(-rate * n_b), and the
commercial bus speed additionally accounts for dwell time at stops.

Units: accumulations in vehicles, speeds in km/hr, times in hours, distances
in km. All functions are pure and stateless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "MfdParams",
    "speed_full",
    "speed_vehicle_net",
    "speed_bus_net",
    "pool_speed",
    "bus_speed",
    "productions",
    "calibrate_bus_fleet",
]


@dataclass(frozen=True)
class MfdParams:
    """Coefficients of the speed MFD and of the bus subnetwork model.

    a0_cubic, b0_quad, c0_lin are the quadratic speed coefficients
    (v(n) = a0_cubic*n^2 + b0_quad*n + c0_lin); c0_lin is the free-flow speed.
    ``alpha`` is the fraction of network space assigned to the vehicle
    subnetwork. ``bus_reduction_rate`` is the exponent coefficient of the
    bus-induced speed reduction. ``dwell_time`` (hr) and ``stop_spacing`` (km)
    enter the commercial bus speed.
    """

    a0_cubic: float = 5.74e-9
    b0_quad: float = -1.02e-3
    c0_lin: float = 36.0
    n_max: float = 58536.0
    alpha: float = 0.8
    bus_reduction_rate: float = 6.5e-4
    dwell_time: float = 30.0 / 3600.0
    stop_spacing: float = 0.8

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.c0_lin <= 0.0:
            raise ValueError(f"c0_lin (free-flow speed) must be > 0, got {self.c0_lin}")
        if self.dwell_time < 0.0:
            raise ValueError(f"dwell_time must be >= 0, got {self.dwell_time}")
        if self.stop_spacing <= 0.0:
            raise ValueError(f"stop_spacing must be > 0, got {self.stop_spacing}")
        if self.n_max <= 0.0:
            raise ValueError(f"n_max must be > 0, got {self.n_max}")
        if self.bus_reduction_rate < 0.0:
            raise ValueError(
                f"bus_reduction_rate must be >= 0, got {self.bus_reduction_rate}"
            )


def speed_full(n: float, p: MfdParams) -> float:
    """Full-network speed at accumulation ``n`` (veh), clamped at zero.

    The quadratic becomes negative deep in congestion; speeds are clamped at
    zero there so the dynamics stay well defined (gridlock).
    """
    v = (p.a0_cubic * n + p.b0_quad) * n + p.c0_lin
    return v if v > 0.0 else 0.0


def speed_vehicle_net(n_v: float, p: MfdParams) -> float:
    """Speed in the vehicle subnetwork holding ``n_v`` vehicles."""
    return speed_full(n_v / p.alpha, p)


def speed_bus_net(n_b_net: float, p: MfdParams) -> float:
    """Speed in the bus subnetwork holding ``n_b_net`` vehicles (buses + pools)."""
    return speed_full(n_b_net / (1.0 - p.alpha), p)


def pool_speed(n_p_b: float, n_b: float, p: MfdParams) -> float:
    """Running speed of pool vehicles sharing the bus subnetwork.

    ``n_p_b`` pool vehicles and ``n_b`` buses occupy the bus subnetwork; the
    buses degrade everyone's speed by exp(-bus_reduction_rate * n_b).
    """
    return speed_bus_net(n_p_b + n_b, p) * math.exp(-p.bus_reduction_rate * n_b)


def bus_speed(n_p_b: float, n_b: float, p: MfdParams) -> float:
    """Commercial bus speed: running speed deflated by dwell stops.

    v_b = v_p / (1 + v_p * dwell_time / stop_spacing), which is monotone
    increasing in the running speed and never exceeds it.
    """
    v_p = pool_speed(n_p_b, n_b, p)
    return v_p / (1.0 + v_p * (p.dwell_time / p.stop_spacing))


def productions(
    n_v: float, n_p_b: float, n_b: float, p: MfdParams
) -> tuple[float, float, float]:
    """Per-subnetwork productions (veh*km/hr).

    Returns (P_V, P_p, P_b): vehicle-subnetwork production at accumulation
    ``n_v``, pool-vehicle production in the bus subnetwork, and bus production.
    """
    p_v = n_v * speed_vehicle_net(n_v, p)
    p_p = n_p_b * pool_speed(n_p_b, n_b, p)
    p_b = n_b * bus_speed(n_p_b, n_b, p)
    return p_v, p_p, p_b


def calibrate_bus_fleet(
    target_speed: float,
    p: MfdParams,
    lo: float = 0.0,
    hi: float = 20000.0,
    tol: float = 1e-6,
) -> float:
    """Bus fleet size n_b at which the empty-network bus speed hits ``target_speed``.

    bus_speed(0, n_b) is strictly decreasing in n_b, so a simple bisection on
    [lo, hi] suffices. Raises ValueError when the target is not bracketed.
    """
    f_lo = bus_speed(0.0, lo, p) - target_speed
    f_hi = bus_speed(0.0, hi, p) - target_speed
    if f_lo < 0.0 or f_hi > 0.0:
        raise ValueError(
            f"target speed {target_speed} km/hr not bracketed on [{lo}, {hi}]"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if bus_speed(0.0, mid, p) > target_speed:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
