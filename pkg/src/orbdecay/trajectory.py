"""Decay-trajectory representation: altitude, curve fit, and grid sampling.

Each object's pruned history is reduced to a fixed 25-point trajectory: the
average altitude is fitted as a sum of fractional powers of the time to
re-entry, and the fitted curve is inverted on a uniform altitude grid from
200 km down to the 80 km re-entry reference altitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from orbdecay.errors import InputError, NumericalError

MU_EARTH_KM3_S2 = 398600.4418
EARTH_RADIUS_KM = 6378.135
# SGP4 reference density used by the drag-coefficient conversion, expressed in
# kg/m^2 per Earth radius (one ER = 6375.135 km).
SGP4_REF_DENSITY = 2.461e-5

FIT_MAX_ALTITUDE_KM = 240.0
GRID_TOP_KM = 200.0
GRID_BOTTOM_KM = 80.0
GRID_POINTS = 25


class NonPositiveMeanMotion(InputError):
    """Mean motion must be strictly positive to define an orbit."""


class TooFewSamples(InputError):
    """Not enough usable samples below the fit altitude ceiling."""


class NonMonotoneFit(NumericalError):
    """Fitted altitude curve is not invertible over the grid range."""


def mean_altitude(record) -> float:
    """Average altitude in km from a record's mean motion.

    The semi-major axis follows from Kepler's third law,
    ``a = (mu / n^2)^(1/3)`` with ``n`` in rad/s, and the altitude is the
    axis minus the Earth radius.
    """
    return altitude_from_mean_motion(record.mean_motion)


def altitude_from_mean_motion(mean_motion: float) -> float:
    """Altitude in km for a mean motion in rev/day."""
    if mean_motion <= 0:
        raise NonPositiveMeanMotion(f"mean motion must be > 0, got {mean_motion}")
    n_rad = mean_motion * 2.0 * math.pi / 86400.0
    a = (MU_EARTH_KM3_S2 / (n_rad * n_rad)) ** (1.0 / 3.0)
    return a - EARTH_RADIUS_KM


def mean_motion_from_altitude(altitude_km: float) -> float:
    """Inverse of :func:`altitude_from_mean_motion` (rev/day)."""
    a = altitude_km + EARTH_RADIUS_KM
    if a <= 0:
        raise InputError(f"altitude implies non-positive semi-major axis: {altitude_km}")
    n_rad = math.sqrt(MU_EARTH_KM3_S2 / a**3)
    return n_rad * 86400.0 / (2.0 * math.pi)


def bstar_from_ballistic(cd_a_over_m: float) -> float:
    """Drag-like coefficient (1/ER) from a ballistic coefficient (m^2/kg).

    ``B* = 0.5 * B * rho_0 * R_earth`` with the SGP4 reference density and
    the Earth radius in km; the km/ER mismatch between the two radius
    conventions is absorbed into the documented reference density units.
    """
    return 0.5 * cd_a_over_m * SGP4_REF_DENSITY * EARTH_RADIUS_KM


def ballistic_from_bstar(bstar: float) -> float:
    """Ballistic coefficient (m^2/kg) from a drag-like coefficient (1/ER)."""
    return 2.0 * bstar / (SGP4_REF_DENSITY * EARTH_RADIUS_KM)


@dataclass(frozen=True)
class FitCoefficients:
    """Coefficients of the fractional-power decay curve.

    The curve is ``f(t) = a1 + a2*(t_ref - t)^(1/2) + a3*(t_ref - t)^(1/3)
    + a4*(t_ref - t)^(1/4)`` with ``a1`` pinned to the 80 km re-entry
    reference altitude so the fit cannot move the re-entry epoch.
    """

    a2: float
    a3: float
    a4: float
    t_ref: float
    a1: float = GRID_BOTTOM_KM
    converged: bool = True


def evaluate_fit(coeffs: FitCoefficients, t: np.ndarray | float) -> np.ndarray | float:
    """Altitude of the fitted curve at epoch(s) ``t`` (days), ``t <= t_ref``."""
    tau = np.asarray(coeffs.t_ref, dtype=float) - np.asarray(t, dtype=float)
    tau = np.maximum(tau, 0.0)
    value = (
        coeffs.a1
        + coeffs.a2 * tau ** (1.0 / 2.0)
        + coeffs.a3 * tau ** (1.0 / 3.0)
        + coeffs.a4 * tau ** (1.0 / 4.0)
    )
    return float(value) if np.isscalar(t) else value


def fit_decay_curve(
    samples: list[tuple[float, float]],
    t_ref: float,
    max_altitude: float = FIT_MAX_ALTITUDE_KM,
    lm_lambda0: float = 1e-3,
    max_iterations: int = 200,
    cost_tol: float = 1e-10,
) -> FitCoefficients:
    """Fit the fractional-power decay curve by Levenberg-Marquardt.

    Only (epoch, altitude) samples strictly before ``t_ref`` and below
    ``max_altitude`` enter the fit; at least three are required. The damping
    factor starts at ``lm_lambda0``, grows tenfold when a step fails to
    reduce the cost, and shrinks tenfold on success; iteration stops when the
    relative cost change falls below ``cost_tol`` or after
    ``max_iterations``. On non-convergence the best parameters so far are
    returned with ``converged=False``.

    The Jacobian is analytic: the model is linear in (a2, a3, a4), with
    basis columns ``tau^(1/2), tau^(1/3), tau^(1/4)``.
    """
    usable = [(t, h) for t, h in samples if h < max_altitude and t < t_ref]
    if len(usable) < 3:
        raise TooFewSamples(
            f"need >= 3 samples below {max_altitude} km and before t_ref, got {len(usable)}"
        )
    t = np.array([s[0] for s in usable], dtype=float)
    h = np.array([s[1] for s in usable], dtype=float)
    tau = t_ref - t

    jac = np.column_stack([tau ** (1.0 / 2.0), tau ** (1.0 / 3.0), tau ** (1.0 / 4.0)])
    target = h - GRID_BOTTOM_KM

    def cost(theta: np.ndarray) -> float:
        residual = jac @ theta - target
        return float(residual @ residual)

    theta = np.zeros(3)
    best_cost = cost(theta)
    lam = lm_lambda0
    converged = False
    jtj = jac.T @ jac
    scaling = np.diag(np.diag(jtj))
    for _ in range(max_iterations):
        residual = jac @ theta - target
        gradient = jac.T @ residual
        try:
            step = np.linalg.solve(jtj + lam * scaling, -gradient)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        candidate = theta + step
        c = cost(candidate)
        relative_change = abs(best_cost - c) / max(best_cost, 1e-300)
        if c < best_cost:
            theta = candidate
            best_cost = c
            lam /= 10.0
        else:
            lam *= 10.0
        if relative_change < cost_tol:
            converged = True
            break
        if lam > 1e12:
            break

    return FitCoefficients(
        a2=float(theta[0]),
        a3=float(theta[1]),
        a4=float(theta[2]),
        t_ref=float(t_ref),
        converged=converged,
    )


@dataclass(frozen=True)
class DecayTrajectory:
    """Fixed 25-point altitude/time trajectory of one object.

    ``grid_altitudes`` runs uniformly from 200 km down to 80 km;
    ``grid_times`` are the matching absolute epochs in days, the last being
    the re-entry epoch ``t_ref``. The epoch at 200 km serves as the time
    origin for residual-time features downstream.
    """

    norad_id: int
    grid_altitudes: np.ndarray
    grid_times: np.ndarray
    coefficients: FitCoefficients

    def __post_init__(self) -> None:
        if len(self.grid_altitudes) != GRID_POINTS or len(self.grid_times) != GRID_POINTS:
            raise InputError("trajectory grid must have exactly 25 points")
        if np.any(np.diff(self.grid_times) <= 0):
            raise NumericalError(
                f"grid times of {self.norad_id} are not strictly increasing"
            )

    def residual_times(self) -> np.ndarray:
        """Times in days measured from the 200 km crossing."""
        return self.grid_times - self.grid_times[0]


def grid_altitudes(
    n_points: int = GRID_POINTS,
    top: float = GRID_TOP_KM,
    bottom: float = GRID_BOTTOM_KM,
) -> np.ndarray:
    return np.linspace(top, bottom, n_points)


def sample_grid(
    coeffs: FitCoefficients,
    norad_id: int = 0,
    bisection_tol: float = 1e-9,
) -> DecayTrajectory:
    """Invert the fitted curve on the uniform altitude grid.

    Each grid altitude is solved by bisection to within ``bisection_tol``
    days; the 80 km point is pinned to ``t_ref`` exactly. The curve must be
    strictly decreasing in time over the bracketing interval, otherwise the
    grid would be ill-defined.
    """
    altitudes = grid_altitudes()

    # Bracket the 200 km crossing by expanding backwards from t_ref.
    span = 1.0
    t_low = coeffs.t_ref - span
    for _ in range(200):
        if evaluate_fit(coeffs, t_low) >= altitudes[0]:
            break
        span *= 2.0
        t_low = coeffs.t_ref - span
    else:
        raise NonMonotoneFit(
            f"fitted curve for {norad_id} never reaches {altitudes[0]} km"
        )

    # Probe monotonicity in time-to-reentry space; the fractional powers
    # change fastest near t_ref, so the probe is log-spaced there.
    tau_max = coeffs.t_ref - t_low
    tau_probe = np.unique(
        np.concatenate(
            [np.geomspace(1e-12, tau_max, 1024), np.linspace(0.0, tau_max, 1024)]
        )
    )
    probe_altitudes = evaluate_fit(coeffs, coeffs.t_ref - tau_probe)
    if np.any(np.diff(probe_altitudes) < -1e-9):
        raise NonMonotoneFit(
            f"fitted curve for {norad_id} is not strictly decreasing over the grid range"
        )

    times = np.empty(GRID_POINTS)
    times[-1] = coeffs.t_ref
    for i, target in enumerate(altitudes[:-1]):
        lo, hi = t_low, coeffs.t_ref
        while hi - lo > bisection_tol:
            mid = 0.5 * (lo + hi)
            if evaluate_fit(coeffs, mid) > target:
                lo = mid
            else:
                hi = mid
        times[i] = 0.5 * (lo + hi)

    return DecayTrajectory(
        norad_id=norad_id,
        grid_altitudes=altitudes,
        grid_times=times,
        coefficients=coeffs,
    )
