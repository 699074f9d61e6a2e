"""Spin-dependent classical trajectories of a driven local mode.

The dimensionless complex amplitude ``alpha`` of a driven ion obeys

    d(alpha)/dt = -i w alpha + 2i eta |Omega| sigma
                  * sin(eta (alpha + alpha*) + phi(t) + phi0)

with alpha(0) = 0, where ``phi(t)`` is the controlled drive phase, piecewise
linear with slopes +/- w, and ``sigma = +/-1`` is the qubit eigenvalue.  The
gate works on one base interval ``tau`` with w*tau a multiple of 2*pi, and the
drive phase is shaped so both spin branches return to the phase-space origin
at ``tau``.

Two routes are provided: exact numerical integration (adaptive RK45, any
drive strength), and the closed-form small-excursion solution valid when
eta*|alpha| << 1, which serves as an independent oracle and as the design
basis for the slow-drive regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, root

TWO_PI = 2.0 * math.pi


class TrajectoryError(Exception):
    pass


class ProfileDesignError(TrajectoryError):
    """Phase-profile offsets could not be solved to closure."""


@dataclass(frozen=True)
class DriveParams:
    """Drive parameters for one target ion.

    eta        : Lamb-Dicke parameter (dimensionless)
    rabi       : Rabi amplitude |Omega| (rad/s)
    phi0       : optical phase offset (rad), unknown lab phase
    omega      : local mode frequency (rad/s)
    tau        : base interval (s)
    k_multiple : integer K with omega*tau = 2*K*pi, when the interval is
                 locked to the mode period (required for closure)
    """

    eta: float
    rabi: float
    phi0: float
    omega: float
    tau: float
    k_multiple: int | None = None

    def __post_init__(self):
        if self.eta <= 0:
            raise TrajectoryError("eta must be positive")
        if self.rabi < 0:
            raise TrajectoryError("rabi must be nonnegative")
        if self.omega <= 0 or self.tau <= 0:
            raise TrajectoryError("omega and tau must be positive")
        if self.k_multiple is not None:
            target = TWO_PI * self.k_multiple
            if abs(self.omega * self.tau - target) > 1e-12 * target:
                raise TrajectoryError(
                    f"omega*tau = {self.omega * self.tau!r} is not "
                    f"2*pi*{self.k_multiple} within 1e-12 relative")

    @classmethod
    def closed_interval(cls, eta, rabi, phi0, omega, k_multiple):
        """Params with tau locked to k_multiple mode periods."""
        tau = TWO_PI * k_multiple / omega
        return cls(eta, rabi, phi0, omega, tau, k_multiple)

    def replace(self, **kw) -> "DriveParams":
        d = dict(eta=self.eta, rabi=self.rabi, phi0=self.phi0,
                 omega=self.omega, tau=self.tau, k_multiple=self.k_multiple)
        d.update(kw)
        return DriveParams(**d)


@dataclass(frozen=True)
class Segment:
    """One linear-phase piece: phi(t) = slope_sign * omega * t + offset
    for t_start <= t < t_start + duration (t is global time)."""

    duration: float
    slope_sign: int
    offset: float

    def __post_init__(self):
        if self.duration <= 0:
            raise TrajectoryError("segment duration must be positive")
        if self.slope_sign not in (-1, 1):
            raise TrajectoryError("slope_sign must be +1 or -1")


@dataclass(frozen=True)
class PhaseProfile:
    """Piecewise-linear drive phase over one base interval.

    ``symmetric`` asserts that phi(t - tau/2) is an even function, i.e. the
    segment list mirrors about tau/2 (slopes flip sign, values match).
    """

    segments: tuple[Segment, ...]
    symmetric: bool = False

    @property
    def duration(self) -> float:
        return sum(s.duration for s in self.segments)

    def boundaries(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])

    def phase(self, t: float, omega: float) -> float:
        """phi(t) at global time t (right-continuous at boundaries)."""
        b = self.boundaries()
        j = min(int(np.searchsorted(b, t, side="right")) - 1, len(self.segments) - 1)
        s = self.segments[j]
        return s.slope_sign * omega * t + s.offset

    def shifted(self, delta: float) -> "PhaseProfile":
        """Profile with a constant ``delta`` added to the phase everywhere."""
        return PhaseProfile(tuple(Segment(s.duration, s.slope_sign, s.offset + delta)
                                  for s in self.segments), self.symmetric)

    def validate_symmetric(self) -> bool:
        """Check the mirror property of the segment list."""
        segs = self.segments
        tau = self.duration
        b = self.boundaries()
        for j, s in enumerate(segs):
            k = len(segs) - 1 - j
            m = segs[k]
            if abs(s.duration - m.duration) > 1e-12 * tau:
                return False
            # mirrored segment of s spans [tau-b[j+1], tau-b[j]] with slope
            # -slope and offset offset + slope*omega*tau; compare shape only
            if m.slope_sign != -s.slope_sign:
                return False
        return True


def ld_default_profile(params: DriveParams) -> PhaseProfile:
    """The slow-drive design: phi = w t on [0, tau/2), w t + pi on [tau/2, tau).

    Closes alpha(tau) = 0 exactly in the small-excursion limit whenever
    w*tau = 2*K*pi, for any optical phase.
    """
    h = params.tau / 2.0
    return PhaseProfile((Segment(h, +1, 0.0), Segment(h, +1, math.pi)))


def mirrored_profile(half_segments, params: DriveParams) -> PhaseProfile:
    """Build a full even profile from segments covering [0, tau/2].

    The second half is the time mirror: a piece with slope s and offset c
    maps to slope -s and offset c + s*omega*tau, so that
    phi(tau - t) = phi(t) for every t.
    """
    tau = params.tau
    total = sum(s.duration for s in half_segments)
    if abs(total - tau / 2.0) > 1e-12 * tau:
        raise TrajectoryError("half segments must cover [0, tau/2]")
    mirror = [Segment(s.duration, -s.slope_sign, s.offset + s.slope_sign * params.omega * tau)
              for s in reversed(half_segments)]
    return PhaseProfile(tuple(half_segments) + tuple(mirror), symmetric=True)


# ---------------------------------------------------------------------------
# integration


def _segment_grid(duration, t0, omega, samples_per_period):
    n = max(4, int(math.ceil(duration * samples_per_period * omega / TWO_PI)))
    n = 4 * ((n + 3) // 4)  # multiple of 4: composite Simpson plus halved check grid
    return t0 + np.linspace(0.0, duration, n + 1)


def profile_time_grid(profile: PhaseProfile, params: DriveParams,
                      samples_per_period: int = 256):
    """Common sample grid: uniform within each segment, boundaries included.

    Returns (times, segment_slices) where each slice selects one segment's
    samples including both of its endpoints.
    """
    times = [np.array([0.0])]
    slices = []
    t0 = 0.0
    pos = 1
    for s in profile.segments:
        g = _segment_grid(s.duration, t0, params.omega, samples_per_period)
        times.append(g[1:])
        slices.append(slice(pos - 1, pos + len(g) - 1))
        pos += len(g) - 1
        t0 += s.duration
    return np.concatenate(times), slices


def integrate_alpha(profile: PhaseProfile, params: DriveParams, sigma: int,
                    samples_per_period: int = 256, rtol: float = 1e-10,
                    max_step: float | None = None,
                    t_end: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the trajectory for one spin branch.

    Returns (times, alpha) sampled on the profile grid up to ``t_end``
    (default: the full interval).  Integration proceeds segment by segment so
    the adaptive stepper never straddles a phase discontinuity.
    """
    if sigma not in (-1, 1):
        raise TrajectoryError("sigma must be +1 or -1")
    if abs(profile.duration - params.tau) > 1e-9 * params.tau:
        raise TrajectoryError("profile duration does not match params.tau")
    times, slices = profile_time_grid(profile, params, samples_per_period)
    if t_end is not None:
        keep = times <= t_end * (1 + 1e-15)
        times = times[keep]
    alpha = np.zeros(len(times), dtype=complex)
    if params.rabi == 0.0:
        return times, alpha

    w = params.omega
    amp = 2.0 * params.eta * params.rabi * sigma
    atol = 1e-10 * params.eta * params.rabi * params.tau
    kw = {} if max_step is None else {"max_step": max_step}

    y = 0.0 + 0.0j
    t0 = 0.0
    pos = 1
    for s in profile.segments:
        t1 = t0 + s.duration
        seg_times = times[(times > t0) & (times <= t1 * (1 + 1e-15))]
        if len(seg_times) == 0 and t0 >= times[-1]:
            break
        c = s.offset + params.phi0
        sgn = s.slope_sign

        def rhs(t, yv):
            ph = params.eta * 2.0 * yv[0].real + sgn * w * t + c
            return [-1j * w * yv[0] + 1j * amp * math.sin(ph)]

        stop = min(t1, times[-1])
        sol = solve_ivp(rhs, (t0, stop), [y], method="RK45", rtol=rtol,
                        atol=atol, dense_output=True, **kw)
        if not sol.success:
            raise TrajectoryError(
                f"integration failed in segment starting at t={t0:.3e}: {sol.message}")
        if len(seg_times):
            alpha[pos:pos + len(seg_times)] = sol.sol(seg_times)[0]
            pos += len(seg_times)
        y = sol.y[0, -1]
        t0 = t1
        if t0 >= times[-1]:
            break
    return times, alpha


@dataclass(frozen=True)
class TrajectorySolution:
    """Both spin branches on a common grid over [0, tau]."""

    times: np.ndarray
    alpha_plus: np.ndarray
    alpha_minus: np.ndarray
    closure_residual: float     # max over branches of |alpha(tau)|
    midpoint_imag: float        # max over branches of |Im alpha(tau/2)|
    segment_slices: tuple = ()

    @property
    def max_excursion(self) -> float:
        return float(max(np.max(np.abs(self.alpha_plus)),
                         np.max(np.abs(self.alpha_minus)), 0.0))

    def to_columns(self) -> dict:
        """Plot-ready columnar export."""
        return {
            "t": self.times.copy(),
            "re_alpha_plus": self.alpha_plus.real.copy(),
            "im_alpha_plus": self.alpha_plus.imag.copy(),
            "re_alpha_minus": self.alpha_minus.real.copy(),
            "im_alpha_minus": self.alpha_minus.imag.copy(),
        }


def solve_trajectory(profile: PhaseProfile, params: DriveParams,
                     samples_per_period: int = 256, rtol: float = 1e-10,
                     max_step: float | None = None) -> TrajectorySolution:
    """Integrate both spin branches and collect closure diagnostics."""
    times, ap = integrate_alpha(profile, params, +1, samples_per_period, rtol, max_step)
    _, am = integrate_alpha(profile, params, -1, samples_per_period, rtol, max_step)
    mid = int(np.argmin(np.abs(times - params.tau / 2.0)))
    return TrajectorySolution(
        times, ap, am,
        closure_residual=float(max(abs(ap[-1]), abs(am[-1]))),
        midpoint_imag=float(max(abs(ap[mid].imag), abs(am[mid].imag))),
        segment_slices=tuple(profile_time_grid(profile, params, samples_per_period)[1]),
    )


# ---------------------------------------------------------------------------
# closed-form small-excursion solution


def analytic_ld_alpha(t, params: DriveParams, sigma: int):
    """Closed-form alpha(t) for the two-piece slow-drive design.

    Valid in the small-excursion limit (eta*|alpha| << 1) with
    phi = w t on [0, tau/2] and w t + pi on (tau/2, tau].  Accepts scalar or
    array ``t``; vanishes at t = tau whenever w*tau = 2*K*pi.
    """
    if sigma not in (-1, 1):
        raise TrajectoryError("sigma must be +1 or -1")
    t = np.asarray(t, dtype=float)
    w, tau, phi0 = params.omega, params.tau, params.phi0
    a0 = params.eta * params.rabi * sigma / w
    first = t <= tau / 2.0

    out = np.empty(t.shape, dtype=complex)
    t1 = t[first]
    out[first] = a0 * np.exp(-1j * w * t1) * (
        np.exp(1j * (w * t1 + phi0)) * np.sin(w * t1) - w * t1 * np.exp(-1j * phi0))
    t2 = t[~first]
    out[~first] = a0 * np.exp(-1j * w * t2) * (
        -np.exp(1j * (w * t2 + w * tau / 2.0 + phi0)) * np.sin(w * (t2 - tau / 2.0))
        + np.exp(1j * (w * tau / 2.0 + phi0)) * np.sin(w * tau / 2.0)
        + w * (t2 - tau) * np.exp(-1j * phi0))
    return out if out.shape else complex(out)


# ---------------------------------------------------------------------------
# closure

@dataclass(frozen=True)
class ClosureReport:
    residual_plus: float
    residual_minus: float
    normalized: float          # max residual / max excursion
    tolerance: float
    passed: bool


def closure_check(solution: TrajectorySolution, params: DriveParams,
                  tol: float = 1e-6) -> ClosureReport:
    """Normalized end-of-interval residual of both branches."""
    if abs(solution.times[-1] - params.tau) > 1e-9 * params.tau:
        raise TrajectoryError("solution does not cover [0, tau]")
    rp = float(abs(solution.alpha_plus[-1]))
    rm = float(abs(solution.alpha_minus[-1]))
    scale = solution.max_excursion
    normalized = max(rp, rm) / scale if scale > 0 else 0.0
    return ClosureReport(rp, rm, normalized, tol, normalized <= tol)


# ---------------------------------------------------------------------------
# profile design


def _midpoint_imag(half_segments, params, sigma, rtol=1e-10):
    """Im alpha(tau/2) for one branch; integrates the half interval only."""
    # pad with a dummy mirror so profile durations validate
    prof = mirrored_profile(half_segments, params)
    times, alpha = integrate_alpha(prof, params, sigma, samples_per_period=64,
                                   rtol=rtol, t_end=params.tau / 2.0)
    return float(alpha[-1].imag), float(np.max(np.abs(alpha)))


def _half_segments(params, n_half, offsets):
    # co-rotating slope throughout the first half (the mirror gives the
    # second half slope -1, which drives the opposite quadrature resonantly)
    h = params.tau / 2.0 / n_half
    return [Segment(h, +1, offsets[j]) for j in range(n_half)]


def _phase_rate(profile, params, rtol):
    """Conditional-phase rate of a profile (per unit pair rate): integral of
    (Re a_+ - Re a_-)^2 over the interval, by the trapezoid rule (used only
    to rank closure solutions)."""
    sol = solve_trajectory(profile, params, samples_per_period=128, rtol=rtol)
    d2 = (sol.alpha_plus.real - sol.alpha_minus.real) ** 2
    return float(np.trapezoid(d2, sol.times))


def design_phase_profile(params: DriveParams, n_segments: int = 4,
                         closure_tol: float = 1e-6,
                         rtol: float = 1e-10,
                         seed_offsets: tuple | None = None) -> PhaseProfile:
    """Choose a drive-phase profile whose trajectories close at tau.

    The slow-drive two-piece profile is tried first and returned unchanged
    when it already closes (it always does for weak drive at w*tau = 2*K*pi,
    and trivially at zero drive).  Otherwise ``n_segments`` (an even count
    over the full interval, 4 by default) equal co-rotating pieces are laid
    out over [0, tau/2] and mirrored, and their offsets are solved so that
    Im alpha(tau/2) vanishes for both spin branches; evenness of the profile
    then maps each half trajectory onto its time reverse, giving
    alpha(tau) = alpha(0) = 0.

    The closure system has several solutions differing in how much
    conditional phase the trajectories sweep; among the converged roots the
    one with the largest phase rate is kept.  ``seed_offsets`` (the (u, v)
    offsets of a previous design) short-circuits the search, keeping the
    selected branch continuous across small parameter changes.
    """
    if n_segments < 2 or n_segments % 2:
        raise ProfileDesignError("n_segments must be an even count >= 2")

    default = ld_default_profile(params)
    sol = solve_trajectory(default, params, rtol=rtol)
    scale = sol.max_excursion
    if params.rabi == 0.0 or sol.closure_residual <= closure_tol * max(scale, 1e-300):
        return default

    n_half = n_segments // 2

    if n_half == 1:
        # one knob: close the sigma = +1 branch; feasible only while the
        # branches still mirror each other (weak drive)
        def f(u):
            return _midpoint_imag(_half_segments(params, 1, [u]), params, +1, rtol)[0]

        us = np.linspace(0.0, TWO_PI, 17)
        vals = [f(u) for u in us]
        bracket = None
        for a, b, fa, fb in zip(us[:-1], us[1:], vals[:-1], vals[1:]):
            if fa == 0.0 or fa * fb < 0:
                bracket = (a, b)
                break
        if bracket is None:
            raise ProfileDesignError(
                "no sign change in Im alpha(tau/2) over one free offset; "
                "use more segments or reduce eta*|Omega|/omega")
        u = brentq(f, *bracket, xtol=1e-14)
        offsets = [u]
    else:
        # two knobs (u on even, v on odd first-half pieces): close both
        # branches simultaneously
        def offsets_for(x):
            return [x[0] if j % 2 == 0 else x[1] for j in range(n_half)]

        def fvec(x):
            segs = _half_segments(params, n_half, offsets_for(x))
            return [_midpoint_imag(segs, params, +1, rtol)[0],
                    _midpoint_imag(segs, params, -1, rtol)[0]]

        def try_root(x0):
            res = root(fvec, x0, method="hybr", tol=1e-13)
            if res.success and np.max(np.abs(res.fun)) <= 1e-8 * max(scale, 1e-300):
                return tuple(np.mod(res.x, TWO_PI))
            return None

        solution = try_root(seed_offsets) if seed_offsets is not None else None
        if solution is None:
            grid = np.linspace(0.0, TWO_PI, 7)[:-1]
            found = []
            for u0 in grid:
                for v0 in grid:
                    r = try_root((u0, v0))
                    if r is not None and not any(
                            abs(r[0] - q[0]) < 1e-3 and abs(r[1] - q[1]) < 1e-3
                            for q in found):
                        found.append(r)
            if not found:
                raise ProfileDesignError(
                    "offset solve did not converge; use more segments or "
                    "reduce eta*|Omega|/omega")
            rates = [
                _phase_rate(mirrored_profile(
                    _half_segments(params, n_half, offsets_for(r)), params),
                    params, rtol)
                for r in found]
            solution = found[int(np.argmax(rates))]
        offsets = offsets_for(solution)

    profile = mirrored_profile(_half_segments(params, n_half, offsets), params)
    final = solve_trajectory(profile, params, rtol=rtol)
    if final.closure_residual > closure_tol * max(final.max_excursion, 1e-300):
        raise ProfileDesignError(
            f"designed profile does not close: residual "
            f"{final.closure_residual:.3e} vs excursion {final.max_excursion:.3e}; "
            "use more segments or reduce eta*|Omega|/omega")
    return profile


def profile_offsets(profile: PhaseProfile) -> tuple:
    """(u, v) first-half offsets of a designed profile (redesign seed)."""
    n_half = max(1, len(profile.segments) // 2)
    offs = [s.offset for s in profile.segments[:n_half]]
    return (offs[0], offs[1] if len(offs) > 1 else offs[0])
