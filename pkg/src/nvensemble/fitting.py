"""Damped least squares and the decay / oscillation fitters built on it."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.signal import periodogram


class FitError(RuntimeError):
    """A fit could not be performed or produced invalid numbers.

    ``best`` carries the best :class:`LsqResult` reached, if any.
    """

    def __init__(self, message: str, best: "LsqResult | None" = None):
        super().__init__(message)
        self.best = best


@dataclass
class LsqResult:
    x: np.ndarray
    cost: float  # 0.5 * sum(r^2)
    converged: bool
    iterations: int
    message: str
    jac: np.ndarray
    cost_log: list[float] = field(default_factory=list)

    def covariance(self) -> np.ndarray:
        """Parameter covariance scaled by the residual variance."""
        j = self.jac
        dof = max(j.shape[0] - j.shape[1], 1)
        s2 = 2 * self.cost / dof
        return np.linalg.pinv(j.T @ j) * s2


_DEFAULTS = {"ftol": 1e-10, "xtol": 1e-12, "max_iter": 500, "damping": 1e-3, "fd_step": None}


def _fd_jacobian(fun, x, r0, step, lo, hi):
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = step if step is not None else 1.49e-8 * max(abs(x[i]), 1.0)
        xp = x.copy()
        if xp[i] + h > hi[i]:
            h = -h
        xp[i] += h
        jac[:, i] = (np.asarray(fun(xp), dtype=float) - r0) / h
    return jac


def minimize_least_squares(
    fun: Callable[[np.ndarray], np.ndarray],
    x0: Sequence[float],
    bounds: tuple[Sequence[float], Sequence[float]] | None = None,
    jac: Callable[[np.ndarray], np.ndarray] | None = None,
    options: dict | None = None,
) -> LsqResult:
    """Levenberg-Marquardt with box constraints enforced by projection.

    The damping starts at ``options["damping"]`` and is divided by ten after
    an accepted step and multiplied by ten after a rejected one; the normal
    matrix is scaled by its own diagonal.  Converged means the relative cost
    decrease fell below ``ftol`` or the projected step below ``xtol`` (scaled
    by ``1 + |x|``).

    Raises
    ------
    FitError
        If the residual at any trial point is not finite.
    """
    opts = {**_DEFAULTS, **(options or {})}
    unknown = set(opts) - set(_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown options {sorted(unknown)}")
    x = np.array(x0, dtype=float)
    if bounds is None:
        lo = np.full(x.size, -np.inf)
        hi = np.full(x.size, np.inf)
    else:
        lo = np.broadcast_to(np.asarray(bounds[0], dtype=float), x.shape).copy()
        hi = np.broadcast_to(np.asarray(bounds[1], dtype=float), x.shape).copy()
    x = np.clip(x, lo, hi)

    def residual(p):
        r = np.asarray(fun(p), dtype=float).ravel()
        if not np.all(np.isfinite(r)):
            raise FitError(f"non-finite residual at parameters {p.tolist()}")
        return r

    def jacobian(p, r):
        if jac is not None:
            return np.asarray(jac(p), dtype=float).reshape(r.size, p.size)
        return _fd_jacobian(residual, p, r, opts["fd_step"], lo, hi)

    r = residual(x)
    cost = 0.5 * float(r @ r)
    log = [cost]
    mu = float(opts["damping"])
    J = jacobian(x, r)
    converged, message = False, "maximum iterations reached"
    it = 0
    while it < opts["max_iter"]:
        it += 1
        g = J.T @ r
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        try:
            step = np.linalg.solve(A + mu * np.diag(diag), -g)
        except np.linalg.LinAlgError:
            step = -g / (diag * (1 + mu))
        x_new = np.clip(x + step, lo, hi)
        actual = x_new - x
        if np.all(np.abs(actual) <= opts["xtol"] * (1 + np.abs(x))):
            converged, message = True, "step below xtol"
            break
        r_new = residual(x_new)
        cost_new = 0.5 * float(r_new @ r_new)
        if cost_new < cost:
            rel = (cost - cost_new) / max(cost, 1e-300)
            x, r, cost = x_new, r_new, cost_new
            log.append(cost)
            mu = max(mu / 10, 1e-12)
            if rel < opts["ftol"] or cost == 0.0:
                converged, message = True, "cost decrease below ftol"
                J = jacobian(x, r)
                break
            J = jacobian(x, r)
        else:
            mu *= 10
            if mu > 1e12:
                converged, message = True, "no further decrease possible"
                break
    return LsqResult(x, cost, converged, it, message, J, log)


# ---------------------------------------------------------------------------
# Exponential decay
# ---------------------------------------------------------------------------


@dataclass
class DecayFit:
    """``y = A exp(-t / T) + C``."""

    amplitude: float
    time_constant: float
    offset: float
    uncertainty: dict[str, float]
    converged: bool
    identifiable: bool
    residual_rms: float
    cost_log: list[float]
    residual_norm: float = 0.0
    iterations: int = 0
    options: dict = field(default_factory=dict)

    def model(self, t) -> np.ndarray:
        return self.amplitude * np.exp(-np.asarray(t, dtype=float) / self.time_constant) + self.offset

    def to_dict(self) -> dict:
        return {
            "model": "A*exp(-t/T)+C",
            "amplitude": self.amplitude,
            "time_constant": self.time_constant,
            "offset": self.offset,
            "uncertainty": self.uncertainty,
            "converged": self.converged,
            "identifiable": self.identifiable,
            "residual_rms": self.residual_rms,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "options": self.options,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_xy(t, y, min_points: int):
    t = np.asarray(t, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if t.shape != y.shape:
        raise FitError(f"t and y have different lengths ({t.size} vs {y.size})")
    if t.size < min_points:
        raise FitError(f"need at least {min_points} points, got {t.size}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise FitError("input contains non-finite values")
    order = np.argsort(t)
    return t[order], y[order]


def _linear_amp_offset(basis: np.ndarray, y: np.ndarray):
    M = np.stack([basis, np.ones_like(basis)], axis=1)
    coef, *_ = np.linalg.lstsq(M, y, rcond=None)
    r = M @ coef - y
    return coef, float(r @ r)


def fit_exponential(t, y, n_starts: int = 8) -> DecayFit:
    """Fit a single exponential with an offset.

    Starting values come from a log-spaced scan of ``T`` over the sampled
    time range with ``A`` and ``C`` solved linearly at each trial.  The fit
    is flagged non-identifiable if the time constant lies far outside the
    sampled window or its relative uncertainty is large.
    """
    t, y = _check_xy(t, y, 4)
    span = t[-1] - t[0]
    if span <= 0:
        raise FitError("time values must not all be equal")
    t_ref = t[0]
    tt = t - t_ref
    pos = tt[tt > 0]
    grid = np.geomspace(pos.min() / 2, span * 4, n_starts)

    def resid(p):
        return p[0] * np.exp(-tt / p[1]) + p[2] - y

    def jac(p):
        e = np.exp(-tt / p[1])
        return np.stack([e, p[0] * e * tt / p[1] ** 2, np.ones_like(tt)], axis=1)

    best = None
    total_iterations = 0
    for T in grid:
        (a, c), _ = _linear_amp_offset(np.exp(-tt / T), y)
        res = minimize_least_squares(resid, [a, T, c], jac=jac,
                                     bounds=([-np.inf, span * 1e-4, -np.inf], [np.inf, span * 1e4, np.inf]))
        total_iterations += res.iterations
        if best is None or res.cost < best.cost:
            best = res
    a, T, c = best.x
    a_ref = a * math.exp(t_ref / T)  # refer amplitude to t = 0
    cov = best.covariance()
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    scale = max(float(np.ptp(y)), 1e-300)
    identifiable = bool(
        (T < 3 * span)
        and (T > 0.3 * np.min(np.diff(t)) if t.size > 1 else True)
        and err[1] < 0.5 * T
        and abs(a) > 1e-6 * scale
    )
    return DecayFit(
        float(a_ref), float(T), float(c),
        {"amplitude": float(err[0] * math.exp(t_ref / T)), "time_constant": float(err[1]), "offset": float(err[2])},
        bool(best.converged), identifiable, math.sqrt(2 * best.cost / t.size), best.cost_log,
        math.sqrt(2 * best.cost), total_iterations, {"n_starts": n_starts, **_DEFAULTS},
    )


# ---------------------------------------------------------------------------
# Damped cosine
# ---------------------------------------------------------------------------


@dataclass
class OscillationFit:
    """``y = A env(t) cos(2 pi f t + phi) + C``.

    ``env`` is ``exp(-t/tau)`` (exponential) or ``exp(-(t/tau)^2)``
    (gaussian); ``decay_time`` is the 1/e time ``tau`` and may be infinite
    for an undamped signal.
    """

    amplitude: float
    frequency: float
    phase: float
    decay_time: float
    offset: float
    envelope: str
    uncertainty: dict[str, float]
    converged: bool
    residual_rms: float
    cost_log: list[float]
    residual_norm: float = 0.0
    iterations: int = 0
    options: dict = field(default_factory=dict)

    def model(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        rate = 0.0 if math.isinf(self.decay_time) else 1.0 / self.decay_time
        env = np.exp(-t * rate) if self.envelope == "exponential" else np.exp(-((t * rate) ** 2))
        return self.amplitude * env * np.cos(2 * np.pi * self.frequency * t + self.phase) + self.offset

    def to_dict(self) -> dict:
        return {
            "model": f"A*{self.envelope}_envelope*cos(2*pi*f*t+phi)+C",
            "amplitude": self.amplitude,
            "frequency": self.frequency,
            "phase": self.phase,
            "decay_time": None if math.isinf(self.decay_time) else self.decay_time,
            "offset": self.offset,
            "envelope": self.envelope,
            "uncertainty": self.uncertainty,
            "converged": self.converged,
            "residual_rms": self.residual_rms,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "options": self.options,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def dominant_frequency(t, y) -> float | None:
    """Strongest nonzero periodogram frequency of a uniformly sampled signal.

    Returns ``None`` if there is no spectral content away from DC.
    """
    t, y = np.asarray(t, dtype=float), np.asarray(y, dtype=float)
    dt = float(np.median(np.diff(t)))
    pad = 16 * int(2 ** math.ceil(math.log2(t.size)))
    f, p = periodogram(y - y.mean(), fs=1.0 / dt, nfft=pad, detrend=False)
    if p.size < 2 or not np.max(p[1:]) > 1e-20 * max(float(np.sum(y**2)), 1e-300):
        return None
    return float(f[1:][np.argmax(p[1:])])


def fit_damped_cosine(
    t, y, envelope: str = "exponential", frequency_guess: float | None = None
) -> OscillationFit:
    """Fit a damped cosine with an offset.

    Raises
    ------
    FitError
        With fewer than 8 points, less than one period of the dominant
        frequency in the window, or a dominant frequency above half the
        Nyquist limit.
    """
    if envelope not in ("exponential", "gaussian"):
        raise ValueError(f"unknown envelope {envelope!r}")
    t, y = _check_xy(t, y, 8)
    span = t[-1] - t[0]
    dt = float(np.median(np.diff(t)))
    if not span > 0 or not dt > 0:
        raise FitError("time values must be strictly spread")
    nyquist = 0.5 / dt
    flat = np.ptp(y) <= 1e-9 * max(float(np.max(np.abs(y))), 1e-300)
    f0 = None if flat else (frequency_guess if frequency_guess is not None else dominant_frequency(t, y))
    if f0 is None or f0 <= 0:
        c = float(np.mean(y))
        rms = float(np.sqrt(np.mean((y - c) ** 2)))
        return OscillationFit(0.0, 0.0, 0.0, math.inf, c, envelope, {}, False, rms, [],
                              rms * math.sqrt(t.size), 0, {"envelope": envelope, **_DEFAULTS})
    if f0 > nyquist / 2:
        raise FitError(f"dominant frequency {f0:.4g} exceeds half the Nyquist limit {nyquist / 2:.4g}")
    if f0 * span < 1.0:
        raise FitError(f"window covers {f0 * span:.3g} periods; need at least one")

    tt = t

    def env(rate):
        return np.exp(-tt * rate) if envelope == "exponential" else np.exp(-((tt * rate) ** 2))

    def resid(p):
        a, f, phi, rate, c = p
        return a * env(rate) * np.cos(2 * np.pi * f * tt + phi) + c - y

    best = None
    total_iterations = 0
    for rate0 in (0.0, 0.5 / span, 2.0 / span):
        e = env(rate0)
        M = np.stack([e * np.cos(2 * np.pi * f0 * tt), -e * np.sin(2 * np.pi * f0 * tt), np.ones_like(tt)], axis=1)
        (ac, as_, c0), *_ = np.linalg.lstsq(M, y, rcond=None)
        x0 = [math.hypot(ac, as_), f0, math.atan2(as_, ac), rate0, c0]
        res = minimize_least_squares(
            resid, x0, bounds=([0.0, 0.0, -np.inf, 0.0, -np.inf], [np.inf, nyquist, np.inf, 50.0 / span, np.inf]))
        total_iterations += res.iterations
        if best is None or res.cost < best.cost:
            best = res
    a, f, phi, rate, c = best.x
    err = np.sqrt(np.clip(np.diag(best.covariance()), 0, None))
    phi = float((phi + np.pi) % (2 * np.pi) - np.pi)
    tau = math.inf if rate <= 0 else 1.0 / float(rate)
    tau_err = math.inf if rate <= 0 else float(err[3] / rate**2)
    return OscillationFit(
        float(a), float(f), phi, tau, float(c), envelope,
        {"amplitude": float(err[0]), "frequency": float(err[1]), "phase": float(err[2]),
         "decay_time": tau_err, "offset": float(err[4])},
        bool(best.converged), math.sqrt(2 * best.cost / t.size), best.cost_log,
        math.sqrt(2 * best.cost), total_iterations, {"envelope": envelope, **_DEFAULTS},
    )
