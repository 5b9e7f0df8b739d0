import json

import numpy as np
import pytest

from nvensemble.fitting import (
    FitError,
    dominant_frequency,
    fit_damped_cosine,
    fit_exponential,
    minimize_least_squares,
)


def test_quadratic_bowl():
    res = minimize_least_squares(lambda p: np.array([p[0] - 3.0, 2 * (p[1] + 1.0)]), [10.0, 10.0])
    assert res.converged
    assert np.allclose(res.x, [3.0, -1.0], atol=1e-8)
    assert res.cost < 1e-16


def test_bound_constrained_minimum_sits_on_the_bound():
    res = minimize_least_squares(lambda p: np.array([p[0] - 3.0, p[1]]), [0.0, 1.0], bounds=([-5, -5], [2.0, 5]))
    assert res.x[0] == pytest.approx(2.0)
    assert res.x[1] == pytest.approx(0.0, abs=1e-8)


def test_rosenbrock():
    def f(p):
        return np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]])

    res = minimize_least_squares(f, [-1.2, 1.0], options={"max_iter": 2000})
    assert res.converged
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)


def test_cost_log_is_monotone():
    def f(p):
        return np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]])

    log = minimize_least_squares(f, [-1.2, 1.0], options={"max_iter": 2000}).cost_log
    assert all(b < a for a, b in zip(log, log[1:]))


def test_nonfinite_residual_raises_with_parameters():
    with pytest.raises(FitError, match="non-finite"):
        minimize_least_squares(lambda p: np.array([p[0], np.inf]), [-1.0])


def test_unknown_option_rejected():
    with pytest.raises(ValueError):
        minimize_least_squares(lambda p: p, [1.0], options={"tolerance": 1})


@pytest.mark.parametrize("seed", range(100))
def test_exponential_recovery_under_noise(seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 500, 26)
    y = 0.8 * np.exp(-t / 100.0) + 0.1 + rng.normal(0, 0.005, t.size)
    fit = fit_exponential(t, y)
    assert fit.converged and fit.identifiable
    # 5 sigma band from the reported uncertainty, and a loose absolute sanity bound
    assert abs(fit.time_constant - 100) < max(5 * fit.uncertainty["time_constant"], 1.0)
    assert abs(fit.time_constant / 100 - 1) < 0.1


def test_exponential_noiseless_exact_and_deterministic():
    t = np.linspace(1, 10, 12)
    y = 2.0 * np.exp(-t / 3.0) - 0.5
    a, b = fit_exponential(t, y), fit_exponential(t, y)
    assert a.time_constant == pytest.approx(3.0, rel=1e-8)
    assert a.amplitude == pytest.approx(2.0, rel=1e-8)
    assert a.offset == pytest.approx(-0.5, abs=1e-9)
    assert json.dumps(a.to_dict(), sort_keys=True, default=str) == json.dumps(b.to_dict(), sort_keys=True, default=str)


def test_exponential_flags_unidentifiable_decay():
    t = np.linspace(0, 1, 10)
    fit = fit_exponential(t, 1 - 1e-4 * t)  # time constant >> window
    assert not fit.identifiable


def test_exponential_input_validation():
    with pytest.raises(FitError):
        fit_exponential([0, 1, 2], [1, 2, 3])
    with pytest.raises(FitError):
        fit_exponential([0, 1, 2, 3], [1, np.nan, 2, 3])
    with pytest.raises(FitError):
        fit_exponential([1, 1, 1, 1], [1, 2, 3, 4])


@pytest.mark.parametrize("envelope", ["exponential", "gaussian"])
def test_damped_cosine_recovery(envelope):
    t = np.linspace(0, 2.0, 201)
    env = np.exp(-t / 0.8) if envelope == "exponential" else np.exp(-((t / 0.8) ** 2))
    y = 0.7 * env * np.cos(2 * np.pi * 3.3 * t + 0.4) + 0.2
    fit = fit_damped_cosine(t, y, envelope=envelope)
    assert fit.converged
    assert fit.frequency == pytest.approx(3.3, rel=1e-6)
    assert fit.decay_time == pytest.approx(0.8, rel=1e-6)
    assert fit.offset == pytest.approx(0.2, abs=1e-8)
    assert np.allclose(fit.model(t), y, atol=1e-8)


def test_damped_cosine_noise():
    rng = np.random.default_rng(7)
    t = np.linspace(0, 600, 61)
    y = 0.5 * np.cos(2 * np.pi * 0.005 * t) + rng.normal(0, 0.01, t.size)
    fit = fit_damped_cosine(t, y)
    assert fit.frequency == pytest.approx(0.005, rel=0.01)


def test_damped_cosine_guards():
    t = np.linspace(0, 1, 50)
    with pytest.raises(FitError, match="periods"):
        fit_damped_cosine(t, np.cos(2 * np.pi * 0.3 * t))
    with pytest.raises(FitError, match="Nyquist"):
        fit_damped_cosine(t, np.cos(2 * np.pi * 20 * t))
    with pytest.raises(FitError):
        fit_damped_cosine(t[:5], t[:5])
    flat = fit_damped_cosine(t, np.full(t.size, 0.3))
    assert not flat.converged and flat.amplitude == 0.0 and flat.offset == pytest.approx(0.3)
    with pytest.raises(ValueError):
        fit_damped_cosine(t, t, envelope="lorentzian")


def test_dominant_frequency():
    t = np.arange(256) * 0.01
    assert dominant_frequency(t, np.sin(2 * np.pi * 7.0 * t)) == pytest.approx(7.0, abs=0.05)
    assert dominant_frequency(t, np.zeros_like(t)) is None


def test_covariance_scales_with_noise():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 5, 40)
    lo = fit_exponential(t, np.exp(-t) + rng.normal(0, 1e-3, t.size))
    hi = fit_exponential(t, np.exp(-t) + rng.normal(0, 1e-2, t.size))
    assert hi.uncertainty["time_constant"] > 3 * lo.uncertainty["time_constant"]
