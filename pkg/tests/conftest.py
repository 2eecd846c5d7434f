"""Shared fixtures and quadrature oracles for the test suite."""

from __future__ import annotations

import math

import pytest
from scipy.integrate import quad

from reinsddp.models import ClaimLaw, RiskModel


def quad_retained_moment(kappa, retained, x, alpha):
    """Independent quadrature of integral (x - u(c))^alpha kappa e^{-kappa c} dc."""
    val, _ = quad(
        lambda c: (x - retained(c)) ** alpha * kappa * math.exp(-kappa * c),
        0.0,
        60.0 / kappa,
        limit=400,
    )
    return val


def quad_premium_transform(kappa, retained, coeffs, x):
    """Independent quadrature of integral p(u(c), x) kappa e^{-kappa c} dc."""

    def p(y, xx):
        return sum(c * y**a * xx**b for (a, b), c in coeffs.items())

    val, _ = quad(
        lambda c: p(retained(c), x) * kappa * math.exp(-kappa * c),
        0.0,
        60.0 / kappa,
        limit=400,
    )
    return val


def envelope_excess(record, model, strategy, n_samples=64):
    """Worst violation of the pathwise discounted-reserve envelope.

    Along any admissible path, e^{-qt} X_t <= max(x0, 0) + norm0 (1-e^{-qt})/q
    + (discounted injections up to t).  Returns the largest sampled excess of
    the left side over the right (negative when the envelope holds strictly).
    """
    import numpy as np

    from reinsddp.simulate import reserve_at

    q = model.q
    norm0 = model.premium.norm0
    x0 = record.x0
    inj_events = [(ev.t, ev.amount * math.exp(-q * ev.t))
                  for ev in record.events if ev.kind == "injection"]
    times = np.linspace(0.0, record.terminal_time, n_samples)
    reserves = reserve_at(record, model, strategy, times)
    worst = -math.inf
    for t, x in zip(times, reserves):
        inj_disc = sum(w for (s, w) in inj_events if s <= t)
        bound = max(x0, 0.0) + norm0 * (1.0 - math.exp(-q * t)) / q + inj_disc
        worst = max(worst, math.exp(-q * t) * max(x, 0.0) - bound)
    return worst


@pytest.fixture(scope="session")
def exp_model():
    """Workhorse model: exponential claims, affine-in-x multiplicative premium."""
    return RiskModel.build(
        claims=ClaimLaw.exponential(1.0),
        premium_coeffs={(1, 0): 1.2, (1, 1): 0.05},
        lam=1.0,
        q=0.12,
        k=2.0,
    )


@pytest.fixture(scope="session")
def const_model():
    """Constant-premium model (lip1 = 0 path through the bound formulas)."""
    return RiskModel.build(
        claims=ClaimLaw.exponential(1.0),
        premium_coeffs={(0, 0): 1.0},
        lam=1.0,
        q=0.1,
        k=2.0,
    )
