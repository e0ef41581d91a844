from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bsdelab.clock_measure import Clock
from bsdelab.errors import ConfigError
from bsdelab.forward_models import BrownianDiffusion, sample_paths
from bsdelab.verification import (
    ORACLE_KINDS,
    Oracle,
    bracket_check,
    markov_check,
    oracle_value,
    statistical_compare,
)


def test_oracle_values():
    heat = Oracle("heat_quadratic")
    assert oracle_value(heat, 1.0, 1.7) == pytest.approx(1.7**2)
    assert oracle_value(heat, 0.0, 0.0) == pytest.approx(1.0)
    ode = Oracle("linear_driver_ode", c=-1.0, g0=1.0)
    assert oracle_value(ode, 0.0, 0.3) == pytest.approx(0.36787944117144233)
    assert np.allclose(oracle_value(heat, 0.5, np.array([0.0, 2.0])), [0.5, 4.5])


def test_gaussian_moment_matches_direct_expectation():
    o = Oracle("gaussian_moment", p=4, sigma=0.7)
    # E[(x + s sqrt(tau) Z)^4] = x^4 + 6 x^2 s^2 tau + 3 s^4 tau^2
    x, tau = 0.9, 0.6
    want = x**4 + 6 * x**2 * 0.49 * tau + 3 * 0.49**2 * tau**2
    assert oracle_value(o, 1 - tau, x) == pytest.approx(want)


def test_unknown_oracle_kind():
    with pytest.raises(ConfigError) as info:
        Oracle("wave")
    assert info.value.field == "oracle.kind"


@pytest.mark.parametrize(
    "oracle",
    [
        Oracle("heat_quadratic"),
        Oracle("heat_quadratic", sigma=0.5, T=2.0),
        Oracle("linear_driver_ode"),
        Oracle("linear_driver_ode", c=0.7, g0=0.5, g2=1.0, sigma=1.3),
        Oracle("gaussian_moment", p=3),
        Oracle("gaussian_moment", p=6, sigma=0.8),
    ],
    ids=lambda o: f"{o.kind}",
)
def test_oracle_self_check(oracle):
    assert oracle.self_check() <= 1e-6
    assert oracle.kind in ORACLE_KINDS


def test_compare_examples():
    assert statistical_compare([1.0], [0.1], [1.0]).passed
    assert not statistical_compare([2.0], [0.1], [1.0]).passed
    # boundary: deviation equals the budget exactly
    truth, budget = 0.3, 0.01
    rep = statistical_compare([truth + budget], [0.0], [truth], bias_budget=budget)
    assert rep.passed and rep.worst_standardized == 0.0
    # and equals 3 SE + budget exactly
    assert statistical_compare([0.1 + 3 * 0.02 + 0.01], [0.02], [0.1], 0.01).passed
    with pytest.raises(ValueError):
        statistical_compare([1, 2], [1], [1, 2])


@given(
    truth=st.floats(-1e3, 1e3),
    se=st.floats(1e-6, 10),
    z=st.floats(-20, 20),
    budget=st.floats(0, 1),
)
def test_compare_agrees_with_scaled_gate(truth, se, z, budget):
    est = truth + z * se
    rep = statistical_compare([est], [se], [truth], budget)
    if abs(z) * se <= 3 * se + budget - 1e-9 * (1 + abs(truth)):
        assert rep.passed
    if abs(z) * se >= 3 * se + budget + 1e-9 * (1 + abs(truth)):
        assert not rep.passed


def test_bracket_check_heat():
    clock = Clock.uniform(1.0, 20)
    model = BrownianDiffusion(clock)
    ens = sample_paths(model, (0.0, 0.0), 20_000, seed=3)
    u = Oracle("heat_quadratic").test_function()
    rep = bracket_check(model, u, u, ens, bias_budget=3 * 0.05)
    assert rep.passed
    assert rep.gamma_integral == pytest.approx(2.0 - 0.1, rel=0.05)  # E sum 4 X^2 dt, left endpoints


def test_markov_check_brownian():
    clock = Clock.uniform(1.0, 10)
    ens = sample_paths(BrownianDiffusion(clock), (0.0, 0.0), 20_000, seed=4)
    target = np.cos(ens.paths[:, -1, 0])
    rep = markov_check(ens, target, k=5)
    assert rep.passed
    # a target that depends on the past is caught
    bad = ens.paths[:, 2, 0] + 0.1 * ens.paths[:, 5, 0]
    assert not markov_check(ens, bad, k=5).passed
