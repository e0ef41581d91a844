from __future__ import annotations

import json
import math

import numpy as np
import pytest

from bsdelab._io import write_json
from bsdelab.bsde_solver import (
    BsdeIterate,
    Driver,
    SolverConfig,
    estimate_bracket_density,
    martingale_diagnostic,
    picard_step,
    solve,
    solve_on_ensemble,
    weighted_norm,
)
from bsdelab.clock_measure import Clock
from bsdelab.errors import ConvergenceError, DomainError, NumericError
from bsdelab.forward_models import (
    AlphaStable,
    BrownianDiffusion,
    JumpDiffusion,
    sample_paths,
)
from bsdelab.regression import RegressionBasis

CLOCK = Clock.uniform(1.0, 20)
BM = BrownianDiffusion(CLOCK)
DEG2 = RegressionBasis("polynomial", 2)


def zero_driver(g):
    return Driver(lambda t, x, y, z: np.zeros_like(y), g, 0.0, 0.0, "zero", yz_free=True)


def sin_cos(g=lambda x: np.cos(x[:, 0])):
    return Driver(lambda t, x, y, z: np.sin(y) + 0.5 * np.cos(z), g, 1.0, 1.0, "sin_cos")


# -- driver -----------------------------------------------------------------


def test_default_lambda():
    assert sin_cos().default_lambda == 5.0
    assert zero_driver(lambda x: x[:, 0]).default_lambda == 1.0


def test_lipschitz_spot_check(rng):
    assert sin_cos().check_lipschitz(rng) <= 1.0
    liar = Driver(lambda t, x, y, z: 2 * y, lambda x: 0 * x[:, 0], 1.0, 0.0)
    with pytest.raises(DomainError):
        liar.check_lipschitz(rng)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_driver_reports_point():
    bad = Driver(lambda t, x, y, z: np.sqrt(y - 1), lambda x: 0 * x[:, 0], 1, 0, "log")
    ens = sample_paths(BM, (0.0, 0.0), 50, seed=0)
    with pytest.raises(NumericError, match=r"t=.*x=.*y=.*z="):
        picard_step(BsdeIterate.zero(ens), ens, bad)


# -- picard step --------------------------------------------------------------


def test_step_constant_terminal():
    ens = sample_paths(BM, (0.0, 0.3), 500, seed=1)
    it = picard_step(BsdeIterate.zero(ens), ens, zero_driver(lambda x: np.full(len(x), 2.5)))
    assert np.allclose(it.Y, 2.5, atol=1e-12)
    assert np.allclose(it.dM, 0.0, atol=1e-12) and np.allclose(it.zsq, 0.0, atol=1e-12)


def test_step_unit_driver_counts_remaining_time():
    ens = sample_paths(BM, (0.0, 0.3), 500, seed=1)
    one = Driver(lambda t, x, y, z: np.ones_like(y), lambda x: np.zeros(len(x)), 0, 0, yz_free=True)
    it = picard_step(BsdeIterate.zero(ens), ens, one)
    assert np.allclose(it.Y, 1.0 - CLOCK.times, atol=1e-12)


def test_step_heat_conditional_moment():
    n = 100_000
    ens = sample_paths(BM, (0.0, 0.0), n, seed=2)
    it = picard_step(BsdeIterate.zero(ens), ens, zero_driver(lambda x: x[:, 0] ** 2), basis=DEG2)
    for k in (5, 10, 15):
        xk = ens.paths[:, k, 0]
        truth = xk**2 + (1 - CLOCK.times[k])
        err = it.Y[:, k] - truth
        # regression error of a 3-term fit: sqrt(p Var(target | X) / n) scale
        se = math.sqrt(3 * np.var(ens.paths[:, -1, 0] ** 2 - truth) / n)
        assert math.sqrt(np.mean(err**2)) <= 3 * se


def test_step_structural_invariants():
    ens = sample_paths(BM, (0.35, 0.2), 2000, seed=3)
    g = lambda x: np.sin(2 * x[:, 0])
    it = picard_step(BsdeIterate.zero(ens), ens, sin_cos(g))
    it = picard_step(it, ens, sin_cos(g))
    k0 = ens.start_index
    assert np.array_equal(it.Y[:, -1], g(ens.paths[:, -1, :]))
    assert np.all(it.Y[:, :k0] == it.Y[:, k0 : k0 + 1])
    assert np.all(it.zsq >= 0)
    assert not it.dM[:, :k0].any() and not it.zsq[:, :k0].any()


def test_step_flat_clock_cells_are_singular():
    clock = Clock.from_table([0, 0.5, 1.0], [0, 0, 0.5], n_steps=10)
    model = BrownianDiffusion(clock)
    ens = sample_paths(model, (0.0, 0.0), 3000, seed=4)
    it = picard_step(BsdeIterate.zero(ens), ens, sin_cos())
    flat = clock.increments == 0
    assert not it.zsq[:, flat].any()
    # paths do not move on flat cells, so neither does Y
    assert np.allclose(it.dM[:, flat], 0.0, atol=1e-12)
    assert it.singular_mass == pytest.approx(0.0, abs=1e-20)


# -- weighted norm -----------------------------------------------------------


def test_weighted_norm_examples():
    clock = Clock.uniform(1.0, 10)
    zero = BsdeIterate(np.zeros((4, 11)), np.zeros((4, 10)), np.zeros((4, 10)))
    assert weighted_norm(zero, clock, 3.0) == 0.0
    ones = BsdeIterate(np.ones((4, 11)), np.zeros((4, 10)), np.zeros((4, 10)))
    assert weighted_norm(ones, clock, 0.0) == pytest.approx(1.0)
    # e^{lam V} weighting of a unit bracket per cell
    inc = BsdeIterate(np.zeros((4, 11)), np.full((4, 10), 0.1), np.zeros((4, 10)))
    want = 0.01 * np.exp(2.0 * clock.values[:-1]).sum()
    assert weighted_norm(inc, clock, 2.0) == pytest.approx(want)
    with pytest.raises(DomainError):
        weighted_norm(zero, clock, -1.0)


# -- solve --------------------------------------------------------------------


def test_solve_zero_driver_one_step():
    _, rep = solve(zero_driver(lambda x: x[:, 0] ** 2), BM, (0.0, 0.5), SolverConfig(n_paths=20_000, basis=DEG2))
    assert rep.converged and rep.iterations == 1
    assert rep.u == pytest.approx(1.25, abs=3 * rep.stderr_u + 1e-3)


@pytest.mark.parametrize(
    "model",
    [BM, JumpDiffusion(CLOCK, rate=2, jump_std=0.5), AlphaStable(CLOCK, 1.5)],
    ids=lambda m: m.kind,
)
def test_solve_linear_ode(model):
    ode = Driver(lambda t, x, y, z: -y, lambda x: np.ones(len(x)), 1.0, 0.0)
    it, rep = solve(ode, model, (0.0, 0.0), SolverConfig(n_paths=10_000))
    assert rep.u == pytest.approx(math.exp(-1), rel=0.02)
    assert np.allclose(it.Y[:, 10], math.exp(-0.5), rtol=0.02)


def test_solve_reports_nonconvergence():
    with pytest.raises(ConvergenceError) as info:
        solve(sin_cos(), BM, (0.0, 0.0), SolverConfig(n_paths=2000, max_iters=2))
    rep = info.value.report
    assert rep.iterations == 2 and not rep.converged and len(rep.ratios) == 1


def test_report_json(tmp_path):
    _, rep = solve(sin_cos(), BM, (0.0, 0.0), SolverConfig(n_paths=2000))
    write_json(tmp_path / "r.json", rep.to_dict())
    data = json.loads((tmp_path / "r.json").read_text())
    assert {"norms", "ratios", "clip_counts", "wall_time", "iterations"} <= data.keys()
    assert len(data["ratios"]) == len(data["norms"]) - 1


def _random_pair(ens, rng):
    """An iterate built by one Picard step from a random Lipschitz driver."""
    a, b, c = rng.normal(size=3)
    drv = Driver(
        lambda t, x, y, z: a * np.sin(b * x[:, 0] + c * t),
        lambda x: np.cos(a * x[:, 0]) + b,
        0.0,
        0.0,
    )
    return picard_step(BsdeIterate.zero(ens), ens, drv)


@pytest.mark.parametrize("seed", range(10))
def test_contraction_on_random_pairs(seed):
    rng = np.random.default_rng(seed)
    ens = sample_paths(BM, (0.0, rng.normal()), 10_000, seed=seed)
    drv = sin_cos()
    lam = drv.default_lambda
    p, q = _random_pair(ens, rng), _random_pair(ens, rng)
    before = weighted_norm(p - q, CLOCK, lam)
    after = weighted_norm(picard_step(p, ens, drv) - picard_step(q, ens, drv), CLOCK, lam)
    assert after / before <= 0.6


def test_fixed_point_consistency():
    cfg = SolverConfig(n_paths=5000, tol=1e-6)
    ens = sample_paths(BM, (0.0, 0.2), cfg.n_paths, seed=6)
    it, rep = solve_on_ensemble(sin_cos(), ens, cfg)
    again = picard_step(it, ens, sin_cos())
    assert weighted_norm(again - it, CLOCK, rep.lam) < cfg.tol


def test_restriction_consistency():
    cfg = SolverConfig(n_paths=5000, tol=1e-10)
    ens = sample_paths(BM, (0.0, 0.0), cfg.n_paths, seed=7)
    full, _ = solve_on_ensemble(sin_cos(), ens, cfg)
    k = CLOCK.index_of(0.5)
    part, _ = solve_on_ensemble(sin_cos(), ens.restrict(k), cfg)
    assert np.allclose(part.Y[:, k:], full.Y[:, k:], atol=1e-6)


# -- bracket densities --------------------------------------------------------


@pytest.fixture(scope="module")
def noise_ensemble():
    ens = sample_paths(BrownianDiffusion(CLOCK, sigma=0.8), (0.0, 0.1), 10_000, seed=8)
    dW = np.diff(ens.paths[:, :, 0], axis=1)
    other = np.random.default_rng(1).normal(size=dW.shape) * np.sqrt(CLOCK.increments)
    return ens, dW, other


def test_bracket_identical_increments(noise_ensemble):
    ens, dW, _ = noise_ensemble
    bd = estimate_bracket_density(dW, dW, ens, basis=DEG2)
    assert np.allclose(bd.mn, bd.mm) and np.allclose(bd.nn, bd.mm)
    assert np.allclose(bd.determinant(), 0.0, atol=1e-10)
    assert np.mean(bd.mm) == pytest.approx(0.64, rel=0.05)


def test_bracket_scaling(noise_ensemble):
    ens, dW, other = noise_ensemble
    dM = dW + 0.3 * other
    base = estimate_bracket_density(dM, dM, ens, basis=DEG2)
    scaled = estimate_bracket_density(dM, 2 * dM, ens, basis=DEG2)
    assert np.allclose(scaled.mm, base.mm)
    assert np.allclose(scaled.nn, 4 * base.mm)
    assert np.allclose(scaled.mn, 2 * base.mm)


def test_bracket_independent_cross_density(noise_ensemble):
    ens, dW, other = noise_ensemble
    bd = estimate_bracket_density(dW, other, ens, basis=RegressionBasis("polynomial", 0))
    prod = dW * other / CLOCK.increments
    se = prod.std(axis=0, ddof=1) / math.sqrt(prod.shape[0])
    assert np.all(np.abs(bd.mn[0] - 0.0) <= 3 * se * 1.5)  # 20 cells, Bonferroni-ish headroom


def test_bracket_flat_cells_singular():
    clock = Clock.from_table([0, 0.5, 1.0], [0, 0, 0.5], n_steps=4)
    ens = sample_paths(BrownianDiffusion(clock), (0.0, 0.0), 100, seed=0)
    dM = np.ones((100, 4))
    bd = estimate_bracket_density(dM, 2 * dM, ens)
    assert not bd.mm[:, :2].any()
    assert np.allclose(bd.singular, [2.0, 8.0, 4.0])


def test_psd_projection_and_sqrt_stability(rng):
    ens = sample_paths(BM, (0.0, 0.0), 400, seed=9)
    for _ in range(20):
        a = rng.normal(size=(400, 20)) * rng.uniform(0.1, 2)
        b = rng.uniform(-1, 1) * a + rng.normal(size=(400, 20)) * rng.uniform(0, 1)
        bd = estimate_bracket_density(a, b, ens, basis=RegressionBasis("polynomial", 4))
        assert np.all(bd.determinant() >= -1e-10)
        diff = bd.mm + bd.nn - 2 * bd.mn
        assert np.all((np.sqrt(bd.mm) - np.sqrt(bd.nn)) ** 2 <= diff + 1e-10)


# -- martingale diagnostic ------------------------------------------------------


def test_martingale_diagnostic_cases(noise_ensemble):
    ens, dW, _ = noise_ensemble
    zero = martingale_diagnostic(np.zeros_like(dW), ens)
    assert zero.passed and zero.familywise_z == 0 and zero.max_standardized == 0
    good = martingale_diagnostic(dW, ens)
    assert good.passed and good.familywise_z <= 3
    drift = martingale_diagnostic(np.tile(CLOCK.increments, (dW.shape[0], 1)), ens)
    assert not drift.passed
    biased = martingale_diagnostic(dW + 0.5 * ens.paths[:, :-1, 0] * CLOCK.increments, ens)
    assert not biased.passed

