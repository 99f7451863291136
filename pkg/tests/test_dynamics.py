from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from octane.dynamics import (
    StepFailure,
    TruncationBudget,
    euler_step_forward,
    euler_step_reverse,
    integrate,
    tol_inner,
    tol_outer,
)
from octane.tt import tt_from_dense, tt_norm, tt_rank, tt_to_dense



def tight(tau: float, bound: float = 1e-10) -> TruncationBudget:
    """Both absolute truncation bounds equal ``bound``: no truncation above roundoff."""
    return TruncationBudget(tau, bound / tau, bound / tau**2)


TINY = tight(0.1)


def test_budget_bounds_and_decoupled():
    b = TruncationBudget(0.5, 3.0, 8.0)
    assert b.inner_bound == pytest.approx(1.5)
    assert b.outer_bound == pytest.approx(2.0)
    d = TruncationBudget.decoupled(0.25)
    assert d.inner_bound == pytest.approx(1.0) and d.outer_bound == pytest.approx(1.0)
    for bad in ((0, 1, 1), (1, -1, 1), (1, 1, float("inf"))):
        with pytest.raises(ValueError):
            TruncationBudget(*bad)


@given(st.floats(1e-3, 2), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-6, 1e6))
def test_tolerances_times_norm_give_absolute_bounds(tau, ms, mr, norm):
    b = TruncationBudget(tau, ms, mr)
    assert tol_inner(b, norm) * norm == pytest.approx(ms * tau)
    assert tol_outer(b, norm) * norm == pytest.approx(mr * tau**2)


def test_zero_norm_gives_infinite_tolerance():
    assert tol_inner(TINY, 0.0) == math.inf
    assert tol_outer(TINY, 0.0) == math.inf


def test_step_without_truncation_is_dense_euler():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((4, 5, 3))
    k = rng.standard_normal((4, 4))
    rhs = lambda t: np.tanh(np.einsum("ij,jkl->ikl", k, tt_to_dense(t)))
    out, rec = euler_step_forward(tt_from_dense(y), rhs, TINY)
    expect = y + 0.1 * np.tanh(np.einsum("ij,jkl->ikl", k, y))
    assert np.allclose(tt_to_dense(out), expect, atol=1e-12)
    assert rec.bound_satisfied


@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.1, 10.0))
def test_recorded_errors_respect_bounds_without_caps(seed, tau, m):
    rng = np.random.default_rng(seed)
    y = tt_from_dense(rng.standard_normal((5, 4, 3)))
    b = TruncationBudget(tau, m, m)
    out, rec = euler_step_forward(y, lambda t: -tt_to_dense(t) + rng.standard_normal((5, 4, 3)), b)
    assert rec.bound_satisfied
    assert rec.inner_error <= b.inner_bound * (1 + 1e-9)
    assert rec.outer_error <= b.outer_bound * (1 + 1e-9)


def test_cap_violation_strict_and_lenient():
    rng = np.random.default_rng(1)
    y = tt_from_dense(rng.standard_normal((6, 6, 6)))
    rhs = lambda t: rng.standard_normal((6, 6, 6))
    with pytest.raises(StepFailure) as info:
        euler_step_forward(y, rhs, TINY, 1, 1)
    assert not info.value.record.bound_satisfied
    out, rec = euler_step_forward(y, rhs, TINY, 1, 1, strict=False)
    assert not rec.bound_satisfied and tt_rank(out) == (1, 1)


def test_integrate_failure_reports_step_and_partial_trajectory():
    rng = np.random.default_rng(2)
    y = tt_from_dense(rng.standard_normal((5, 5, 5)))
    rhs = lambda t: rng.standard_normal((5, 5, 5))
    with pytest.raises(StepFailure) as info:
        integrate(y, [rhs] * 3, TINY, caps=[None, None, 1])
    assert info.value.step == 2
    assert len(info.value.trajectory.states) == 3
    traj = integrate(y, [rhs] * 3, TINY, caps=[None, None, 1], strict=False)
    assert traj.violations == 1 and len(traj.ranks) == 4


def test_reverse_step_matches_forward_kernel():
    rng = np.random.default_rng(3)
    z = tt_from_dense(rng.standard_normal((3, 4, 2)))
    rhs = lambda t: 0.5 * tt_to_dense(t)
    a, _ = euler_step_reverse(z, rhs, TINY)
    b, _ = euler_step_forward(z, rhs, TINY)
    assert np.allclose(tt_to_dense(a), tt_to_dense(b))


def test_zero_rhs_keeps_state_and_rank():
    y = tt_from_dense(np.random.default_rng(4).standard_normal((4, 4, 4)))
    out, rec = euler_step_forward(y, lambda t: np.zeros((4, 4, 4)), TINY)
    assert np.allclose(tt_to_dense(out), tt_to_dense(y), atol=1e-13)
    assert rec.inner_rank == (1, 1)


def test_truncation_lowers_rank_when_budget_is_loose():
    rng = np.random.default_rng(5)
    base = np.einsum("i,j,k->ijk", *(rng.standard_normal(n) for n in (6, 6, 6)))
    y = tt_from_dense(base + 1e-4 * rng.standard_normal((6, 6, 6)))
    out, _ = euler_step_forward(y, lambda t: np.zeros((6, 6, 6)), TruncationBudget(0.1, 1.0, 1.0))
    assert tt_rank(out) == (1, 1)


def test_rhs_dimension_change_rejected():
    y = tt_from_dense(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        euler_step_forward(y, lambda t: np.ones((2, 2, 3)), TINY)


def test_euler_global_error_first_order():
    errs, ns = [], [8, 16, 32, 64]
    y0 = np.ones((2, 2, 2))
    for n in ns:
        traj = integrate(tt_from_dense(y0), [lambda t: -tt_to_dense(t)] * n,
                         tight(1.0 / n))
        errs.append(abs(tt_to_dense(traj.states[-1])[0, 0, 0] - math.exp(-1)))
    order = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert 0.9 < order < 1.1
    assert np.isclose(tt_norm(traj.states[-1]), math.sqrt(8) * (1 - 1 / 64) ** 64)
