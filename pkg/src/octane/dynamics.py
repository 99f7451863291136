"""Rank-adaptive explicit Euler on the TT manifold.

One step is ``Y+ = T_r(Y + tau * T_s(N(Y)))``. The two truncations get
relative tolerances chosen so that the absolute errors stay below
``M_s * tau`` and ``M_r * tau**2``; both bounds are re-checked after
truncation because a rank cap can prevent the tolerance from being met.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .tt import RankCap, TtTensor, tt_add, tt_from_dense, tt_norm, tt_rank, tt_round, tt_scale, tt_to_dense

Rhs = Callable[[TtTensor], Union[TtTensor, np.ndarray]]

# relative slack on the post-hoc bound checks, covers SVD roundoff
BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class TruncationBudget:
    tau: float
    m_s: float
    m_r: float

    def __post_init__(self):
        for name in ("tau", "m_s", "m_r"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    @classmethod
    def decoupled(cls, tau: float) -> "TruncationBudget":
        """``M_s = 1/tau``, ``M_r = 1/tau**2``: both absolute bounds become 1."""
        return cls(tau, 1.0 / tau, 1.0 / tau**2)

    @property
    def inner_bound(self) -> float:
        return self.m_s * self.tau

    @property
    def outer_bound(self) -> float:
        return self.m_r * self.tau**2


@dataclass(frozen=True)
class StepRecord:
    inner_rank: tuple
    outer_rank: tuple
    inner_tolerance: float
    outer_tolerance: float
    inner_error: float
    outer_error: float
    bound_satisfied: bool


class StepFailure(RuntimeError):
    """A truncation bound could not be met within the rank cap."""

    def __init__(self, message: str, record: StepRecord, step: int | None = None, trajectory=None):
        super().__init__(message)
        self.record = record
        self.step = step
        self.trajectory = trajectory


def tol_inner(budget: TruncationBudget, rhs_norm: float) -> float:
    if rhs_norm < 0:
        raise ValueError("norm must be nonnegative")
    if rhs_norm == 0:
        return np.inf
    return budget.m_s * budget.tau / rhs_norm


def tol_outer(budget: TruncationBudget, state_norm: float) -> float:
    if state_norm < 0:
        raise ValueError("norm must be nonnegative")
    if state_norm == 0:
        return np.inf
    return budget.m_r * budget.tau**2 / state_norm


def _truncate_rhs(u, budget: TruncationBudget, cap: RankCap):
    if isinstance(u, TtTensor):
        norm = tt_norm(u)
        eps = tol_inner(budget, norm)
        us = tt_round(u, eps, cap)
        err = tt_norm(tt_add(u, tt_scale(us, -1.0)))
    else:
        u = np.asarray(u, dtype=np.float64)
        norm = float(np.linalg.norm(u))
        eps = tol_inner(budget, norm)
        us = tt_from_dense(u, eps, cap)
        err = float(np.linalg.norm(u - tt_to_dense(us)))
    return us, eps, err


def _euler_update(y: TtTensor, rhs: Rhs, budget: TruncationBudget, inner_cap: RankCap, outer_cap: RankCap,
                  strict: bool = True):
    u = rhs(y)
    dims = u.dims if isinstance(u, TtTensor) else np.shape(u)
    if tuple(dims) != y.dims:
        raise ValueError(f"right-hand side changed dims {y.dims} -> {tuple(dims)}")
    us, eps_s, err_s = _truncate_rhs(u, budget, inner_cap)
    w = tt_add(y, tt_scale(us, budget.tau))
    eps_r = tol_outer(budget, tt_norm(w))
    y_next = tt_round(w, eps_r, outer_cap)
    err_r = tt_norm(tt_add(w, tt_scale(y_next, -1.0)))
    ok = bool(
        err_s <= budget.inner_bound * (1 + BOUND_SLACK) and err_r <= budget.outer_bound * (1 + BOUND_SLACK)
    )
    record = StepRecord(tt_rank(us), tt_rank(y_next), eps_s, eps_r, err_s, err_r, ok)
    if not ok and strict:
        raise StepFailure(
            f"truncation bound violated at rank cap (inner {err_s:.3g} vs {budget.inner_bound:.3g}, "
            f"outer {err_r:.3g} vs {budget.outer_bound:.3g})",
            record,
        )
    return y_next, record


def euler_step_forward(y: TtTensor, rhs: Rhs, budget: TruncationBudget, inner_cap: RankCap = None,
                       outer_cap: RankCap = None, strict: bool = True):
    """Advance ``Y_j -> Y_{j+1}``. ``rhs`` may return a TT tensor or a dense array.

    If either bound cannot be met within the caps, raises StepFailure, or
    with ``strict=False`` keeps the capped result and flags the record.
    """
    return _euler_update(y, rhs, budget, inner_cap, outer_cap, strict)


def euler_step_reverse(z: TtTensor, rhs: Rhs, budget: TruncationBudget, inner_cap: RankCap = None,
                       outer_cap: RankCap = None, strict: bool = True):
    """Terminal-value step ``Z_{j+1} -> Z_j``.

    After the change of variable to reversed time this is the same update as
    the forward step, so both share one kernel.
    """
    return _euler_update(z, rhs, budget, inner_cap, outer_cap, strict)


@dataclass
class Trajectory:
    states: list
    ranks: list
    records: list = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(not r.bound_satisfied for r in self.records)


def _per_step(caps, n: int) -> list:
    if caps is None or np.isscalar(caps):
        return [caps] * n
    caps = list(caps)
    if len(caps) != n:
        raise ValueError(f"need {n} per-step caps, got {len(caps)}")
    return caps


def integrate(y0: TtTensor, rhs_sequence: Sequence[Rhs], budget: TruncationBudget, caps=None,
              reverse: bool = False, strict: bool = True) -> Trajectory:
    """Run one Euler step per entry of ``rhs_sequence``.

    ``caps`` is None, one integer cap for every step, or a per-step list of
    caps (integers or interior-rank vectors); a step's cap applies to both
    truncations. On failure the StepFailure carries the partial trajectory;
    with ``strict=False`` violating steps are kept and flagged instead.
    """
    step = euler_step_reverse if reverse else euler_step_forward
    step_caps = _per_step(caps, len(rhs_sequence))
    traj = Trajectory([y0], [tt_rank(y0)])
    y = y0
    for j, (rhs, cap) in enumerate(zip(rhs_sequence, step_caps)):
        try:
            y, rec = step(y, rhs, budget, cap, cap, strict)
        except StepFailure as exc:
            exc.step = j
            exc.trajectory = traj
            raise
        traj.states.append(y)
        traj.ranks.append(tt_rank(y))
        traj.records.append(rec)
    return traj
