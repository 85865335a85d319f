"""Levenberg-Marquardt core shared by windowed bundle adjustment and pose-graph
optimization.

The caller supplies residuals and a sparse Jacobian over a flat increment
vector, plus a retraction that applies an increment to its own state type.
Only steps that lower the cost are accepted, so the returned cost never
exceeds the initial one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Generic, TypeVar

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from src.slam.errors import SingularNormalEquations

log = logging.getLogger(__name__)

S = TypeVar("S")

LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e10
REL_TOL = 1e-8
ZERO_COST = 1e-20


@dataclass(frozen=True)
class LMResult(Generic[S]):
    state: S
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_steps: int


def _cost(r: np.ndarray) -> float:
    if not np.all(np.isfinite(r)):
        return np.inf
    return float(r @ r)


def levenberg_marquardt(
    state: S,
    residuals: Callable[[S], np.ndarray],
    jacobian: Callable[[S], sparse.spmatrix],
    retract: Callable[[S, np.ndarray], S],
    max_iters: int,
    lambda_init: float = 1e-3,
) -> LMResult[S]:
    """Minimize ||r(state)||² with Marquardt-scaled damping.

    Raises SingularNormalEquations when some parameter has no influence on
    the residuals, i.e. a zero on the diagonal of JᵀJ.
    """
    r = residuals(state)
    cost = initial = _cost(r)
    if not np.isfinite(cost):
        raise ValueError("initial residuals are not finite")
    lam = lambda_init
    accepted = 0
    it = 0
    while it < max_iters and cost > ZERO_COST:
        it += 1
        jac = sparse.csr_matrix(jacobian(state))
        hessian = (jac.T @ jac).tocsc()
        grad = jac.T @ r
        diag = hessian.diagonal()
        if np.any(diag <= 0):
            raise SingularNormalEquations(
                f"{int(np.sum(diag <= 0))} of {len(diag)} parameters are unconstrained"
            )

        improved = False
        while lam <= LAMBDA_MAX:
            damped = hessian + sparse.diags(lam * diag, format="csc")
            step = spsolve(damped, -grad)
            if not np.all(np.isfinite(step)):
                raise SingularNormalEquations("normal equations could not be solved")
            candidate = retract(state, step)
            r_new = residuals(candidate)
            new_cost = _cost(r_new)
            if new_cost < cost:
                improved = True
                break
            lam *= 10.0

        if not improved:
            log.debug("[optim] no descent step after %d iterations, cost %.6g", it, cost)
            break
        rel_change = (cost - new_cost) / cost
        state, r, cost = candidate, r_new, new_cost
        accepted += 1
        lam = max(lam / 10.0, LAMBDA_MIN)
        if rel_change < REL_TOL:
            break

    return LMResult(state, initial, cost, it, accepted)
