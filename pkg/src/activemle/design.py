"""Optimal sampling-design solver for label-efficient estimation.

Given per-example Fisher matrices ``I_i`` and their pool average ``M``, the
solver picks weights ``a`` minimizing ``trace(S(a)^{-1} M)`` with
``S(a) = sum_i a_i I_i`` over the polytope ``{0 <= a_i <= cap, sum a_i = b}``.
Normalizing ``a / b`` yields the sampling distribution whose Fisher aggregate
best matches the pool for a label budget of ``b`` draws.

The solver is a pairwise-exchange Frank-Wolfe method (the away-step family):
each iteration moves mass from the worst in-support coordinate to the best
coordinate with room, with an exact 1-D line search.  The Frank-Wolfe gap
``<grad f(a), a - s>`` over the polytope certifies suboptimality and drives
the stopping rule.  An equivalent semidefinite program built from the
eigendecomposition of ``M`` and Schur-complement blocks is exposed as a
verification structure and export format (:class:`SdpForm`), not as the
execution path.

With ``cap = 1`` this is exactly the budgeted program of the two-stage
protocol's design step; ``cap = None`` drops the box and optimizes over the
(scaled) simplex, i.e. over all sampling distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .linalg import check_psd, min_eigenvalue, solve_psd, symmetrize, SingularMatrixError

DEFAULT_GAP_TOL = 1e-4
DEFAULT_MAX_ITER = 5000
RIDGE_SCALE = 1e-10
WEIGHT_ATOL = 1e-9


class InfeasibleDesignError(ValueError):
    """The weight polytope is empty for the requested budget."""


@dataclass
class FisherAggregate:
    """A pool- or design-averaged Fisher matrix with its smallest eigenvalue."""

    matrix: np.ndarray
    min_eig: float

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "FisherAggregate":
        matrix = symmetrize(np.asarray(matrix, dtype=float))
        return cls(matrix=matrix, min_eig=min_eigenvalue(matrix))

    @classmethod
    def from_stack(cls, fishers: np.ndarray, probs: np.ndarray | None = None) -> "FisherAggregate":
        fishers = np.asarray(fishers, dtype=float)
        if probs is None:
            return cls.from_matrix(fishers.mean(axis=0))
        return cls.from_matrix(np.einsum("n,nij->ij", np.asarray(probs, dtype=float), fishers))


@dataclass
class DesignProblem:
    """Inputs of the design optimization.

    ``fisher_per_example`` stacks the ``n`` per-example Fisher matrices at the
    working parameter; ``target`` must equal their unweighted average (the
    pool aggregate) to 1e-10 relative.  ``box_cap`` is the per-example weight
    ceiling: 1.0 reproduces the budgeted program (feasible only when
    ``budget <= n``), ``None`` removes the box.
    """

    fisher_per_example: np.ndarray
    budget: float
    target: FisherAggregate | None = None
    box_cap: float | None = 1.0

    def __post_init__(self):
        self.fisher_per_example = np.asarray(self.fisher_per_example, dtype=float)
        if self.fisher_per_example.ndim != 3:
            raise ValueError("fisher_per_example must have shape (n, p, p)")
        if self.budget <= 0:
            raise InfeasibleDesignError("budget must be positive")
        mean = self.fisher_per_example.mean(axis=0)
        if self.target is None:
            self.target = FisherAggregate.from_matrix(mean)
        else:
            scale = max(float(np.abs(self.target.matrix).max(initial=0.0)), 1e-300)
            if float(np.abs(self.target.matrix - mean).max(initial=0.0)) > 1e-10 * scale:
                raise ValueError(
                    "target does not equal the average of fisher_per_example"
                )
        if self.box_cap is not None:
            if self.box_cap <= 0:
                raise ValueError("box_cap must be positive or None")
            if self.budget > self.n_examples * self.box_cap * (1 + 1e-12):
                raise InfeasibleDesignError(
                    f"budget {self.budget} exceeds n * cap = "
                    f"{self.n_examples * self.box_cap}; the weight polytope is empty"
                )

    @property
    def n_examples(self) -> int:
        return self.fisher_per_example.shape[0]

    @property
    def param_dim(self) -> int:
        return self.fisher_per_example.shape[1]

    def uniform_weights(self) -> np.ndarray:
        return np.full(self.n_examples, self.budget / self.n_examples)


@dataclass
class Design:
    """Solver output: feasible weights plus optimality certificates.

    ``objective`` is ``trace(S(weights)^{-1} target)`` at the returned
    weights.  ``rate_constant`` is the same trace evaluated at the normalized
    sampling distribution ``weights / budget`` (= ``budget * objective``),
    which is the quantity the error-rate theory bounds.
    """

    weights: np.ndarray
    objective: float
    duality_gap: float
    budget: float
    rate_constant: float
    iterations: int = 0
    converged: bool = True
    ridge_events: int = 0

    def sampling_distribution(self) -> np.ndarray:
        return self.weights / self.budget

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "objective": self.objective,
            "duality_gap": self.duality_gap,
            "budget": self.budget,
            "rate_constant": self.rate_constant,
            "iterations": self.iterations,
            "converged": self.converged,
            "ridge_events": self.ridge_events,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Design":
        payload = dict(payload)
        payload["weights"] = np.asarray(payload["weights"], dtype=float)
        return cls(**payload)


def _scatter(fishers: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.einsum("n,nij->ij", weights, fishers)


def design_objective(weights, problem: DesignProblem) -> float:
    """``trace(S(a)^{-1} target)``; raises if ``S(a)`` is singular."""
    weights = np.asarray(weights, dtype=float)
    S = _scatter(problem.fisher_per_example, weights)
    return float(np.trace(solve_psd(S, problem.target.matrix, what="S(a)")))


def design_gradient(weights, problem: DesignProblem) -> np.ndarray:
    """Exact gradient ``d/da_i trace(S^{-1} M) = -trace(S^{-1} I_i S^{-1} M)``."""
    weights = np.asarray(weights, dtype=float)
    S = _scatter(problem.fisher_per_example, weights)
    inner = solve_psd(S, solve_psd(S, problem.target.matrix, what="S(a)").T, what="S(a)")
    return -np.einsum("nij,ij->n", problem.fisher_per_example, symmetrize(inner))


class _Objective:
    """Trace objective with a ridge fallback for momentarily singular S."""

    def __init__(self, problem: DesignProblem):
        self.fishers = problem.fisher_per_example
        self.target = problem.target.matrix
        self.p = problem.param_dim
        self.ridge_events = 0

    def _solve(self, S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        try:
            return solve_psd(S, rhs, what="S(a)")
        except SingularMatrixError:
            self.ridge_events += 1
            ridge = RIDGE_SCALE * max(float(np.trace(S)), 1.0) / self.p
            return solve_psd(S + ridge * np.eye(self.p), rhs, what="ridged S(a)")

    def value(self, S: np.ndarray) -> float:
        return float(np.trace(self._solve(S, self.target)))

    def value_and_gradient(self, S: np.ndarray) -> tuple[float, np.ndarray]:
        SinvM = self._solve(S, self.target)
        inner = symmetrize(self._solve(S, SinvM.T))
        grad = -np.einsum("nij,ij->n", self.fishers, inner)
        return float(np.trace(SinvM)), grad

    def directional_derivative(self, S: np.ndarray, D: np.ndarray) -> float:
        SinvM = self._solve(S, self.target)
        inner = symmetrize(self._solve(S, SinvM.T))
        return -float(np.einsum("ij,ij->", D, inner))


def _greedy_vertex(grad: np.ndarray, budget: float, cap: float | None) -> np.ndarray:
    """Linear minimization oracle over the polytope.

    Fills the lowest-gradient coordinates up to ``cap`` until the budget is
    spent; ties break toward the lowest index (stable sort).
    """
    s = np.zeros_like(grad)
    if cap is None:
        s[int(np.argmin(grad))] = budget
        return s
    order = np.argsort(grad, kind="stable")
    remaining = budget
    for idx in order:
        take = min(cap, remaining)
        s[idx] = take
        remaining -= take
        if remaining <= 0:
            break
    return s


def solve_design(
    problem: DesignProblem,
    tol: float = DEFAULT_GAP_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> Design:
    """Minimize the design objective over the weight polytope.

    Stops when the relative Frank-Wolfe gap drops below ``tol`` (default
    1e-4) or after ``max_iter`` iterations, returning the best iterate with
    the achieved gap either way.  The start point is the uniform feasible
    vector, so the objective never exceeds its uniform-weights value.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    cap = problem.box_cap
    budget = float(problem.budget)
    n = problem.n_examples
    fishers = problem.fisher_per_example
    obj = _Objective(problem)

    a = problem.uniform_weights()
    S = _scatter(fishers, a)
    f, grad = obj.value_and_gradient(S)

    iterations = 0
    gap = np.inf
    converged = False
    for iterations in range(1, max_iter + 1):
        vertex = _greedy_vertex(grad, budget, cap)
        gap = float(grad @ (a - vertex))
        if gap <= tol * max(abs(f), 1e-300):
            converged = True
            iterations -= 1
            break

        # Pairwise exchange: move mass from the worst supported coordinate
        # to the best coordinate with room.
        room = a < (budget if cap is None else cap) - WEIGHT_ATOL
        support = a > WEIGHT_ATOL
        if not room.any() or not support.any():
            break
        masked_to = np.where(room, grad, np.inf)
        masked_from = np.where(support, grad, -np.inf)
        i_to = int(np.argmin(masked_to))
        i_from = int(np.argmax(masked_from))
        if grad[i_from] - grad[i_to] <= 0:
            break
        gamma_max = a[i_from]
        if cap is not None:
            gamma_max = min(gamma_max, cap - a[i_to])
        if gamma_max <= 0:
            break

        D = fishers[i_to] - fishers[i_from]
        slope_end = obj.directional_derivative(S + gamma_max * D, D)
        if slope_end <= 0:
            gamma = gamma_max
        else:
            gamma = brentq(
                lambda g: obj.directional_derivative(S + g * D, D),
                0.0,
                gamma_max,
                xtol=1e-14 * max(gamma_max, 1.0),
            )
        if gamma <= 0:
            break
        a[i_to] += gamma
        a[i_from] -= gamma
        if a[i_from] < WEIGHT_ATOL:
            a[i_from] = 0.0
        # Periodic recompute keeps the incremental scatter matrix honest.
        if iterations % 100 == 0:
            S = _scatter(fishers, a)
        else:
            S = S + gamma * D
        f, grad = obj.value_and_gradient(S)

    a = np.clip(a, 0.0, None)
    a *= budget / a.sum()
    S = _scatter(fishers, a)
    f, grad = obj.value_and_gradient(S)
    vertex = _greedy_vertex(grad, budget, cap)
    gap = float(grad @ (a - vertex))
    return Design(
        weights=a,
        objective=f,
        duality_gap=gap,
        budget=budget,
        rate_constant=budget * f,
        iterations=iterations,
        converged=converged or gap <= tol * max(abs(f), 1e-300),
        ridge_events=obj.ridge_events,
    )


@dataclass
class SdpForm:
    """Semidefinite reformulation of the design program, for verification.

    With ``M = sum_j sigma_j v_j v_j^T`` the eigendecomposition of the target,
    the objective ``trace(S^{-1} M)`` equals ``sum_j sigma_j c_j`` whenever
    ``c_j = v_j^T S^{-1} v_j``, and the Schur-complement blocks
    ``[[c_j, v_j^T], [v_j, S]]`` are PSD exactly when ``S >= 0`` and
    ``c_j >= v_j^T S^{-1} v_j``.
    """

    sigma: np.ndarray
    vectors: np.ndarray  # column j is v_j
    fisher_per_example: np.ndarray
    budget: float

    def reconstruction(self) -> np.ndarray:
        return (self.vectors * self.sigma) @ self.vectors.T

    def scatter(self, weights) -> np.ndarray:
        return _scatter(self.fisher_per_example, np.asarray(weights, dtype=float))

    def certificates(self, weights) -> np.ndarray:
        """The tight ``c_j = v_j^T S(a)^{-1} v_j`` for feasible weights."""
        S = self.scatter(weights)
        sol = solve_psd(S, self.vectors, what="S(a)")
        return np.einsum("ij,ij->j", self.vectors, sol)

    def schur_blocks(self, weights, certificates=None) -> np.ndarray:
        S = self.scatter(weights)
        if certificates is None:
            certificates = self.certificates(weights)
        p = S.shape[0]
        blocks = np.empty((len(certificates), p + 1, p + 1))
        for j, c in enumerate(certificates):
            blocks[j, 0, 0] = c
            blocks[j, 0, 1:] = self.vectors[:, j]
            blocks[j, 1:, 0] = self.vectors[:, j]
            blocks[j, 1:, 1:] = S
        return blocks

    def objective_value(self, certificates) -> float:
        return float(self.sigma @ np.asarray(certificates, dtype=float))

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma.tolist(),
            "v": self.vectors.T.tolist(),  # row j is v_j
            "fisher": self.fisher_per_example.tolist(),
            "budget": self.budget,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SdpForm":
        return cls(
            sigma=np.asarray(payload["sigma"], dtype=float),
            vectors=np.asarray(payload["v"], dtype=float).T,
            fisher_per_example=np.asarray(payload["fisher"], dtype=float),
            budget=float(payload["budget"]),
        )


def build_sdp_form(problem: DesignProblem) -> SdpForm:
    """Assemble the SDP data from the target's eigendecomposition."""
    check_psd(problem.target.matrix, sym_rtol=1e-8, eig_rtol=1e-8)
    eigvals, eigvecs = np.linalg.eigh(symmetrize(problem.target.matrix))
    order = np.argsort(eigvals)[::-1]
    return SdpForm(
        sigma=np.clip(eigvals[order], 0.0, None),
        vectors=eigvecs[:, order],
        fisher_per_example=problem.fisher_per_example,
        budget=float(problem.budget),
    )


def mixing_coefficient(m2: float) -> float:
    """The mixing weight ``alpha = 1 - m2^{-1/6}`` toward the solved design."""
    return 1.0 - float(m2) ** (-1.0 / 6.0)


def mix_with_uniform(design: Design | np.ndarray, m2: int) -> np.ndarray:
    """Blend the design's sampling distribution with the uniform one.

    Returns ``alpha * (a / m2) + (1 - alpha) / n`` with
    ``alpha = 1 - m2^{-1/6}``; the uniform floor keeps every example's
    probability at least ``(1 - alpha) / n``.
    """
    weights = design.weights if isinstance(design, Design) else np.asarray(design, dtype=float)
    if m2 <= 0:
        raise ValueError("m2 must be positive")
    alpha = mixing_coefficient(m2)
    n = weights.shape[0]
    uniform = 1.0 / n
    # Centered form: an exactly uniform design maps to the exactly uniform
    # distribution, so the degenerate budget m2 = n reduces bitwise to
    # passive sampling.
    return uniform + alpha * (weights / float(m2) - uniform)
