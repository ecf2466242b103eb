"""Weighted maximum-likelihood fitting by damped projected Newton descent.

All family NLLs are convex with closed-form label-free Hessians, so Newton
with an Armijo backtracking line search is the natural solver.  The parameter
box (a compact parameter space) is honored by clipping each trial point;
interior optima are unaffected.  A tiny ridge is added whenever the Hessian
is numerically rank deficient (separable logistic data, unobserved
directions), reported through ``hessian_min_eig`` rather than raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .families import ModelFamily
from .linalg import min_eigenvalue, solve_psd, SingularMatrixError

ARMIJO_C = 1e-4
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
RIDGE_EIG_THRESHOLD = 1e-10
RIDGE_SCALE = 1e-8


@dataclass
class ParamSpace:
    """Box constraints on the parameter vector (bounds may be +-inf)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("bounds must be 1-D vectors of equal length")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @classmethod
    def unbounded(cls, dim: int) -> "ParamSpace":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def centered_box(cls, dim: int, half_width: float) -> "ParamSpace":
        return cls(np.full(dim, -half_width), np.full(dim, half_width))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, theta: np.ndarray) -> bool:
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def clip(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def on_boundary(self, theta: np.ndarray, atol: float = 1e-12) -> bool:
        return bool(
            np.any(theta <= self.lower + atol) or np.any(theta >= self.upper - atol)
        )


@dataclass
class LabeledSet:
    """Weighted labeled examples ``(x_i, y_i, w_i)`` with ``w_i >= 0``."""

    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels)
        if self.weights is None:
            self.weights = np.ones(self.features.shape[0])
        self.weights = np.asarray(self.weights, dtype=float)
        if self.features.shape[0] == 0:
            raise ValueError("labeled set is empty")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels and features disagree in length")
        if self.weights.shape[0] != self.features.shape[0]:
            raise ValueError("weights and features disagree in length")
        if np.any(self.weights < 0) or self.weights.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive total")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class MleResult:
    """Outcome of a weighted MLE fit.

    ``converged`` is True only when the raw gradient norm met the tolerance;
    a fit stalled on the parameter-space boundary reports
    ``converged=False, on_boundary=True`` instead of failing.
    """

    theta_hat: np.ndarray
    iterations: int
    final_gradient_norm: float
    hessian_min_eig: float
    converged: bool
    on_boundary: bool = False
    nll_path: list = field(default_factory=list, repr=False)


def fit_mle(
    family: ModelFamily,
    data: LabeledSet,
    init: np.ndarray | None = None,
    space: ParamSpace | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> MleResult:
    """Minimize the weighted empirical NLL over a parameter box.

    Damped Newton with Armijo backtracking (c = 1e-4, step halving) and
    coordinate clipping onto ``space`` after each trial step.  A ridge of
    ``1e-8 * trace(H) / p`` is added when the Hessian's smallest eigenvalue
    falls below 1e-10.

    Returns the best iterate with diagnostics; non-convergence within
    ``max_iter`` is reported via ``converged=False``, never raised.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = family.param_dim(data.dim)
    if space is None:
        space = ParamSpace.unbounded(p)
    if space.dim != p:
        raise ValueError(f"parameter space has dim {space.dim}, expected {p}")
    theta = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    if theta.shape != (p,):
        raise ValueError(f"init has shape {theta.shape}, expected ({p},)")
    if not space.contains(theta):
        raise ValueError("init lies outside the parameter space")

    X, y, w = data.features, data.labels, data.weights
    f = family.total_nll(X, y, w, theta)
    path = [f]
    grad = family.total_gradient(X, y, w, theta)
    grad_norm = float(np.linalg.norm(grad))
    min_eig = np.nan
    iterations = 0

    for iterations in range(1, max_iter + 1):
        if grad_norm <= tol:
            iterations -= 1
            break
        hessian = family.total_hessian(X, w, theta)
        min_eig = min_eigenvalue(hessian)
        if min_eig < RIDGE_EIG_THRESHOLD:
            ridge = RIDGE_SCALE * max(np.trace(hessian), 1.0) / p
            hessian = hessian + ridge * np.eye(p)
        try:
            direction = solve_psd(hessian, -grad, what="Newton Hessian")
        except SingularMatrixError:
            # Ridge above should prevent this; fall back to steepest descent.
            direction = -grad

        step = 1.0
        accepted = False
        for _ in range(60):
            candidate = space.clip(theta + step * direction)
            move = candidate - theta
            if float(np.abs(move).max(initial=0.0)) < 1e-15:
                break
            f_new = family.total_nll(X, y, w, candidate)
            if f_new <= f + ARMIJO_C * float(grad @ move):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        theta, f = candidate, f_new
        path.append(f)
        grad = family.total_gradient(X, y, w, theta)
        grad_norm = float(np.linalg.norm(grad))

    if np.isnan(min_eig):
        hessian = family.total_hessian(X, w, theta)
        min_eig = min_eigenvalue(hessian)
    return MleResult(
        theta_hat=theta,
        iterations=iterations,
        final_gradient_norm=grad_norm,
        hessian_min_eig=float(min_eig),
        converged=grad_norm <= tol,
        on_boundary=space.on_boundary(theta),
        nll_path=path,
    )
