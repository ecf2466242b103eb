"""GLM model families with label-independent Fisher information.

Every family here satisfies the contract that the Hessian of the negative
log-likelihood ``L(y | x, theta)`` in ``theta`` depends on ``(x, theta)``
only, never on the label ``y``.  That Hessian is what :meth:`ModelFamily.fisher`
returns, so Newton solvers and sampling-design optimization can both use it
before any labels are observed.

Conventions
-----------
* An example ``x`` is a 1-D float array of length ``d``; a parameter vector
  ``theta`` has length ``p = param_dim(d)``.
* Linear regression uses the squared-error loss ``L = (y - theta @ x)**2``
  without the Gaussian 1/2 factor.  Its Hessian is therefore ``2 x x^T`` and
  the score covariance ``E[grad grad^T] = 4 x x^T`` is **twice** the Hessian;
  ``score_covariance_factor`` records that ratio per family so downstream
  identity checks and rate predictions can stay convention-consistent.
* Binary labels live in ``{-1, +1}``; multiclass labels in ``{1, ..., K}``
  with class ``K`` the reference class carried implicitly (logit 0).
* Multiclass parameters are flattened class-major: ``theta[k*d:(k+1)*d]``
  is the coefficient block of class ``k + 1``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np


class DimensionMismatchError(ValueError):
    """Feature/parameter/label shapes are inconsistent."""


class LabelSpaceError(ValueError):
    """A label does not belong to the family's label space."""


def _sigmoid(u):
    # Stable on both tails.
    out = np.empty_like(u, dtype=float)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def _softplus(u):
    # log(1 + e^u) without overflow.
    return np.logaddexp(0.0, u)


def as_example(x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatchError(f"example must be a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("example has non-finite entries")
    if dim is not None and x.shape[0] != dim:
        raise DimensionMismatchError(f"example has length {x.shape[0]}, expected {dim}")
    return x


class ModelFamily(ABC):
    """Conditional model ``p(y | x, theta)`` with a label-free NLL Hessian.

    Subclasses implement the per-point operations (``nll``, ``nll_gradient``,
    ``fisher``, ``sample_labels``, ``predictive_gap``) plus vectorized sums
    used by the MLE solver.  All methods are pure functions of their inputs;
    instances hold no mutable state and are safe to share across threads.
    """

    name: str = "abstract"
    #: True when ``fisher(x, theta)`` does not depend on ``theta`` at all,
    #: which lets the two-stage protocol skip its coarse estimation stage.
    fisher_theta_independent: bool = False
    #: Ratio E[grad L grad L^T] / fisher.  1 for genuine negative
    #: log-likelihoods; 2 for the squared-error convention that drops the
    #: Gaussian 1/2 factor.
    score_covariance_factor: float = 1.0

    # ---- shapes and validation --------------------------------------

    @abstractmethod
    def param_dim(self, feature_dim: int) -> int:
        """Length of the parameter vector for ``d``-dimensional features."""

    @abstractmethod
    def validate_label(self, y) -> None:
        """Raise :class:`LabelSpaceError` if ``y`` is not a valid label."""

    def _check(self, x, theta):
        x = as_example(x)
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1:
            raise DimensionMismatchError("theta must be a 1-D vector")
        if theta.shape[0] != self.param_dim(x.shape[0]):
            raise DimensionMismatchError(
                f"theta has length {theta.shape[0]}, expected "
                f"{self.param_dim(x.shape[0])} for d={x.shape[0]}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        return x, theta

    # ---- per-point operations ---------------------------------------

    @abstractmethod
    def nll(self, x, y, theta) -> float:
        """Negative log-likelihood ``L(y | x, theta)``; convex in ``theta``."""

    @abstractmethod
    def nll_gradient(self, x, y, theta) -> np.ndarray:
        """Gradient of :meth:`nll` in ``theta``."""

    @abstractmethod
    def fisher(self, x, theta) -> np.ndarray:
        """The ``p x p`` Hessian of :meth:`nll`, independent of the label."""

    def sample_label(self, x, theta_star, rng):
        """Draw one label from ``p(y | x, theta_star)``.

        ``rng`` may be an integer seed or a ``numpy.random.Generator``.
        """
        return self.sample_labels(np.asarray(x, dtype=float)[None, :], theta_star, rng)[0]

    @abstractmethod
    def sample_labels(self, X, theta_star, rng) -> np.ndarray:
        """Draw one label per row of ``X`` from the conditional law."""

    @abstractmethod
    def predictive_gap(self, x, theta_star, theta) -> float:
        """``E_{Y ~ p(.|x, theta_star)}[L(Y|x,theta) - L(Y|x,theta_star)]``.

        Closed form, always >= 0; equals the KL divergence between the two
        predictive distributions for genuine NLL families.
        """

    # ---- vectorized sums used by the solver -------------------------

    @abstractmethod
    def total_nll(self, X, y, weights, theta) -> float:
        """Weighted empirical NLL ``sum_i w_i L(y_i | x_i, theta)``."""

    @abstractmethod
    def total_gradient(self, X, y, weights, theta) -> np.ndarray:
        """Gradient of :meth:`total_nll` in ``theta``."""

    @abstractmethod
    def total_hessian(self, X, weights, theta) -> np.ndarray:
        """Hessian of :meth:`total_nll`; label-free by Condition 1."""

    @abstractmethod
    def batch_fisher(self, X, theta) -> np.ndarray:
        """Stack of per-example Fisher matrices, shape ``(n, p, p)``."""

    def mean_predictive_gap(self, X, theta_star, theta) -> float:
        """Average :meth:`predictive_gap` over the rows of ``X``."""
        return float(
            np.mean([self.predictive_gap(x, theta_star, theta) for x in np.asarray(X, dtype=float)])
        )


class LinearRegressionFamily(ModelFamily):
    """Gaussian linear regression ``y = theta @ x + eta``, ``eta ~ N(0, 1)``.

    Uses the plain squared-error loss ``L = (y - theta @ x)**2`` (no 1/2, no
    normalizing constant), so ``fisher = 2 x x^T`` and the score covariance is
    ``4 x x^T = 2 * fisher``.  The Fisher matrix does not depend on ``theta``.
    """

    name = "linear"
    fisher_theta_independent = True
    score_covariance_factor = 2.0

    def param_dim(self, feature_dim: int) -> int:
        return feature_dim

    def validate_label(self, y) -> None:
        y = float(y)
        if not np.isfinite(y):
            raise LabelSpaceError("linear regression labels must be finite reals")

    def nll(self, x, y, theta) -> float:
        x, theta = self._check(x, theta)
        self.validate_label(y)
        r = float(y) - float(theta @ x)
        return r * r

    def nll_gradient(self, x, y, theta) -> np.ndarray:
        x, theta = self._check(x, theta)
        self.validate_label(y)
        r = float(y) - float(theta @ x)
        return -2.0 * r * x

    def fisher(self, x, theta) -> np.ndarray:
        x, theta = self._check(x, theta)
        return 2.0 * np.outer(x, x)

    def sample_labels(self, X, theta_star, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        X = np.asarray(X, dtype=float)
        theta_star = np.asarray(theta_star, dtype=float)
        return X @ theta_star + rng.standard_normal(X.shape[0])

    def predictive_gap(self, x, theta_star, theta) -> float:
        # E[(y - u)^2 - (y - u*)^2] = (u - u*)^2 under unit noise.
        x = as_example(x)
        delta = float((np.asarray(theta) - np.asarray(theta_star)) @ x)
        return delta * delta

    def total_nll(self, X, y, weights, theta) -> float:
        r = np.asarray(y, dtype=float) - X @ theta
        return float(weights @ (r * r))

    def total_gradient(self, X, y, weights, theta) -> np.ndarray:
        r = np.asarray(y, dtype=float) - X @ theta
        return -2.0 * (weights * r) @ X

    def total_hessian(self, X, weights, theta) -> np.ndarray:
        return 2.0 * (weights[:, None] * X).T @ X

    def batch_fisher(self, X, theta) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return 2.0 * np.einsum("ni,nj->nij", X, X)


class LogisticRegressionFamily(ModelFamily):
    """Binary logistic regression with labels in ``{-1, +1}``.

    ``L(y | x, theta) = log(1 + exp(-y * theta @ x))`` with Fisher matrix
    ``sigma(u) sigma(-u) x x^T`` where ``u = theta @ x``.  Computations route
    through ``logaddexp`` so they stay finite for ``|u| > 30``.
    """

    name = "logistic"

    def param_dim(self, feature_dim: int) -> int:
        return feature_dim

    def validate_label(self, y) -> None:
        if int(y) not in (-1, 1) or float(y) != int(y):
            raise LabelSpaceError(f"binary labels must be -1 or +1, got {y!r}")

    def nll(self, x, y, theta) -> float:
        x, theta = self._check(x, theta)
        self.validate_label(y)
        return float(np.logaddexp(0.0, -float(y) * (theta @ x)))

    def nll_gradient(self, x, y, theta) -> np.ndarray:
        x, theta = self._check(x, theta)
        self.validate_label(y)
        y = float(y)
        u = float(theta @ x)
        return -y * float(_sigmoid(np.array(-y * u))) * x

    def fisher(self, x, theta) -> np.ndarray:
        x, theta = self._check(x, theta)
        u = np.array(float(theta @ x))
        w = float(_sigmoid(u) * _sigmoid(-u))
        return w * np.outer(x, x)

    def sample_labels(self, X, theta_star, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        u = np.asarray(X, dtype=float) @ np.asarray(theta_star, dtype=float)
        return np.where(rng.random(u.shape[0]) < _sigmoid(u), 1.0, -1.0)

    def predictive_gap(self, x, theta_star, theta) -> float:
        # KL(Bern(sigma(u*)) || Bern(sigma(u))), written as an expected-NLL
        # difference so both terms use the same stable softplus.
        x = as_example(x)
        u = float(np.asarray(theta) @ x)
        u_star = float(np.asarray(theta_star) @ x)
        q = float(_sigmoid(np.array(u_star)))
        expected = lambda v: q * float(_softplus(np.array(-v))) + (1.0 - q) * float(
            _softplus(np.array(v))
        )
        return max(expected(u) - expected(u_star), 0.0)

    def total_nll(self, X, y, weights, theta) -> float:
        margins = np.asarray(y, dtype=float) * (X @ theta)
        return float(weights @ _softplus(-margins))

    def total_gradient(self, X, y, weights, theta) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        margins = y * (X @ theta)
        return -(weights * y * _sigmoid(-margins)) @ X

    def total_hessian(self, X, weights, theta) -> np.ndarray:
        u = X @ theta
        w = weights * _sigmoid(u) * _sigmoid(-u)
        return (w[:, None] * X).T @ X

    def batch_fisher(self, X, theta) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        u = X @ np.asarray(theta, dtype=float)
        w = _sigmoid(u) * _sigmoid(-u)
        return np.einsum("n,ni,nj->nij", w, X, X)


class MultinomialLogisticFamily(ModelFamily):
    """Multiclass logistic regression over classes ``{1, ..., K}``.

    Class ``K`` is the reference class with implicit logit 0; the parameter
    vector stacks the ``K - 1`` class blocks class-major, so ``p = (K-1)*d``.
    The Fisher matrix factors as ``F kron x x^T`` where
    ``F = diag(pi) - pi pi^T`` over the first ``K - 1`` class probabilities.
    """

    name = "multinomial"

    def __init__(self, n_classes: int):
        if n_classes < 2:
            raise ValueError("multinomial family needs at least 2 classes")
        self.n_classes = int(n_classes)

    def param_dim(self, feature_dim: int) -> int:
        return (self.n_classes - 1) * feature_dim

    def validate_label(self, y) -> None:
        if float(y) != int(y) or not 1 <= int(y) <= self.n_classes:
            raise LabelSpaceError(
                f"class labels must be integers in 1..{self.n_classes}, got {y!r}"
            )

    def _logits(self, X, theta):
        # (n, K) logits with the reference class pinned at 0.
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = X.shape[1]
        blocks = np.asarray(theta, dtype=float).reshape(self.n_classes - 1, d)
        logits = np.zeros((X.shape[0], self.n_classes))
        logits[:, :-1] = X @ blocks.T
        return logits

    @staticmethod
    def _log_softmax(logits):
        m = logits.max(axis=-1, keepdims=True)
        shifted = logits - m
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def class_probabilities(self, x, theta) -> np.ndarray:
        """Probabilities of classes ``1..K`` at a single example."""
        x, theta = self._check(x, theta)
        return np.exp(self._log_softmax(self._logits(x[None, :], theta)))[0]

    def nll(self, x, y, theta) -> float:
        x, theta = self._check(x, theta)
        self.validate_label(y)
        logp = self._log_softmax(self._logits(x[None, :], theta))[0]
        return -float(logp[int(y) - 1])

    def nll_gradient(self, x, y, theta) -> np.ndarray:
        x, theta = self._check(x, theta)
        self.validate_label(y)
        probs = self.class_probabilities(x, theta)[:-1]
        onehot = np.zeros(self.n_classes - 1)
        if int(y) < self.n_classes:
            onehot[int(y) - 1] = 1.0
        return np.kron(probs - onehot, x)

    def _class_cov(self, probs):
        # F = diag(pi) - pi pi^T over the first K-1 classes.
        head = probs[:-1]
        return np.diag(head) - np.outer(head, head)

    def fisher(self, x, theta) -> np.ndarray:
        x, theta = self._check(x, theta)
        F = self._class_cov(self.class_probabilities(x, theta))
        return np.kron(F, np.outer(x, x))

    def sample_labels(self, X, theta_star, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        logp = self._log_softmax(self._logits(X, theta_star))
        cdf = np.cumsum(np.exp(logp), axis=1)
        draws = rng.random(cdf.shape[0])
        return (cdf < draws[:, None]).sum(axis=1) + 1

    def predictive_gap(self, x, theta_star, theta) -> float:
        x = as_example(x)
        logp_star = self._log_softmax(self._logits(x[None, :], theta_star))[0]
        logp = self._log_softmax(self._logits(x[None, :], theta))[0]
        p_star = np.exp(logp_star)
        return max(float(p_star @ (logp_star - logp)), 0.0)

    def total_nll(self, X, y, weights, theta) -> float:
        logp = self._log_softmax(self._logits(X, theta))
        idx = np.asarray(y, dtype=int) - 1
        return -float(weights @ logp[np.arange(len(idx)), idx])

    def total_gradient(self, X, y, weights, theta) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        probs = np.exp(self._log_softmax(self._logits(X, theta)))[:, :-1]
        idx = np.asarray(y, dtype=int) - 1
        onehot = np.zeros_like(probs)
        rows = idx < self.n_classes - 1
        onehot[np.arange(len(idx))[rows], idx[rows]] = 1.0
        return np.einsum("n,nk,ni->ki", weights, probs - onehot, X).ravel()

    def total_hessian(self, X, weights, theta) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        probs = np.exp(self._log_softmax(self._logits(X, theta)))[:, :-1]
        k = self.n_classes - 1
        d = X.shape[1]
        F = np.einsum("n,nk,nl->nkl", weights, probs, probs)
        F *= -1.0
        F[:, np.arange(k), np.arange(k)] += weights[:, None] * probs
        H = np.einsum("nkl,ni,nj->kilj", F, X, X)
        return H.reshape(k * d, k * d)

    def batch_fisher(self, X, theta) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        probs = np.exp(self._log_softmax(self._logits(X, theta)))[:, :-1]
        k = self.n_classes - 1
        d = X.shape[1]
        F = -np.einsum("nk,nl->nkl", probs, probs)
        F[:, np.arange(k), np.arange(k)] += probs
        out = np.einsum("nkl,ni,nj->nkilj", F, X, X)
        return out.reshape(X.shape[0], k * d, k * d)


def get_family(name: str, n_classes: int = 3) -> ModelFamily:
    """Resolve a family by CLI-facing name."""
    if name == "linear":
        return LinearRegressionFamily()
    if name == "logistic":
        return LogisticRegressionFamily()
    if name == "multinomial":
        return MultinomialLogisticFamily(n_classes)
    raise ValueError(f"unknown family {name!r}; expected linear|logistic|multinomial")
