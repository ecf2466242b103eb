"""Monte-Carlo experiment runner for the active-vs-passive comparison.

A :class:`Scenario` describes a synthetic pool, a ground-truth parameter, and
trial/budget settings.  :func:`run_scenario` runs paired active and passive
arms with common random numbers, measures the exact expected log-likelihood
error of each fit over the pool (no label-resampled evaluation noise), and
aggregates the per-trial results into an :class:`ExperimentReport` together
with the rate constants that the theory says should govern them.

Unit conventions: the reported error is ``L_U(theta_hat) - L_U(theta_star)``
in the family's own loss units.  Its leading-order mean is
``(score_covariance_factor / 2) * rate_constant / m`` — see
:func:`rate_unit_factor`; the factor is 1 for the squared-error linear family
and 1/2 for genuine NLL families.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .active import (
    ActiveConfig,
    SyntheticOracle,
    UnlabeledPool,
    active_set_select,
    passive_baseline,
)
from .families import ModelFamily, get_family
from .linalg import solve_psd
from .mle import ParamSpace

DEFAULT_TRIALS = 200


class DiagnosticsError(RuntimeError):
    """Pool regularity diagnostics failed (rank-deficient pool Fisher)."""


# ------------------------------------------------------------------ #
# Pool generators
# ------------------------------------------------------------------ #


def e1ej_pool(d: int, n: int) -> UnlabeledPool:
    """Spiked basis pool: mostly ``e_1``, a thin ``1/d^2`` share of each
    other basis direction.

    Per-direction counts are ``round(n / d^2)`` (half-to-even, floored at 1)
    with ``e_1`` absorbing the remainder, so small ``n / d^2`` ratios round
    deterministically.
    """
    rare = max(1, round(n / d**2))
    lead = n - (d - 1) * rare
    if lead < 1:
        raise ValueError(f"pool size {n} too small for the spiked pool at d={d}")
    rows = np.zeros((n, d))
    rows[:lead, 0] = 1.0
    row = lead
    for j in range(1, d):
        rows[row : row + rare, j] = 1.0
        row += rare
    return UnlabeledPool(rows)


def gaussian_pool(d: int, n: int, scale: float | None = None, seed: int = 0) -> UnlabeledPool:
    """Isotropic Gaussian pool with per-coordinate scale ``1/sqrt(d)`` by
    default, keeping feature norms bounded near 1."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(104729,)))
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    return UnlabeledPool(scale * rng.standard_normal((n, d)))


def identical_pool(d: int, n: int, values=None) -> UnlabeledPool:
    """Degenerate pool of ``n`` copies of one row; useful for rank tests."""
    row = np.ones(d) if values is None else np.asarray(values, dtype=float)
    return UnlabeledPool(np.tile(row, (n, 1)))


POOL_GENERATORS = {"e1ej": e1ej_pool, "gaussian": gaussian_pool, "identical": identical_pool}


def make_pool(spec: dict, seed: int = 0) -> UnlabeledPool:
    """Build a pool from its JSON description ``{generator, d, n, ...}``."""
    spec = dict(spec)
    name = spec.pop("generator")
    if name == "e1ej":
        return e1ej_pool(int(spec["d"]), int(spec["n"]))
    if name == "gaussian":
        return gaussian_pool(
            int(spec["d"]), int(spec["n"]), scale=spec.get("scale"), seed=seed
        )
    if name == "identical":
        return identical_pool(int(spec["d"]), int(spec["n"]), values=spec.get("values"))
    raise ValueError(f"unknown pool generator {name!r}")


# ------------------------------------------------------------------ #
# Exact error metric and rate constants
# ------------------------------------------------------------------ #


def expected_nll_gap(family: ModelFamily, pool: UnlabeledPool, theta, theta_star) -> float:
    """Exact ``L_U(theta) - L_U(theta_star)``, averaged over the pool.

    Uses the per-family closed form of the conditional expectation (squared
    linear-predictor error for linear regression, predictive KL divergence
    for the classification families), so the value is deterministic and
    nonnegative.
    """
    return family.mean_predictive_gap(pool.examples, theta_star, theta)


def pool_fisher(family: ModelFamily, pool: UnlabeledPool, theta) -> np.ndarray:
    return family.batch_fisher(pool.examples, np.asarray(theta, dtype=float)).mean(axis=0)


def rate_constant(family: ModelFamily, pool: UnlabeledPool, gamma, theta_star) -> float:
    """``trace(I_Gamma(theta*)^{-1} I_U(theta*))`` for a sampling
    distribution ``gamma`` over the pool; equals ``p`` when ``gamma`` is
    uniform."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[0] != pool.size:
        raise ValueError("gamma length does not match the pool size")
    fishers = family.batch_fisher(pool.examples, np.asarray(theta_star, dtype=float))
    fisher_gamma = np.einsum("n,nij->ij", gamma, fishers)
    fisher_pool = fishers.mean(axis=0)
    return float(np.trace(solve_psd(fisher_gamma, fisher_pool, what="I_Gamma")))


def rate_unit_factor(family: ModelFamily) -> float:
    """Multiplier turning ``rate_constant / m`` into the leading-order mean
    error in the family's own loss units.

    The asymptotic mean error is ``trace(V H^{-1} I_U H^{-1}) / (2 m)`` with
    ``V = E[grad L grad L^T]`` and ``H`` the loss Hessian aggregate; since
    ``V = score_covariance_factor * H`` here, that collapses to
    ``(score_covariance_factor / 2) * rate_constant / m``.
    """
    return family.score_covariance_factor / 2.0


def fisher_identity_check(
    family: ModelFamily, x, theta_star, n_draws: int = 100_000, seed: int = 0
) -> float:
    """Worst entrywise deviation, in standard-error units, between the
    Monte-Carlo score covariance and its model value.

    Compares the empirical mean of ``grad L grad L^T`` over label draws at
    ``theta_star`` against ``score_covariance_factor * fisher``; values of a
    few (<= 4) are consistent with the identity.
    """
    if n_draws < 10_000:
        raise ValueError("n_draws must be at least 10^4")
    x = np.asarray(x, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    rng = np.random.default_rng(seed)
    labels = family.sample_labels(np.tile(x, (n_draws, 1)), theta_star, rng)
    # Deduplicate gradient evaluation for discrete label spaces.
    uniq, inverse = np.unique(labels, return_inverse=True)
    if uniq.shape[0] < min(64, n_draws):
        per_label = np.stack([family.nll_gradient(x, y, theta_star) for y in uniq])
        G = per_label[inverse]
    else:
        G = np.stack([family.nll_gradient(x, y, theta_star) for y in labels])
    outer = np.einsum("ni,nj->nij", G, G)
    mean = outer.mean(axis=0)
    se = outer.std(axis=0, ddof=1) / np.sqrt(n_draws)
    expected = family.score_covariance_factor * family.fisher(x, theta_star)
    dev = np.abs(mean - expected)
    # Entries with zero sampling variance must match exactly (up to fp noise).
    floor = 1e-12 * max(np.abs(expected).max(initial=0.0), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        units = np.where(dev <= floor, 0.0, dev / np.where(se > 0, se, np.inf))
    return float(units.max(initial=0.0))


@dataclass
class RegularityDiagnostics:
    """Empirical proxies for the regularity conditions at ``theta_star``."""

    sigma_min_U: float
    condition_number: float
    max_gradient_norm_whitened: float

    def ok(self) -> bool:
        return self.sigma_min_U > 0


def regularity_diagnostics(
    family: ModelFamily,
    pool: UnlabeledPool,
    theta_star,
    n_draws: int = 1000,
    seed: int = 0,
) -> RegularityDiagnostics:
    """Smallest pool-Fisher eigenvalue, its condition number, and the sup of
    the whitened score norm over the pool.

    For discrete label spaces the sup runs exactly over all labels; for
    linear regression it is an empirical sup over ``n_draws`` label draws per
    example.  A rank-deficient pool Fisher is reported (``sigma_min_U = 0``-
    ish, infinite condition number), never raised.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    fisher_pool = pool_fisher(family, pool, theta_star)
    eigvals = np.linalg.eigvalsh(fisher_pool)
    sigma_min = float(eigvals[0])
    cond = float(eigvals[-1] / eigvals[0]) if eigvals[0] > 0 else float("inf")

    if sigma_min > 0:
        whitener = np.linalg.inv(fisher_pool)
        sup = 0.0
        from .families import LinearRegressionFamily, MultinomialLogisticFamily

        for x in pool.examples:
            if isinstance(family, LinearRegressionFamily):
                rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
                etas = rng.standard_normal(n_draws)
                base = 2.0 * np.abs(etas).max()
                sup = max(sup, base * float(np.sqrt(x @ whitener @ x)))
            else:
                labels = (
                    range(1, family.n_classes + 1)
                    if isinstance(family, MultinomialLogisticFamily)
                    else (-1, 1)
                )
                for y in labels:
                    g = family.nll_gradient(x, y, theta_star)
                    sup = max(sup, float(np.sqrt(g @ whitener @ g)))
    else:
        sup = float("inf")
    return RegularityDiagnostics(
        sigma_min_U=sigma_min,
        condition_number=cond,
        max_gradient_norm_whitened=sup,
    )


# ------------------------------------------------------------------ #
# Scenarios and reports
# ------------------------------------------------------------------ #


@dataclass
class Scenario:
    """One reproducible experiment: pool, truth, budgets, trial count."""

    family: str
    pool: dict
    theta_star: list | dict
    m2: list[int]
    trials: int = DEFAULT_TRIALS
    m1: int | None = None
    seed: int = 0
    mle_tol: float = 1e-8
    design_tol: float = 1e-4
    theta_box: float | None = None
    skip_stage1: bool | None = None
    n_classes: int = 3

    def __post_init__(self):
        if isinstance(self.m2, (int, float)):
            self.m2 = [int(self.m2)]
        self.m2 = [int(b) for b in self.m2]
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if any(b < 1 for b in self.m2):
            raise ValueError("every m2 must be >= 1")

    def build_family(self) -> ModelFamily:
        return get_family(self.family, self.n_classes)

    def build_pool(self) -> UnlabeledPool:
        return make_pool(self.pool, seed=self.seed)

    def build_theta_star(self) -> np.ndarray:
        family = self.build_family()
        p = family.param_dim(int(self.pool["d"]))
        if isinstance(self.theta_star, dict):
            if "constant" in self.theta_star:
                return np.full(p, float(self.theta_star["constant"]))
            if "alternating" in self.theta_star:
                scale = float(self.theta_star["alternating"])
                return scale * np.array([1.0 if i % 2 == 0 else -1.0 for i in range(p)])
            raise ValueError(f"unknown theta_star preset {self.theta_star!r}")
        theta = np.asarray(self.theta_star, dtype=float)
        if theta.shape != (p,):
            raise ValueError(f"theta_star has shape {theta.shape}, expected ({p},)")
        return theta

    def build_space(self) -> ParamSpace | None:
        if self.theta_box is None:
            return None
        p = self.build_family().param_dim(int(self.pool["d"]))
        return ParamSpace.centered_box(p, float(self.theta_box))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "pool": dict(self.pool),
            "theta_star": self.theta_star,
            "m2": list(self.m2),
            "trials": self.trials,
            "m1": self.m1,
            "seed": self.seed,
            "mle_tol": self.mle_tol,
            "design_tol": self.design_tol,
            "theta_box": self.theta_box,
            "skip_stage1": self.skip_stage1,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Scenario":
        return cls(**payload)

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class BudgetResult:
    """Per-budget trial arrays and their aggregates."""

    m2: int
    m1_used: int
    alpha: float
    active_errors: np.ndarray
    passive_errors: np.ndarray
    tau_squared: np.ndarray
    design_objective: np.ndarray

    @staticmethod
    def _se(values: np.ndarray) -> float:
        if values.shape[0] < 2:
            return 0.0
        return float(values.std(ddof=1) / np.sqrt(values.shape[0]))

    @property
    def active_mean(self) -> float:
        return float(np.sum(self.active_errors) / self.active_errors.shape[0])

    @property
    def active_se(self) -> float:
        return self._se(self.active_errors)

    @property
    def passive_mean(self) -> float:
        return float(np.sum(self.passive_errors) / self.passive_errors.shape[0])

    @property
    def passive_se(self) -> float:
        return self._se(self.passive_errors)

    @property
    def mean_tau_squared(self) -> float:
        return float(np.sum(self.tau_squared) / self.tau_squared.shape[0])

    def to_dict(self) -> dict:
        return {
            "m2": self.m2,
            "m1_used": self.m1_used,
            "alpha": self.alpha,
            "active_errors": self.active_errors.tolist(),
            "passive_errors": self.passive_errors.tolist(),
            "tau_squared": self.tau_squared.tolist(),
            "design_objective": self.design_objective.tolist(),
            "active_mean": self.active_mean,
            "active_se": self.active_se,
            "passive_mean": self.passive_mean,
            "passive_se": self.passive_se,
            "mean_tau_squared": self.mean_tau_squared,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BudgetResult":
        return cls(
            m2=int(payload["m2"]),
            m1_used=int(payload["m1_used"]),
            alpha=float(payload["alpha"]),
            active_errors=np.asarray(payload["active_errors"], dtype=float),
            passive_errors=np.asarray(payload["passive_errors"], dtype=float),
            tau_squared=np.asarray(payload["tau_squared"], dtype=float),
            design_objective=np.asarray(payload["design_objective"], dtype=float),
        )


@dataclass
class ExperimentReport:
    """Full record of a scenario run.

    ``runtime_seconds`` is informational and excluded from the deterministic
    payload so identical ``(scenario, seed)`` runs serialize byte-identically.
    """

    scenario: dict
    diagnostics: RegularityDiagnostics
    passive_tau_squared: float
    rate_unit_factor: float
    budgets: list[BudgetResult] = field(default_factory=list)
    runtime_seconds: float | None = None

    def to_dict(self, include_runtime: bool = True) -> dict:
        payload = {
            "scenario": self.scenario,
            "diagnostics": {
                "sigma_min_U": self.diagnostics.sigma_min_U,
                "condition_number": self.diagnostics.condition_number,
                "max_gradient_norm_whitened": self.diagnostics.max_gradient_norm_whitened,
            },
            "passive_tau_squared": self.passive_tau_squared,
            "rate_unit_factor": self.rate_unit_factor,
            "budgets": [b.to_dict() for b in self.budgets],
        }
        if include_runtime:
            payload["runtime_seconds"] = self.runtime_seconds
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentReport":
        diag = payload["diagnostics"]
        return cls(
            scenario=payload["scenario"],
            diagnostics=RegularityDiagnostics(
                sigma_min_U=diag["sigma_min_U"],
                condition_number=diag["condition_number"],
                max_gradient_norm_whitened=diag["max_gradient_norm_whitened"],
            ),
            passive_tau_squared=float(payload["passive_tau_squared"]),
            rate_unit_factor=float(payload["rate_unit_factor"]),
            budgets=[BudgetResult.from_dict(b) for b in payload["budgets"]],
            runtime_seconds=payload.get("runtime_seconds"),
        )

    def to_json(self, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), sort_keys=True, indent=2)

    def csv_rows(self) -> list[list]:
        rows = [["trial", "arm", "m1", "m2", "error", "tau_squared"]]
        for block in self.budgets:
            for t in range(block.active_errors.shape[0]):
                rows.append(
                    [t, "active", block.m1_used, block.m2,
                     repr(float(block.active_errors[t])), repr(float(block.tau_squared[t]))]
                )
                rows.append(
                    [t, "passive", 0, block.m1_used + block.m2,
                     repr(float(block.passive_errors[t])), repr(self.passive_tau_squared)]
                )
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.csv_rows())


# ------------------------------------------------------------------ #
# Scenario execution
# ------------------------------------------------------------------ #


def _trial_seed(seed: int, budget_index: int, trial: int) -> int:
    return int(
        np.random.SeedSequence(seed, spawn_key=(budget_index, trial)).generate_state(1)[0]
    )


def _run_trials(scenario_dict: dict, budget_index: int, trials: list[int]) -> list[tuple]:
    """Run a block of paired trials for one budget; used by worker processes."""
    scenario = Scenario.from_dict(scenario_dict)
    family = scenario.build_family()
    pool = scenario.build_pool()
    theta_star = scenario.build_theta_star()
    space = scenario.build_space()
    m2 = scenario.m2[budget_index]
    out = []
    for t in trials:
        seed_t = _trial_seed(scenario.seed, budget_index, t)
        config = ActiveConfig(
            m2=m2,
            m1=scenario.m1,
            mle_tol=scenario.mle_tol,
            design_tol=scenario.design_tol,
            seed=seed_t,
            skip_stage1=scenario.skip_stage1,
            theta_space=space,
        )
        oracle = SyntheticOracle(family, pool, theta_star)
        result = active_set_select(pool, family, oracle, config)
        err_active = expected_nll_gap(family, pool, result.theta2, theta_star)
        tau = rate_constant(family, pool, result.mixed_distribution, theta_star)

        oracle_passive = SyntheticOracle(family, pool, theta_star)
        fit = passive_baseline(
            pool, family, oracle_passive, m=result.labels_used,
            seed=seed_t, space=space, tol=scenario.mle_tol,
        )
        err_passive = expected_nll_gap(family, pool, fit.theta_hat, theta_star)
        out.append(
            (t, err_active, err_passive, tau, result.design.objective,
             result.labels_used - m2)
        )
    return out


def _resolve_workers(n_jobs: int | None) -> int:
    if n_jobs is None:
        env = os.environ.get("ACTIVE_MLE_THREADS", "").strip()
        n_jobs = int(env) if env else 1
    if n_jobs == 0:
        n_jobs = os.cpu_count() or 1
    return max(1, n_jobs)


def run_scenario(scenario: Scenario, n_jobs: int | None = None) -> ExperimentReport:
    """Run all budgets and trials of a scenario and aggregate the results.

    Trials are independent given their derived seeds; with ``n_jobs > 1``
    (or ``ACTIVE_MLE_THREADS``) blocks run in worker processes and are
    reassembled in trial order, so aggregation does not depend on the worker
    count.  Raises :class:`DiagnosticsError` when the pool Fisher at
    ``theta_star`` is rank deficient.
    """
    start = time.perf_counter()
    family = scenario.build_family()
    pool = scenario.build_pool()
    theta_star = scenario.build_theta_star()
    diagnostics = regularity_diagnostics(family, pool, theta_star)
    if not diagnostics.ok():
        raise DiagnosticsError(
            f"pool Fisher is rank deficient (sigma_min_U = {diagnostics.sigma_min_U})"
        )
    p = family.param_dim(pool.dimension)
    workers = _resolve_workers(n_jobs)

    from .design import mixing_coefficient

    budgets = []
    scenario_dict = scenario.to_dict()
    for bi, m2 in enumerate(scenario.m2):
        trials = list(range(scenario.trials))
        if workers == 1 or scenario.trials < 2 * workers:
            rows = _run_trials(scenario_dict, bi, trials)
        else:
            chunks = [trials[i::workers] for i in range(workers)]
            rows = []
            with ProcessPoolExecutor(max_workers=workers) as pool_exec:
                for part in pool_exec.map(_run_trials, [scenario_dict] * workers,
                                          [bi] * workers, chunks):
                    rows.extend(part)
        rows.sort(key=lambda r: r[0])
        active = np.array([r[1] for r in rows])
        passive = np.array([r[2] for r in rows])
        taus = np.array([r[3] for r in rows])
        objs = np.array([r[4] for r in rows])
        m1_used = rows[0][5]
        if float(min(active.min(initial=0.0), passive.min(initial=0.0))) < -1e-9:
            raise AssertionError("expected_nll_gap produced a negative error")
        budgets.append(
            BudgetResult(
                m2=m2,
                m1_used=m1_used,
                alpha=mixing_coefficient(m2),
                active_errors=active,
                passive_errors=passive,
                tau_squared=taus,
                design_objective=objs,
            )
        )

    return ExperimentReport(
        scenario=scenario_dict,
        diagnostics=diagnostics,
        passive_tau_squared=float(p),
        rate_unit_factor=rate_unit_factor(family),
        budgets=budgets,
        runtime_seconds=time.perf_counter() - start,
    )
