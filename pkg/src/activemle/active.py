"""Two-stage active label selection against a label oracle.

Stage 1 draws a small uniform sample (with replacement), queries labels, and
fits a coarse estimate ``theta1``.  The sampling design is then optimized at
``theta1``, blended with the uniform distribution, and Stage 2 spends the main
budget on i.i.d. draws from that mixture before the final fit.  Families whose
Fisher matrix does not depend on ``theta`` skip Stage 1 entirely.

All randomness derives from one root seed through four fixed substreams
(stage-1 draws, stage-1 labels, stage-2 draws, stage-2 labels), so paired
comparisons across arms share their random numbers and identical
``(pool, seed)`` inputs reproduce results bit for bit.  The passive baseline
uses the stage-2 substreams, which makes it exactly the degenerate case of
the active run with a uniform design.
"""

from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .design import Design, DesignProblem, mix_with_uniform, solve_design
from .families import ModelFamily
from .mle import LabeledSet, MleResult, ParamSpace, fit_mle

_STAGE1_DRAWS, _STAGE1_LABELS, _STAGE2_DRAWS, _STAGE2_LABELS = range(4)


def _substream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


@dataclass
class UnlabeledPool:
    """The fixed design set; expectations over it are uniform."""

    examples: np.ndarray

    def __post_init__(self):
        self.examples = np.atleast_2d(np.asarray(self.examples, dtype=float))
        if self.examples.shape[0] < 1:
            raise ValueError("pool must contain at least one example")
        if not np.all(np.isfinite(self.examples)):
            raise ValueError("pool contains non-finite features")

    @property
    def size(self) -> int:
        return self.examples.shape[0]

    @property
    def dimension(self) -> int:
        return self.examples.shape[1]


class LabelOracle(ABC):
    """Query interface returning labels for pool indices.

    Repeated queries on the same index are permitted and independent; the
    total number of labels served is tracked in ``calls``.
    """

    def __init__(self):
        self.calls = 0

    @abstractmethod
    def _labels_for(self, indices: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def query_many(self, indices, rng) -> np.ndarray:
        indices = np.asarray(indices, dtype=int)
        labels = self._labels_for(indices, np.random.default_rng(rng))
        self.calls += len(indices)
        return labels

    def query(self, index: int, rng):
        return self.query_many(np.array([index]), rng)[0]


class SyntheticOracle(LabelOracle):
    """Draws labels from the family's conditional law at a ground truth."""

    def __init__(self, family: ModelFamily, pool: UnlabeledPool, theta_star):
        super().__init__()
        self.family = family
        self.pool = pool
        self.theta_star = np.asarray(theta_star, dtype=float)

    def _labels_for(self, indices, rng):
        return self.family.sample_labels(self.pool.examples[indices], self.theta_star, rng)


class ReplayOracle(LabelOracle):
    """Serves pre-recorded labels per index, in recorded order.

    Raises ``LookupError`` when an index is queried more often than labels
    were recorded for it.
    """

    def __init__(self, labels_by_index: dict[int, list]):
        super().__init__()
        self._remaining = {int(k): list(v) for k, v in labels_by_index.items()}

    @classmethod
    def from_json(cls, path) -> "ReplayOracle":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(payload["labels"])

    def _labels_for(self, indices, rng):
        out = []
        for index in indices:
            queue = self._remaining.get(int(index), [])
            if not queue:
                raise LookupError(
                    f"replay oracle has no remaining labels for index {int(index)}"
                )
            out.append(queue.pop(0))
        return np.asarray(out)


@dataclass
class ActiveConfig:
    """Budgets, tolerances, and the root seed of one active run.

    ``m1=None`` selects the default heuristic ``max(10 p, ceil(m2 / 4))``:
    large enough for a non-degenerate stage-1 Hessian while keeping stage 1
    at most 20% of the total label budget.  ``skip_stage1=None`` defers to
    the family's ``fisher_theta_independent`` flag.
    """

    m2: int
    m1: int | None = None
    mle_tol: float = 1e-8
    design_tol: float = 1e-4
    seed: int = 0
    skip_stage1: bool | None = None
    theta_space: ParamSpace | None = None

    def __post_init__(self):
        if self.m2 < 1:
            raise ValueError("m2 must be >= 1")
        if self.m1 is not None and self.m1 < 1:
            raise ValueError("m1 must be >= 1 when given")

    def resolve_m1(self, param_dim: int) -> int:
        if self.m1 is not None:
            return self.m1
        return max(10 * param_dim, math.ceil(self.m2 / 4))

    def resolve_skip(self, family: ModelFamily) -> bool:
        if self.skip_stage1 is None:
            return family.fisher_theta_independent
        return self.skip_stage1


@dataclass
class ActiveResult:
    """End-to-end outcome of one active run."""

    theta1: np.ndarray | None
    theta2: np.ndarray
    design: Design
    mixed_distribution: np.ndarray
    labels_used: int
    stage1: MleResult | None
    stage2: MleResult
    alpha: float


def _draw_indices(rng: np.random.Generator, n: int, size: int, probs: np.ndarray) -> np.ndarray:
    # One shared primitive for both arms so a uniform design reproduces the
    # passive draw stream exactly.
    return rng.choice(n, size=size, p=probs)


def design_problem_at(
    family: ModelFamily, pool: UnlabeledPool, theta, m2: int
) -> DesignProblem:
    """Build the design step's optimization problem at a working parameter.

    Budgets beyond the pool size make the capped polytope empty, so the box
    is dropped there and the optimization runs over all sampling
    distributions (scaled simplex); with-replacement sampling is well defined
    either way.
    """
    fishers = family.batch_fisher(pool.examples, np.asarray(theta, dtype=float))
    cap = 1.0 if m2 <= pool.size else None
    return DesignProblem(fisher_per_example=fishers, budget=float(m2), box_cap=cap)


def active_set_select(
    pool: UnlabeledPool,
    family: ModelFamily,
    oracle: LabelOracle,
    config: ActiveConfig,
) -> ActiveResult:
    """Run the full two-stage protocol and return the refined estimate.

    Steps, in order: uniform stage-1 draws and label queries; coarse MLE;
    design optimization at the coarse estimate; mixed-distribution draws and
    label queries; final MLE.  Design infeasibility propagates; MLE
    non-convergence is reported in the stage diagnostics instead of raised.
    """
    n = pool.size
    p = family.param_dim(pool.dimension)
    space = config.theta_space or ParamSpace.unbounded(p)
    uniform = np.full(n, 1.0 / n)
    skip = config.resolve_skip(family)

    stage1 = None
    theta1 = None
    m1_used = 0
    if not skip:
        m1_used = config.resolve_m1(p)
        draws = _draw_indices(_substream(config.seed, _STAGE1_DRAWS), n, m1_used, uniform)
        labels = oracle.query_many(draws, _substream(config.seed, _STAGE1_LABELS))
        stage1 = fit_mle(
            family,
            LabeledSet(pool.examples[draws], labels),
            space=space,
            tol=config.mle_tol,
        )
        theta1 = stage1.theta_hat

    design_theta = theta1 if theta1 is not None else np.zeros(p)
    design = solve_design(
        design_problem_at(family, pool, design_theta, config.m2),
        tol=config.design_tol,
    )
    mixed = mix_with_uniform(design, config.m2)

    draws = _draw_indices(_substream(config.seed, _STAGE2_DRAWS), n, config.m2, mixed)
    labels = oracle.query_many(draws, _substream(config.seed, _STAGE2_LABELS))
    stage2 = fit_mle(
        family,
        LabeledSet(pool.examples[draws], labels),
        init=theta1 if theta1 is not None and space.contains(theta1) else None,
        space=space,
        tol=config.mle_tol,
    )

    from .design import mixing_coefficient

    return ActiveResult(
        theta1=theta1,
        theta2=stage2.theta_hat,
        design=design,
        mixed_distribution=mixed,
        labels_used=m1_used + config.m2,
        stage1=stage1,
        stage2=stage2,
        alpha=mixing_coefficient(config.m2),
    )


def passive_baseline(
    pool: UnlabeledPool,
    family: ModelFamily,
    oracle: LabelOracle,
    m: int,
    seed: int = 0,
    space: ParamSpace | None = None,
    tol: float = 1e-8,
) -> MleResult:
    """Control arm: one MLE on ``m`` uniform with-replacement draws.

    Uses the stage-2 substreams of ``seed``, so it is the exact counterpart
    of an active run whose mixed distribution is uniform.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    n = pool.size
    uniform = np.full(n, 1.0 / n)
    draws = _draw_indices(_substream(seed, _STAGE2_DRAWS), n, m, uniform)
    labels = oracle.query_many(draws, _substream(seed, _STAGE2_LABELS))
    p = family.param_dim(pool.dimension)
    return fit_mle(
        family,
        LabeledSet(pool.examples[draws], labels),
        space=space or ParamSpace.unbounded(p),
        tol=tol,
    )
