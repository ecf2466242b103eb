"""Design optimizer: objective/gradient values, solver optimality, SDP form."""

import numpy as np
import pytest

from activemle import (
    Design,
    DesignProblem,
    FisherAggregate,
    InfeasibleDesignError,
    LinearRegressionFamily,
    SingularMatrixError,
    build_sdp_form,
    design_gradient,
    design_objective,
    e1ej_pool,
    mix_with_uniform,
    mixing_coefficient,
    solve_design,
)

from _design_oracle import grid_search_design
from _numdiff import fd_gradient


def scalar_problem():
    fishers = np.array([[[1.0]], [[4.0]]])
    return DesignProblem(fisher_per_example=fishers, budget=2.0)


def random_linear_problem(rng, n, d, budget=None):
    X = rng.standard_normal((n, d))
    fishers = np.einsum("ni,nj->nij", X, X)
    budget = budget if budget is not None else int(rng.integers(1, n + 1))
    return DesignProblem(fisher_per_example=fishers, budget=float(budget))


def random_feasible_weights(rng, n, budget, cap=1.0):
    for _ in range(1000):
        a = budget * rng.dirichlet(np.full(n, 5.0))
        if np.all(a <= cap):
            return a
    raise RuntimeError("could not draw feasible weights")


class TestObjectiveAndGradient:
    def test_scalar_example(self):
        prob = scalar_problem()
        assert prob.target.matrix[0, 0] == pytest.approx(2.5)
        assert design_objective(np.array([1.0, 1.0]), prob) == pytest.approx(0.5)

    def test_uniform_on_identical_examples(self):
        fisher = np.array([[2.0, 0.3], [0.3, 1.0]])
        prob = DesignProblem(fisher_per_example=np.tile(fisher, (6, 1, 1)), budget=3.0)
        a = prob.uniform_weights()
        # S = budget * target, so the raw trace is d / budget and the
        # normalized rate constant is exactly d.
        assert design_objective(a, prob) == pytest.approx(2.0 / 3.0)
        assert prob.budget * design_objective(a, prob) == pytest.approx(2.0)

    def test_matches_direct_matrix_oracle(self):
        rng = np.random.default_rng(0)
        prob = random_linear_problem(rng, n=3, d=2, budget=2)
        a = random_feasible_weights(rng, 3, 2.0)
        S = np.einsum("n,nij->ij", a, prob.fisher_per_example)
        oracle = float(np.trace(np.linalg.inv(S) @ prob.target.matrix))
        assert design_objective(a, prob) == pytest.approx(oracle, rel=1e-10)

    def test_singular_scatter_raises_with_rank(self):
        fishers = np.array([[[1.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]]])
        fishers[1] = [[0.0, 0.0], [0.0, 1.0]]
        prob = DesignProblem(fisher_per_example=fishers, budget=1.0)
        with pytest.raises(SingularMatrixError, match="rank 1 of 2"):
            design_objective(np.array([1.0, 0.0]), prob)

    def test_gradient_scalar_example(self):
        prob = scalar_problem()
        grad = design_gradient(np.array([1.0, 1.0]), prob)
        assert np.allclose(grad, [-0.1, -0.4])

    def test_gradient_symmetric_on_identical_examples(self):
        fisher = np.eye(2) * 1.7
        prob = DesignProblem(fisher_per_example=np.tile(fisher, (5, 1, 1)), budget=2.0)
        grad = design_gradient(prob.uniform_weights(), prob)
        assert np.allclose(grad, grad[0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            n, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
            prob = random_linear_problem(rng, n=max(n, d + 1), d=d, budget=2)
            a = prob.uniform_weights() + rng.uniform(0.0, 0.2, prob.n_examples)
            grad = design_gradient(a, prob)
            step = 1e-6 * float(np.linalg.norm(a))
            approx = fd_gradient(lambda w: design_objective(w, prob), a, step=step)
            scale = max(np.abs(grad).max(), np.abs(approx).max())
            assert np.abs(grad - approx).max() <= 1e-6 * scale


class TestSolver:
    def test_identical_examples_any_weights_same_objective(self):
        fisher = np.array([[1.5, 0.2], [0.2, 0.8]])
        prob = DesignProblem(fisher_per_example=np.tile(fisher, (8, 1, 1)), budget=4.0)
        design = solve_design(prob)
        assert design.rate_constant == pytest.approx(2.0, rel=1e-9)
        assert design.converged

    def test_scaled_basis_pool_optimum_is_uniform(self):
        # Pool x_j = sqrt(d * s_j) e_j: every direction's target weight is
        # proportional to its per-example Fisher weight, so the optimal
        # design is uniform with rate constant exactly d.
        rng = np.random.default_rng(3)
        d = 4
        scales = rng.uniform(0.5, 3.0, d)
        X = np.diag(np.sqrt(d * scales))
        fam = LinearRegressionFamily()
        prob = DesignProblem(fisher_per_example=fam.batch_fisher(X, np.zeros(d)), budget=2.0)
        design = solve_design(prob, tol=1e-8)
        assert np.allclose(design.weights, 0.5, atol=1e-6)
        assert design.rate_constant == pytest.approx(d, rel=1e-8)

    def test_orthogonal_multiplicity_pool_matches_sqrt_law(self):
        # Unit basis directions with multiplicities: optimal per-direction
        # mass is proportional to sqrt of the direction's share of the pool
        # Fisher, with optimum (sum_j sqrt(share_j))^2.
        counts = np.array([6, 3, 1])
        rows = np.repeat(np.eye(3), counts, axis=0)
        fam = LinearRegressionFamily()
        prob = DesignProblem(
            fisher_per_example=fam.batch_fisher(rows, np.zeros(3)), budget=2.0
        )
        design = solve_design(prob, tol=1e-8)
        share = counts / counts.sum()
        expected_tau = np.sqrt(share).sum() ** 2
        assert design.rate_constant == pytest.approx(expected_tau, rel=1e-6)
        gamma = design.sampling_distribution()
        masses = np.array([gamma[rows[:, j] == 1].sum() for j in range(3)])
        assert np.allclose(masses, np.sqrt(share) / np.sqrt(share).sum(), atol=1e-5)

    def test_spiked_pool_matches_printed_design(self):
        # d = 10 spiked pool: mass ~ 1 - (d-1)/(2d) on the lead direction,
        # ~ 1/(2d) on each rare one, and a rate constant at most 4.
        d = 10
        pool = e1ej_pool(d, 1000)
        fam = LinearRegressionFamily()
        prob = DesignProblem(
            fisher_per_example=fam.batch_fisher(pool.examples, np.zeros(d)),
            budget=100.0,
        )
        design = solve_design(prob)
        gamma = design.sampling_distribution()
        masses = np.array([gamma[pool.examples[:, j] == 1].sum() for j in range(d)])
        assert abs(masses[0] - (1 - (d - 1) / (2 * d))) <= 0.05
        assert np.abs(masses[1:] - 1 / (2 * d)).max() <= 0.01
        assert design.rate_constant <= 4.0
        share = np.array([(pool.examples[:, j] == 1).mean() for j in range(d)])
        assert design.rate_constant == pytest.approx(np.sqrt(share).sum() ** 2, rel=1e-4)

    def test_feasibility_invariants(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            prob = random_linear_problem(rng, n=7, d=2)
            design = solve_design(prob)
            assert np.all(design.weights >= -1e-9)
            assert np.all(design.weights <= 1.0 + 1e-9)
            assert design.weights.sum() == pytest.approx(prob.budget, abs=1e-9 * prob.budget)
            recomputed = design_objective(design.weights, prob)
            assert design.objective == pytest.approx(recomputed, rel=1e-8)
            assert design.objective <= design_objective(prob.uniform_weights(), prob) + 1e-12

    def test_objective_never_above_uniform_and_gap_small(self):
        rng = np.random.default_rng(7)
        prob = random_linear_problem(rng, n=12, d=3, budget=5)
        design = solve_design(prob, tol=1e-6)
        assert design.duality_gap <= 1e-6 * design.objective * 1.01

    def test_scale_covariance(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((6, 2))
        fishers = np.einsum("ni,nj->nij", X, X)
        a1 = solve_design(DesignProblem(fisher_per_example=fishers, budget=3.0), tol=1e-7)
        a2 = solve_design(
            DesignProblem(fisher_per_example=13.0 * fishers, budget=3.0), tol=1e-7
        )
        # S^{-1} scales inversely and the target directly, so the objective
        # (and hence the argmin) is invariant.
        assert np.allclose(a1.weights, a2.weights, atol=1e-5)
        assert a1.objective == pytest.approx(a2.objective, rel=1e-9)

    def test_deterministic_given_instance(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((9, 2))
        fishers = np.einsum("ni,nj->nij", X, X)
        d1 = solve_design(DesignProblem(fisher_per_example=fishers, budget=4.0))
        d2 = solve_design(DesignProblem(fisher_per_example=fishers, budget=4.0))
        assert np.array_equal(d1.weights, d2.weights)
        assert d1.objective == d2.objective

    def test_infeasible_budget_raises(self):
        fishers = np.tile(np.eye(2), (3, 1, 1))
        with pytest.raises(InfeasibleDesignError):
            DesignProblem(fisher_per_example=fishers, budget=4.0)

    def test_uncapped_budget_beyond_pool_size(self):
        fishers = np.tile(np.eye(2), (3, 1, 1))
        prob = DesignProblem(fisher_per_example=fishers, budget=10.0, box_cap=None)
        design = solve_design(prob)
        assert design.weights.sum() == pytest.approx(10.0)
        assert design.rate_constant == pytest.approx(2.0, rel=1e-9)

    def test_grid_oracle_equivalence_small_instances(self):
        rng = np.random.default_rng(13)
        for _ in range(8):
            n = int(rng.integers(2, 5))
            d = int(rng.integers(1, 3))
            prob = random_linear_problem(rng, n=max(n, d), d=d)
            if prob.budget > prob.n_examples:
                continue
            design = solve_design(prob, tol=1e-7)
            oracle = grid_search_design(
                prob.fisher_per_example, prob.target.matrix, prob.budget
            )
            assert design.objective <= oracle + 1e-3
            assert design.objective >= oracle - 1e-3

    def test_design_json_round_trip(self):
        rng = np.random.default_rng(15)
        prob = random_linear_problem(rng, n=5, d=2, budget=2)
        design = solve_design(prob)
        import json

        clone = Design.from_dict(json.loads(json.dumps(design.to_dict())))
        assert np.array_equal(clone.weights, design.weights)
        assert clone.objective == design.objective
        assert clone.duality_gap == design.duality_gap


class TestSdpForm:
    def test_single_dimension_block(self):
        prob = scalar_problem()
        form = build_sdp_form(prob)
        assert form.sigma.shape == (1,)
        assert form.sigma[0] == pytest.approx(2.5)
        blocks = form.schur_blocks(np.array([1.0, 1.0]))
        assert blocks.shape == (1, 2, 2)
        assert blocks[0, 1, 1] == pytest.approx(5.0)

    def test_identity_target_spectrum(self):
        fishers = np.tile(np.eye(2), (4, 1, 1))
        form = build_sdp_form(DesignProblem(fisher_per_example=fishers, budget=2.0))
        assert np.allclose(form.sigma, [1.0, 1.0])
        # Any signed permutation of the standard basis is a valid eigenbasis.
        perm = np.abs(form.vectors)
        assert np.allclose(perm.sum(axis=0), 1.0)
        assert np.allclose(perm.sum(axis=1), 1.0)
        assert set(np.round(perm.ravel(), 12)) <= {0.0, 1.0}

    def test_reconstruction(self):
        rng = np.random.default_rng(17)
        prob = random_linear_problem(rng, n=6, d=3, budget=3)
        form = build_sdp_form(prob)
        scale = np.abs(prob.target.matrix).max()
        assert np.abs(form.reconstruction() - prob.target.matrix).max() <= 1e-8 * scale

    def test_certificates_reproduce_objective_and_psd_blocks(self):
        rng = np.random.default_rng(19)
        prob = random_linear_problem(rng, n=6, d=3, budget=3)
        form = build_sdp_form(prob)
        for _ in range(20):
            a = random_feasible_weights(rng, 6, 3.0)
            certs = form.certificates(a)
            assert form.objective_value(certs) == pytest.approx(
                design_objective(a, prob), abs=1e-8
            )
            blocks = form.schur_blocks(a, certs)
            for block in blocks:
                assert np.linalg.eigvalsh(block)[0] >= -1e-8

    def test_sdp_json_round_trip(self):
        rng = np.random.default_rng(21)
        prob = random_linear_problem(rng, n=4, d=2, budget=2)
        form = build_sdp_form(prob)
        import json

        clone = type(form).from_dict(json.loads(json.dumps(form.to_dict())))
        assert np.array_equal(clone.sigma, form.sigma)
        assert np.array_equal(clone.vectors, form.vectors)
        assert np.array_equal(clone.fisher_per_example, form.fisher_per_example)
        assert clone.budget == form.budget


class TestMixWithUniform:
    def test_budget_one_gives_uniform(self):
        assert mixing_coefficient(1) == 0.0
        mixed = mix_with_uniform(np.array([1.0, 0.0]), m2=1)
        assert np.allclose(mixed, 0.5)

    def test_budget_64_gives_half_mix(self):
        a = np.array([64.0, 0.0])
        mixed = mix_with_uniform(a, m2=64)
        gamma1 = a / 64.0
        assert mixing_coefficient(64) == pytest.approx(0.5)
        assert np.allclose(mixed, 0.5 * gamma1 + 0.25)

    def test_two_point_arithmetic(self):
        mixed = mix_with_uniform(np.array([2.0, 0.0]), m2=2)
        beta = 2.0 ** (-1.0 / 6.0)
        assert mixed[0] == pytest.approx((1 - beta) + beta / 2)
        assert mixed[1] == pytest.approx(beta / 2)
        assert mixed.sum() == pytest.approx(1.0, abs=1e-12)

    def test_sums_to_one_for_solver_output(self):
        rng = np.random.default_rng(23)
        prob = random_linear_problem(rng, n=8, d=2, budget=5)
        design = solve_design(prob)
        mixed = mix_with_uniform(design, m2=5)
        assert mixed.sum() == pytest.approx(1.0, abs=1e-12)
        alpha = mixing_coefficient(5)
        assert mixed.min() >= (1 - alpha) / 8 - 1e-15


class TestProblemValidation:
    def test_wrong_target_rejected(self):
        fishers = np.tile(np.eye(2), (3, 1, 1))
        bad = FisherAggregate.from_matrix(2.0 * np.eye(2))
        with pytest.raises(ValueError, match="target"):
            DesignProblem(fisher_per_example=fishers, budget=2.0, target=bad)

    def test_consistent_target_accepted(self):
        fishers = np.tile(np.eye(2), (3, 1, 1))
        good = FisherAggregate.from_matrix(np.eye(2))
        prob = DesignProblem(fisher_per_example=fishers, budget=2.0, target=good)
        assert prob.target.min_eig == pytest.approx(1.0)

    def test_nonpositive_budget_rejected(self):
        fishers = np.tile(np.eye(2), (3, 1, 1))
        with pytest.raises(InfeasibleDesignError):
            DesignProblem(fisher_per_example=fishers, budget=0.0)


@pytest.mark.filterwarnings("ignore")
def test_cvxpy_cross_check_when_available():
    cvxpy = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(25)
    prob = random_linear_problem(rng, n=4, d=2, budget=2)
    form = build_sdp_form(prob)

    a = cvxpy.Variable(prob.n_examples, nonneg=True)
    c = cvxpy.Variable(prob.param_dim)
    S = sum(a[i] * prob.fisher_per_example[i] for i in range(prob.n_examples))
    constraints = [a <= 1, cvxpy.sum(a) == prob.budget]
    for j in range(prob.param_dim):
        v = form.vectors[:, j][:, None]
        block = cvxpy.bmat([[cvxpy.reshape(c[j], (1, 1), order="C"), v.T], [v, S]])
        constraints.append(block >> 0)
    problem = cvxpy.Problem(cvxpy.Minimize(form.sigma @ c), constraints)
    problem.solve(solver="SCS", eps=1e-6)
    ours = solve_design(prob, tol=1e-7)
    assert problem.value == pytest.approx(ours.objective, rel=5e-3)
