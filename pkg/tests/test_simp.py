import numpy as np
import pytest

from topo3d.domain import Load, ProblemSpec, build_domain
from topo3d.fea import MaterialModel
from topo3d.simp import FilterKernel, SimpConfig, density_filter, oc_update, run_simp

from .conftest import make_problem
from .oracles import hand_filter, oc_lambda_scan


class TestFilterKernel:
    def test_uniform_is_fixed_point(self):
        dom = build_domain(4, 3, 2, 4, 3, 2)
        kernel = FilterKernel(dom, 1.5 * dom.h)
        x = np.full(dom.shape, 0.37)
        assert np.allclose(kernel.apply(x), 0.37, atol=1e-14)

    def test_singleton_radius_is_identity(self):
        dom = build_domain(3, 3, 3, 3, 3, 3)
        kernel = FilterKernel(dom, 0.5 * dom.h)
        rng = np.random.default_rng(1)
        x = rng.random(dom.shape)
        assert np.allclose(kernel.apply(x), x, atol=1e-14)

    def test_hand_example_three_element_line(self):
        # x = (1, 0, 0), r_min = 1.5h: weights 1.5 and 0.5 give 0.75
        dom = build_domain(3, 1, 1, 3, 1, 1)
        kernel = FilterKernel(dom, 1.5 * dom.h)
        x = np.array([1.0, 0.0, 0.0])
        xf = kernel.apply(x)
        assert xf[0] == pytest.approx(0.75, abs=1e-12)
        assert xf[1] == pytest.approx(0.5 / 2.5, abs=1e-12)

    def test_matches_triple_loop_oracle(self):
        dom = build_domain(4, 3, 3, 4, 3, 3)
        kernel = FilterKernel(dom, 1.5 * dom.h)
        rng = np.random.default_rng(2)
        x = rng.random(dom.shape)
        ref = hand_filter(dom, x, 1.5 * dom.h)
        assert np.allclose(kernel.apply(x), ref, atol=1e-12)

    def test_range_preserved(self):
        dom = build_domain(5, 4, 3, 5, 4, 3)
        kernel = FilterKernel(dom, 2.1 * dom.h)
        rng = np.random.default_rng(3)
        x = rng.random(dom.shape)
        xf = kernel.apply(x)
        assert xf.min() >= x.min() and xf.max() <= x.max()

    def test_every_element_includes_itself(self):
        dom = build_domain(3, 2, 2, 3, 2, 2)
        kernel = FilterKernel(dom, 1.5 * dom.h)
        for i in range(dom.element_count):
            assert kernel.neighbor_count(i) >= 1

    def test_idempotent_on_constants(self):
        dom = build_domain(3, 3, 2, 3, 3, 2)
        kernel = FilterKernel(dom, 1.5 * dom.h)
        x = np.full(dom.element_count, 0.42)
        once = kernel.apply(x)
        assert np.allclose(kernel.apply(once), once, atol=1e-14)

    def test_chain_rule_is_adjoint(self):
        # <filter(x), y> = <x, chain(y)> for the unnormalized adjoint pairing
        dom = build_domain(3, 2, 2, 3, 2, 2)
        kernel = FilterKernel(dom, 1.5 * dom.h)
        rng = np.random.default_rng(4)
        x = rng.random(dom.element_count)
        y = rng.random(dom.element_count)
        lhs = np.dot(kernel.apply(x), y)
        rhs = np.dot(x, kernel.chain(y))
        assert lhs == pytest.approx(rhs, rel=1e-10)


class TestOcUpdate:
    def _identity_kernel(self):
        dom = build_domain(2, 1, 1, 2, 1, 1)
        return FilterKernel(dom, 0.5 * dom.h)

    def test_uniform_symmetric_case(self):
        dom = build_domain(3, 3, 3, 3, 3, 3)
        kernel = FilterKernel(dom, 0.5 * dom.h)
        x = np.full(dom.element_count, 0.5)
        dc = np.full(dom.element_count, -2.0)
        out = oc_update(x, dc, 0.4, kernel)
        assert np.allclose(out, 0.4, atol=1e-4)

    def test_volume_tolerance_contract(self):
        dom = build_domain(4, 2, 2, 4, 2, 2)
        kernel = FilterKernel(dom, 1.5 * dom.h)
        rng = np.random.default_rng(5)
        x = rng.uniform(0.2, 0.8, dom.element_count)
        dc = -rng.uniform(0.5, 2.0, dom.element_count)
        out = oc_update(x, dc, 0.4, kernel)
        assert abs(np.mean(kernel.apply(out)) - 0.4) <= 1e-4

    def test_two_element_toy_matches_lambda_scan(self):
        kernel = self._identity_kernel()
        x = np.array([0.5, 0.5])
        dc = np.array([-2.0, -1.0])
        ours = oc_update(x, dc, 0.5, kernel, volume_tol=1e-10)
        ref = oc_lambda_scan(x, dc, 0.5, kernel.apply)
        assert np.allclose(ours, ref, atol=1e-6)

    def test_positive_sensitivity_rejected(self):
        kernel = self._identity_kernel()
        with pytest.raises(ValueError):
            oc_update(np.array([0.5, 0.5]), np.array([1.0, -1.0]), 0.5, kernel)

    def test_all_zero_sensitivities_fail_to_bracket(self):
        kernel = self._identity_kernel()
        with pytest.raises(RuntimeError, match="bracket"):
            oc_update(np.array([0.5, 0.5]), np.array([0.0, 0.0]), 0.6, kernel)

    def test_move_limit_respected(self):
        dom = build_domain(4, 2, 2, 4, 2, 2)
        kernel = FilterKernel(dom, 1.5 * dom.h)
        rng = np.random.default_rng(6)
        x = rng.uniform(0.3, 0.7, dom.element_count)
        dc = -rng.uniform(0.1, 5.0, dom.element_count)
        out = oc_update(x, dc, 0.5, kernel, move_limit=0.2)
        assert np.all(out <= x + 0.2 + 1e-12)
        assert np.all(out >= x - 0.2 - 1e-12)
        assert out.min() >= 0 and out.max() <= 1


@pytest.fixture(scope="module")
def small_trace():
    dom = build_domain(6, 3, 3, 2, 1, 1)
    prob = make_problem(dom, seed=12, vf=0.35)
    return run_simp(prob, SimpConfig(max_iters=100))


class TestRunSimp:

    def test_entry_zero_uniform(self, small_trace):
        assert np.allclose(small_trace.fields[0], 0.35, atol=1e-14)

    def test_converges(self, small_trace):
        assert small_trace.converged
        assert small_trace.converged_at == len(small_trace.fields) - 1

    def test_objective_decreases(self, small_trace):
        assert small_trace.compliances[-1] <= small_trace.compliances[0]

    def test_bounds_every_iterate(self, small_trace):
        for f in small_trace.fields:
            assert f.min() >= 0 and f.max() <= 1

    def test_volume_constraint_every_iterate(self, small_trace):
        v0 = small_trace.problem.volume_fraction
        for f in small_trace.fields[1:]:
            assert abs(f.mean() - v0) <= 1e-4

    def test_validate_passes(self, small_trace):
        small_trace.validate()

    def test_deterministic(self):
        dom = build_domain(4, 2, 2, 2, 1, 1)
        prob = make_problem(dom, seed=3, vf=0.4)
        cfg = SimpConfig(max_iters=30)
        t1 = run_simp(prob, cfg)
        t2 = run_simp(prob, cfg)
        assert len(t1) == len(t2)
        for a, b in zip(t1.fields, t2.fields):
            assert np.array_equal(a, b)
        assert t1.compliances == t2.compliances

    def test_compliance_beats_uniform_across_seeds(self):
        dom = build_domain(5, 2, 2, 5, 2, 2)
        for seed in range(4):
            prob = make_problem(dom, seed=seed, vf=0.4)
            trace = run_simp(prob, SimpConfig(max_iters=60))
            assert trace.compliances[-1] <= trace.compliances[0]
