import numpy as np
import pytest

from topo3d.domain import Load, build_domain, fixed_dofs_for_case
from topo3d.fea import (
    ConvergenceError,
    FeaModel,
    MaterialModel,
    element_stiffness,
    simp_modulus,
)

from .oracles import (
    dense_solve,
    dense_stiffness,
    exact_element_stiffness,
    fd_compliance_gradient,
)


class TestElementStiffness:
    def test_symmetry(self):
        ke = element_stiffness(MaterialModel(), 1.0)
        assert np.max(np.abs(ke - ke.T)) < 1e-12

    def test_translation_nullspace(self):
        ke = element_stiffness(MaterialModel(), 0.5)
        for axis in range(3):
            t = np.zeros(24)
            t[axis::3] = 1.0
            assert np.max(np.abs(ke @ t)) < 1e-10

    def test_six_zero_eigenvalues(self):
        ke = element_stiffness(MaterialModel(), 1.0)
        w = np.sort(np.linalg.eigvalsh(ke))
        assert np.all(np.abs(w[:6]) < 1e-8)
        assert np.all(w[6:] > 1e-8)

    def test_matches_exact_symbolic_integral(self):
        ke = element_stiffness(MaterialModel(nu=0.3), 1.0)
        exact = exact_element_stiffness((3, 10), (1, 1))
        assert np.max(np.abs(ke - exact)) < 1e-10

    def test_scales_linearly_with_edge(self):
        a = element_stiffness(MaterialModel(), 1.0)
        b = element_stiffness(MaterialModel(), 0.25)
        assert np.allclose(b, 0.25 * a, rtol=1e-12)

    def test_bad_edge_rejected(self):
        with pytest.raises(ValueError):
            element_stiffness(MaterialModel(), 0.0)


class TestSimpModulus:
    def test_boundaries(self):
        m = MaterialModel(e0=1.0, e_min=1e-9, p=3.0)
        assert simp_modulus(1.0, m) == pytest.approx(1.0)
        assert simp_modulus(0.0, m) == pytest.approx(1e-9)

    def test_midpoint(self):
        m = MaterialModel(e0=1.0, e_min=1e-9, p=3.0)
        assert simp_modulus(0.5, m) == pytest.approx(0.125, rel=1e-6)

    def test_monotone(self):
        m = MaterialModel()
        x = np.linspace(0, 1, 33)
        assert np.all(np.diff(simp_modulus(x, m)) > 0)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            simp_modulus(1.5, MaterialModel())


class TestMaterialModel:
    def test_validation(self):
        with pytest.raises(ValueError):
            MaterialModel(e0=1.0, e_min=2.0)
        with pytest.raises(ValueError):
            MaterialModel(p=0.5)
        with pytest.raises(ValueError):
            MaterialModel(nu=0.5)


class TestMatrixFreeApply:
    @pytest.mark.parametrize("shape", [(1, 1, 1), (2, 2, 2), (3, 3, 3), (3, 2, 1)])
    def test_matches_dense_multiply(self, shape):
        dom = build_domain(*shape, *(s * 0.5 for s in shape))
        mat = MaterialModel()
        model = FeaModel(dom, mat)
        rng = np.random.default_rng(3)
        dens = rng.uniform(0.1, 1.0, dom.element_count)
        k = dense_stiffness(dom, dens, mat)
        for _ in range(3):
            u = rng.standard_normal(dom.dof_count)
            assert np.max(np.abs(model.apply(model.moduli(dens), u) - k @ u)) <= 1e-10


class TestSolveEquilibrium:
    def test_zero_force_returns_zero(self):
        dom = build_domain(2, 1, 1, 2, 1, 1)
        model = FeaModel(dom, MaterialModel())
        dm = fixed_dofs_for_case(1, dom)
        u = model.solve(np.ones(2), np.zeros(dom.dof_count), dm)
        assert np.all(u == 0.0)

    def test_cantilever_matches_dense_oracle(self):
        dom = build_domain(2, 1, 1, 2, 1, 1)
        mat = MaterialModel()
        model = FeaModel(dom, mat)
        dm = fixed_dofs_for_case(1, dom)
        f = np.zeros(dom.dof_count)
        tip = dom.node_index(2, 0, 1)
        f[3 * tip + 2] = -1.0
        dens = np.ones(dom.element_count)
        u = model.solve(dens, f, dm, tol=1e-10)
        u_ref = dense_solve(dom, dens, f, dm.fixed_dofs, mat)
        assert np.linalg.norm(u - u_ref) <= 1e-8 * np.linalg.norm(u_ref)

    def test_fixed_dofs_are_zero(self):
        dom = build_domain(3, 2, 2, 3, 2, 2)
        model = FeaModel(dom, MaterialModel())
        dm = fixed_dofs_for_case(4, dom)
        rng = np.random.default_rng(0)
        u = model.solve(np.full(dom.element_count, 0.5),
                        rng.standard_normal(dom.dof_count), dm)
        assert np.all(u[dm.fixed_dofs] == 0.0)

    def test_residual_contract(self):
        dom = build_domain(4, 2, 2, 4, 2, 2)
        model = FeaModel(dom, MaterialModel())
        dm = fixed_dofs_for_case(2, dom)
        rng = np.random.default_rng(11)
        dens = rng.uniform(0.2, 1.0, dom.element_count)
        f = rng.standard_normal(dom.dof_count)
        tol = 1e-8
        u = model.solve(dens, f, dm, tol=tol)
        free = dm.free_mask()
        r = np.where(free, model.apply(model.moduli(dens), u) - f, 0)
        assert np.linalg.norm(r) <= tol * np.linalg.norm(np.where(free, f, 0))

    def test_nonconvergence_error_carries_residuals(self):
        dom = build_domain(2, 2, 2, 2, 2, 2)
        model = FeaModel(dom, MaterialModel())
        dm = fixed_dofs_for_case(1, dom)
        f = np.zeros(dom.dof_count)
        f[-1] = 1.0
        with pytest.raises(ConvergenceError) as err:
            model.solve(np.ones(dom.element_count), f, dm, tol=1e-14, max_iters=2)
        assert len(err.value.residuals) >= 2

    def test_nonfinite_force_rejected(self):
        dom = build_domain(1, 1, 1, 1, 1, 1)
        model = FeaModel(dom, MaterialModel())
        dm = fixed_dofs_for_case(1, dom)
        f = np.full(dom.dof_count, np.nan)
        with pytest.raises(ValueError):
            model.solve(np.ones(1), f, dm)


class TestCompliance:
    def test_equals_f_dot_u(self):
        dom = build_domain(3, 2, 2, 3, 2, 2)
        mat = MaterialModel()
        model = FeaModel(dom, mat)
        dm = fixed_dofs_for_case(1, dom)
        rng = np.random.default_rng(5)
        dens = rng.uniform(0.3, 1.0, dom.element_count)
        f = rng.standard_normal(dom.dof_count)
        u = model.solve(dens, f, dm, tol=1e-12)
        c, _ = model.compliance_and_sensitivity(u, dens)
        f_free = np.where(dm.free_mask(), f, 0)
        assert c == pytest.approx(float(f_free @ u), rel=1e-8)
        assert c >= 0

    def test_single_element_matches_hand_assembly(self):
        dom = build_domain(1, 1, 1, 1, 1, 1)
        mat = MaterialModel()
        model = FeaModel(dom, mat)
        dm = fixed_dofs_for_case(1, dom)
        f = np.zeros(dom.dof_count)
        for iy in (0, 1):
            for iz in (0, 1):
                f[3 * dom.node_index(1, iy, iz)] = 0.25
        dens = np.array([0.8])
        u = model.solve(dens, f, dm, tol=1e-12)
        k = dense_stiffness(dom, dens, mat)
        c_ref = float(u @ k @ u)
        c, _ = model.compliance_and_sensitivity(u, dens)
        assert c == pytest.approx(c_ref, rel=1e-10)

    def test_sensitivity_matches_finite_differences(self):
        dom = build_domain(2, 2, 2, 2, 2, 2)
        mat = MaterialModel()
        model = FeaModel(dom, mat)
        dm = fixed_dofs_for_case(1, dom)
        rng = np.random.default_rng(17)
        dens = rng.uniform(0.3, 0.9, dom.element_count)
        f = np.zeros(dom.dof_count)
        for iy in range(3):
            for iz in range(3):
                f[3 * dom.node_index(2, iy, iz) + 2] = -1 / 9
        u = model.solve(dens, f, dm, tol=1e-12)
        _, dc = model.compliance_and_sensitivity(u, dens)
        ref = fd_compliance_gradient(dom, dens, f, dm.fixed_dofs, mat)
        assert np.all(dc <= 0)
        assert np.max(np.abs(dc - ref) / np.abs(ref)) < 1e-4
