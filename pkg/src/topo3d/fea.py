"""Linear-elastic FEA on the voxel grid.

Element: trilinear 8-node hexahedron with edge h, integrated with 2x2x2
Gauss quadrature. The global operator is never assembled; equilibrium is
solved matrix-free with Jacobi-preconditioned conjugate gradients. All
scatter reductions go through ``np.bincount`` so results are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import DesignDomain, DofMap

# local corner order of the H8 element: (xi, eta, zeta) signs
_CORNERS = np.array([
    [-1, -1, -1],
    [+1, -1, -1],
    [+1, +1, -1],
    [-1, +1, -1],
    [-1, -1, +1],
    [+1, -1, +1],
    [+1, +1, +1],
    [-1, +1, +1],
], dtype=float)

# grid offsets of the same corners, consistent with _CORNERS
_CORNER_OFFSETS = ((_CORNERS + 1) // 2).astype(np.int64)


@dataclass(frozen=True)
class MaterialModel:
    """Isotropic SIMP material: modulus interpolated between e_min and e0."""

    e0: float = 1.0
    e_min: float = 1e-9
    p: float = 3.0
    nu: float = 0.3

    def __post_init__(self):
        if not 0 < self.e_min < self.e0:
            raise ValueError("need 0 < e_min < e0")
        if self.p < 1:
            raise ValueError("penalization exponent must be >= 1")
        if not 0 <= self.nu < 0.5:
            raise ValueError("Poisson ratio must be in [0, 0.5)")


def simp_modulus(x, material: MaterialModel):
    """Modified-SIMP modulus e_min + (e0 - e_min) * x**p (vectorized)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("densities must lie in [0, 1]")
    return material.e_min + (material.e0 - material.e_min) * x ** material.p


def element_stiffness(material: MaterialModel, h: float) -> np.ndarray:
    """24x24 stiffness of a cubic H8 element at unit Young's modulus.

    SIMP modulus scaling is applied separately by the solver, so only the
    Poisson ratio and the edge length enter here.
    """
    if h <= 0:
        raise ValueError("element edge length must be positive")
    nu = material.nu
    d = np.zeros((6, 6))
    c = 1.0 / ((1 + nu) * (1 - 2 * nu))
    d[:3, :3] = nu * c
    np.fill_diagonal(d[:3, :3], (1 - nu) * c)
    np.fill_diagonal(d[3:, 3:], (1 - 2 * nu) / 2 * c)

    g = 1.0 / np.sqrt(3.0)
    ke = np.zeros((24, 24))
    det_j = (h / 2) ** 3
    for gx in (-g, g):
        for gy in (-g, g):
            for gz in (-g, g):
                b = _strain_matrix(gx, gy, gz, h)
                ke += b.T @ d @ b * det_j
    return ke


def _strain_matrix(xi: float, eta: float, zeta: float, h: float) -> np.ndarray:
    """6x24 strain-displacement matrix at one quadrature point."""
    s = _CORNERS
    # derivatives of the trilinear shape functions w.r.t. physical coords
    dn = np.empty((8, 3))
    dn[:, 0] = s[:, 0] * (1 + s[:, 1] * eta) * (1 + s[:, 2] * zeta)
    dn[:, 1] = (1 + s[:, 0] * xi) * s[:, 1] * (1 + s[:, 2] * zeta)
    dn[:, 2] = (1 + s[:, 0] * xi) * (1 + s[:, 1] * eta) * s[:, 2]
    dn *= (2 / h) / 8
    b = np.zeros((6, 24))
    for a in range(8):
        c = 3 * a
        b[0, c] = dn[a, 0]
        b[1, c + 1] = dn[a, 1]
        b[2, c + 2] = dn[a, 2]
        b[3, c] = dn[a, 1]       # gamma_xy
        b[3, c + 1] = dn[a, 0]
        b[4, c + 1] = dn[a, 2]   # gamma_yz
        b[4, c + 2] = dn[a, 1]
        b[5, c] = dn[a, 2]       # gamma_zx
        b[5, c + 2] = dn[a, 0]
    return b


def element_dof_table(domain: DesignDomain) -> np.ndarray:
    """(element_count, 24) table of global DOF indices per element."""
    ex, ey, ez = np.meshgrid(
        np.arange(domain.nx), np.arange(domain.ny), np.arange(domain.nz),
        indexing="ij",
    )
    ex = ex.ravel(order="F")
    ey = ey.ravel(order="F")
    ez = ez.ravel(order="F")
    edof = np.empty((domain.element_count, 24), dtype=np.int64)
    for a, (dx, dy, dz) in enumerate(_CORNER_OFFSETS):
        nodes = domain.node_index(ex + dx, ey + dy, ez + dz)
        edof[:, 3 * a] = 3 * nodes
        edof[:, 3 * a + 1] = 3 * nodes + 1
        edof[:, 3 * a + 2] = 3 * nodes + 2
    return edof


class ConvergenceError(RuntimeError):
    """PCG failed to reach the requested tolerance within the iteration cap."""

    def __init__(self, message: str, residuals: np.ndarray):
        super().__init__(message)
        self.residuals = residuals


class FeaModel:
    """Matrix-free stiffness operator for one domain and material.

    Precomputes the unit element stiffness and the element DOF table once;
    individual solves then only depend on the density field and loads.
    """

    def __init__(self, domain: DesignDomain, material: MaterialModel):
        self.domain = domain
        self.material = material
        self.ke = element_stiffness(material, domain.h)
        self.ke_diag = np.diag(self.ke).copy()
        self.edof = element_dof_table(domain)
        self._edof_flat = self.edof.ravel()
        # scratch buffers reused across applies (one solve at a time per model)
        self._ue = np.empty((domain.element_count, 24))
        self._fe = np.empty((domain.element_count, 24))

    def moduli(self, densities: np.ndarray) -> np.ndarray:
        return simp_modulus(np.asarray(densities).ravel(order="F"), self.material)

    def apply(self, scale: np.ndarray, u: np.ndarray) -> np.ndarray:
        """y = K(scale) @ u with per-element modulus ``scale``."""
        np.take(u, self._edof_flat, out=self._ue.reshape(-1))
        np.dot(self._ue, self.ke, out=self._fe)
        self._fe *= scale[:, None]
        return np.bincount(self._edof_flat, weights=self._fe.reshape(-1),
                           minlength=u.size)

    def jacobi_diagonal(self, scale: np.ndarray) -> np.ndarray:
        contrib = scale[:, None] * self.ke_diag[None, :]
        return np.bincount(self._edof_flat, weights=contrib.ravel(),
                           minlength=3 * self.domain.node_count)

    def solve(
        self,
        densities: np.ndarray,
        f: np.ndarray,
        dofs: DofMap,
        tol: float = 1e-8,
        u0: np.ndarray | None = None,
        max_iters: int | None = None,
    ) -> np.ndarray:
        """Equilibrium displacements with ||K u - f|| / ||f|| <= tol on free DOFs."""
        f = np.asarray(f, dtype=float).ravel()
        if f.size != dofs.dof_count:
            raise ValueError("force vector length does not match DOF count")
        if not np.all(np.isfinite(f)):
            raise ValueError("force vector contains non-finite entries")
        free = dofs.free_mask()
        b = np.where(free, f, 0.0)
        b_norm = np.linalg.norm(b)
        if b_norm == 0.0:
            return np.zeros_like(b)

        scale = self.moduli(densities)
        diag = self.jacobi_diagonal(scale)
        inv_diag = np.where(free, 1.0 / np.where(diag > 0, diag, 1.0), 0.0)

        fixed = dofs.fixed_dofs
        u = np.zeros_like(b)
        if u0 is not None:
            u = np.where(free, u0, 0.0)
        ku = self.apply(scale, u)
        ku[fixed] = 0.0
        r = b - ku
        z = inv_diag * r
        p = z.copy()
        rz = r @ z
        cap = max_iters if max_iters is not None else 10 * dofs.free_dof_count
        residuals = [np.linalg.norm(r) / b_norm]
        if residuals[0] <= tol:
            return u
        for _ in range(cap):
            kp = self.apply(scale, p)
            kp[fixed] = 0.0
            alpha = rz / (p @ kp)
            u += alpha * p
            r -= alpha * kp
            res = np.linalg.norm(r) / b_norm
            residuals.append(res)
            if res <= tol:
                return u
            z = inv_diag * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        raise ConvergenceError(
            f"PCG did not reach tol={tol} within {cap} iterations "
            f"(last residual {residuals[-1]:.3e})",
            np.asarray(residuals),
        )

    def compliance_and_sensitivity(
        self, u: np.ndarray, densities: np.ndarray
    ) -> tuple[float, np.ndarray]:
        """Compliance u'Ku and its derivative w.r.t. each element density.

        The derivative is the adjoint-form total derivative
        -p * x**(p-1) * (e0 - e_min) * u_e' K0 u_e, which is <= 0.
        """
        x = np.asarray(densities, dtype=float)
        flat = x.ravel(order="F")
        ue = u[self.edof]
        energies = np.einsum("ei,ij,ej->e", ue, self.ke, ue)
        m = self.material
        c = float(np.sum(simp_modulus(flat, m) * energies))
        dc = -m.p * flat ** (m.p - 1) * (m.e0 - m.e_min) * energies
        return c, dc.reshape(x.shape, order="F") if x.ndim == 3 else dc


def solve_equilibrium(
    densities: np.ndarray,
    f: np.ndarray,
    dofs: DofMap,
    domain: DesignDomain,
    material: MaterialModel,
    tol: float = 1e-8,
) -> np.ndarray:
    """One-shot equilibrium solve (builds a throwaway :class:`FeaModel`)."""
    return FeaModel(domain, material).solve(densities, f, dofs, tol=tol)


def compliance_and_sensitivity(
    u: np.ndarray,
    densities: np.ndarray,
    domain: DesignDomain,
    material: MaterialModel,
) -> tuple[float, np.ndarray]:
    return FeaModel(domain, material).compliance_and_sensitivity(u, densities)
