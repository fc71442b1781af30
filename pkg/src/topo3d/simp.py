"""SIMP compliance minimization: density filter, OC update, iteration trace."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .domain import DesignDomain, ProblemSpec, fixed_dofs_for_case, nodal_forces
from .fea import FeaModel, MaterialModel


class FilterKernel:
    """Neighborhood density filter with weights r_min - dist(i, j).

    Stored as a sparse matrix H with H[i, j] = (r_min - dist(i, j)) * v_j over
    the neighborhood dist <= r_min, plus the row sums; both the filter and its
    chain rule are then sparse matvecs.
    """

    def __init__(self, domain: DesignDomain, r_min: float):
        if r_min <= 0:
            raise ValueError("filter radius must be positive")
        self.domain = domain
        self.r_min = float(r_min)
        h = domain.h
        reach = int(np.floor(self.r_min / h))
        offsets = []
        weights = []
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    dist = h * np.sqrt(dx * dx + dy * dy + dz * dz)
                    if dist <= self.r_min:
                        offsets.append((dx, dy, dz))
                        weights.append(self.r_min - dist)
        nx, ny, nz = domain.shape
        ex, ey, ez = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        ex = ex.ravel(order="F")
        ey = ey.ravel(order="F")
        ez = ez.ravel(order="F")
        rows, cols, vals = [], [], []
        v = h ** 3
        for (dx, dy, dz), w in zip(offsets, weights):
            jx, jy, jz = ex + dx, ey + dy, ez + dz
            ok = ((0 <= jx) & (jx < nx) & (0 <= jy) & (jy < ny)
                  & (0 <= jz) & (jz < nz))
            rows.append(np.flatnonzero(ok))
            cols.append(domain.element_index(jx[ok], jy[ok], jz[ok]))
            vals.append(np.full(int(ok.sum()), w * v))
        n = domain.element_count
        self._h = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
        self._row_sums = np.asarray(self._h.sum(axis=1)).ravel()

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Filtered field: weighted neighborhood average, shape preserved."""
        x = np.asarray(x, dtype=float)
        flat = x.ravel(order="F")
        out = (self._h @ flat) / self._row_sums
        # a weighted average cannot leave [min, max]; clip off rounding noise
        np.clip(out, flat.min(), flat.max(), out=out)
        return out.reshape(x.shape, order="F") if x.ndim == 3 else out

    def chain(self, dc: np.ndarray) -> np.ndarray:
        """Pull sensitivities w.r.t. filtered densities back to the design field."""
        dc = np.asarray(dc, dtype=float)
        flat = dc.ravel(order="F")
        out = self._h.T @ (flat / self._row_sums)
        return out.reshape(dc.shape, order="F") if dc.ndim == 3 else out

    def neighbor_count(self, i: int) -> int:
        return self._h.indptr[i + 1] - self._h.indptr[i]


def density_filter(x: np.ndarray, kernel: FilterKernel) -> np.ndarray:
    return kernel.apply(x)


def oc_update(
    x: np.ndarray,
    dc: np.ndarray,
    v0: float,
    kernel: FilterKernel,
    move_limit: float = 0.2,
    damping: float = 0.5,
    volume_tol: float = 1e-4,
) -> np.ndarray:
    """Optimality-criteria step under the filtered volume constraint.

    The Lagrange multiplier is bisected until the filtered design occupies
    v0 * V within volume_tol * V. dc must be the (chain-ruled) compliance
    sensitivity, which is non-positive.
    """
    x = np.asarray(x, dtype=float).ravel()
    dc = np.asarray(dc, dtype=float).ravel()
    if np.any(dc > 0):
        raise ValueError("compliance sensitivities must be <= 0")
    n = x.size
    lower = np.maximum(x - move_limit, 0.0)
    upper = np.minimum(x + move_limit, 1.0)

    def candidate(lam):
        return np.clip(x * (-dc / lam) ** damping, lower, upper)

    def mean_filtered(lam):
        # element volumes are uniform, so the constraint reduces to the mean
        return float(np.mean(kernel.apply(candidate(lam))))

    # bracket the multiplier: mean_filtered is non-increasing in lambda
    lam_lo, lam_hi = 1e-9, 1e9
    for _ in range(200):
        if mean_filtered(lam_lo) >= v0:
            break
        lam_lo /= 16.0
    else:
        raise RuntimeError("OC bisection failed to bracket from below")
    for _ in range(200):
        if mean_filtered(lam_hi) <= v0:
            break
        lam_hi *= 16.0
    else:
        raise RuntimeError("OC bisection failed to bracket from above")

    # bisect (geometrically) until the interval collapses, not merely until
    # the volume tolerance holds: a loose multiplier jitters from iteration
    # to iteration and keeps the outer loop from ever settling
    for _ in range(300):
        if lam_hi / lam_lo <= 1 + 1e-12:
            break
        lam = np.sqrt(lam_lo * lam_hi)
        if mean_filtered(lam) > v0:
            lam_lo = lam
        else:
            lam_hi = lam
    out = candidate(np.sqrt(lam_lo * lam_hi))
    vol = float(np.mean(kernel.apply(out)))
    if abs(vol - v0) > volume_tol:
        raise RuntimeError(
            f"OC bisection left the volume at {vol}, outside "
            f"{v0} +/- {volume_tol}")
    return out


@dataclass
class SimpConfig:
    """Knobs of the optimization loop; defaults match the reference runs."""

    material: MaterialModel = field(default_factory=MaterialModel)
    r_min_elems: float = 1.5          # filter radius in element widths
    move_limit: float = 0.2
    damping: float = 0.5
    change_tol: float = 0.01          # max |x_next - x| convergence criterion
    max_iters: int = 200
    fea_tol: float = 1e-5             # residual tolerance inside the loop
    volume_tol: float = 1e-4


@dataclass
class IterationTrace:
    """Full history of one optimization run.

    fields[t] is the physical (filtered) density grid after iteration t;
    fields[0] is the uniform start at the prescribed volume fraction.
    """

    problem: ProblemSpec
    fields: list[np.ndarray]
    compliances: list[float]
    wall_times: list[float]
    converged_at: int
    converged: bool
    max_changes: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.fields)

    @property
    def final(self) -> np.ndarray:
        return self.fields[-1]

    def validate(self):
        if len(self.fields) != self.converged_at + 1:
            raise ValueError("trace indices are not contiguous from 0 to T")
        v0 = self.problem.volume_fraction
        if not np.allclose(self.fields[0], v0):
            raise ValueError("trace entry 0 is not the uniform start field")
        for f in self.fields:
            if f.min() < 0 or f.max() > 1:
                raise ValueError("recorded density outside [0, 1]")


def run_simp(problem: ProblemSpec, config: SimpConfig | None = None) -> IterationTrace:
    """Optimize one problem, recording every iterate.

    Loop: filter -> equilibrium solve -> compliance/sensitivity -> OC update,
    until the max design change drops below change_tol or the cap is hit.
    """
    config = config or SimpConfig()
    domain = problem.domain
    kernel = FilterKernel(domain, config.r_min_elems * domain.h)
    model = FeaModel(domain, config.material)
    dofs = fixed_dofs_for_case(problem.bc_case, domain)
    f = nodal_forces(problem).ravel()
    v0 = problem.volume_fraction

    t0 = time.perf_counter()
    x = np.full(domain.element_count, v0)
    x_phys = x.copy()  # the filter maps a uniform field to itself
    u = model.solve(x_phys, f, dofs, tol=config.fea_tol)
    c, dc = model.compliance_and_sensitivity(u, x_phys)

    fields = [x_phys.reshape(domain.shape, order="F")]
    compliances = [c]
    wall_times = [time.perf_counter() - t0]
    max_changes = [np.inf]
    converged = False
    t = 0
    for t in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        dc_x = kernel.chain(dc)
        x_next = oc_update(x, dc_x, v0, kernel, config.move_limit,
                           config.damping, config.volume_tol)
        change = float(np.max(np.abs(x_next - x)))
        x = x_next
        x_phys = kernel.apply(x)
        u = model.solve(x_phys, f, dofs, tol=config.fea_tol, u0=u)
        c, dc = model.compliance_and_sensitivity(u, x_phys)

        fields.append(x_phys.reshape(domain.shape, order="F"))
        compliances.append(c)
        wall_times.append(time.perf_counter() - t0)
        max_changes.append(change)
        if change < config.change_tol:
            converged = True
            break

    return IterationTrace(problem, fields, compliances, wall_times,
                          converged_at=t, converged=converged,
                          max_changes=max_changes)
