"""Regular hexahedral design domain, node/DOF indexing, supports and loads.

Conventions used throughout the package:

* element linear index: ``e = ex + nx*ey + nx*ny*ez`` (x fastest),
* node linear index:    ``n = ix + (nx+1)*iy + (nx+1)*(ny+1)*iz``,
* DOF index:            ``3*n + axis`` with axis 0/1/2 = x/y/z,
* z is the vertical axis ("bottom" means z = 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GEOM_TOL = 1e-9


@dataclass(frozen=True)
class DesignDomain:
    """Regular grid of cubic 8-node hexahedra filling a rectangular beam."""

    nx: int
    ny: int
    nz: int
    lx: float
    ly: float
    lz: float
    h: float = field(init=False)
    element_count: int = field(init=False)
    node_count: int = field(init=False)

    def __post_init__(self):
        for n, name in ((self.nx, "nx"), (self.ny, "ny"), (self.nz, "nz")):
            if n < 1:
                raise ValueError(f"{name} must be >= 1, got {n}")
        hx, hy, hz = self.lx / self.nx, self.ly / self.ny, self.lz / self.nz
        if abs(hx - hy) > GEOM_TOL or abs(hx - hz) > GEOM_TOL:
            raise ValueError(
                "only cubic elements are supported: "
                f"lx/nx={hx}, ly/ny={hy}, lz/nz={hz} must agree"
            )
        object.__setattr__(self, "h", hx)
        object.__setattr__(self, "element_count", self.nx * self.ny * self.nz)
        object.__setattr__(
            self, "node_count", (self.nx + 1) * (self.ny + 1) * (self.nz + 1)
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def dof_count(self) -> int:
        return 3 * self.node_count

    @property
    def volume(self) -> float:
        return self.lx * self.ly * self.lz

    def node_index(self, ix, iy, iz):
        """Linear node index for grid coordinates (vectorized)."""
        return ix + (self.nx + 1) * (iy + (self.ny + 1) * np.asarray(iz))

    def element_index(self, ex, ey, ez):
        return ex + self.nx * (ey + self.ny * np.asarray(ez))


def build_domain(nx: int, ny: int, nz: int, lx: float, ly: float, lz: float) -> DesignDomain:
    """Construct a :class:`DesignDomain`, rejecting non-cubic element requests."""
    return DesignDomain(nx, ny, nz, float(lx), float(ly), float(lz))


def reference_domain() -> DesignDomain:
    """The 24 x 12 x 12 beam (2 m x 1 m x 1 m) used for data generation."""
    return build_domain(24, 12, 12, 2.0, 1.0, 1.0)


@dataclass(frozen=True)
class Load:
    """A unit point load anchored on a boundary face.

    ``anchor`` holds fractional coordinates in [0,1]^3 with at least one
    component on a face (0 or 1); ``direction`` is a unit vector and
    ``magnitude`` is +1 or -1.
    """

    anchor: tuple[float, float, float]
    direction: tuple[float, float, float]
    magnitude: float

    def __post_init__(self):
        a = np.asarray(self.anchor, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        if a.shape != (3,) or d.shape != (3,):
            raise ValueError("anchor and direction must be 3-vectors")
        if not (np.all(a >= -GEOM_TOL) and np.all(a <= 1 + GEOM_TOL)):
            raise ValueError(f"anchor {self.anchor} outside the unit cube")
        on_face = np.any(np.abs(a) <= GEOM_TOL) or np.any(np.abs(a - 1) <= GEOM_TOL)
        if not on_face:
            raise ValueError(f"anchor {self.anchor} does not lie on a boundary face")
        if abs(np.linalg.norm(d) - 1.0) > GEOM_TOL:
            raise ValueError(f"direction {self.direction} is not unit length")
        if self.magnitude not in (1.0, -1.0, 1, -1):
            raise ValueError(f"magnitude must be +1 or -1, got {self.magnitude}")
        object.__setattr__(self, "anchor", tuple(float(v) for v in a))
        object.__setattr__(self, "direction", tuple(float(v) for v in d))
        object.__setattr__(self, "magnitude", float(self.magnitude))


@dataclass(frozen=True)
class ProblemSpec:
    """One sampled compliance-minimization problem."""

    domain: DesignDomain
    volume_fraction: float
    loads: tuple[Load, ...]
    bc_case: int
    seed: int

    def __post_init__(self):
        if not (0.07 <= self.volume_fraction <= 0.5):
            raise ValueError(
                f"volume_fraction {self.volume_fraction} outside [0.07, 0.5]"
            )
        if not 1 <= len(self.loads) <= 10:
            raise ValueError(f"load count {len(self.loads)} outside [1, 10]")
        if self.bc_case not in (1, 2, 3, 4):
            raise ValueError(f"bc_case must be in {{1,2,3,4}}, got {self.bc_case}")
        object.__setattr__(self, "loads", tuple(self.loads))

    def to_dict(self) -> dict:
        return {
            "domain": {
                "nx": self.domain.nx, "ny": self.domain.ny, "nz": self.domain.nz,
                "lx": self.domain.lx, "ly": self.domain.ly, "lz": self.domain.lz,
            },
            "volume_fraction": self.volume_fraction,
            "bc_case": self.bc_case,
            "seed": self.seed,
            "loads": [
                {
                    "anchor": list(l.anchor),
                    "direction": list(l.direction),
                    "magnitude": l.magnitude,
                }
                for l in self.loads
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        dom = d["domain"]
        domain = build_domain(dom["nx"], dom["ny"], dom["nz"],
                              dom["lx"], dom["ly"], dom["lz"])
        loads = tuple(
            Load(tuple(l["anchor"]), tuple(l["direction"]), l["magnitude"])
            for l in d["loads"]
        )
        return cls(domain, d["volume_fraction"], loads, d["bc_case"], d["seed"])


@dataclass(frozen=True)
class DofMap:
    """Partition of global DOFs into fixed and free."""

    fixed_dofs: np.ndarray  # sorted unique int64 indices
    free_dof_count: int
    dof_count: int

    @classmethod
    def from_fixed(cls, fixed, dof_count: int) -> "DofMap":
        fixed = np.unique(np.asarray(fixed, dtype=np.int64))
        if fixed.size and (fixed[0] < 0 or fixed[-1] >= dof_count):
            raise ValueError("fixed DOF index out of range")
        fixed.setflags(write=False)
        return cls(fixed, dof_count - fixed.size, dof_count)

    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.dof_count, dtype=bool)
        mask[self.fixed_dofs] = False
        return mask

    def fixed_node_axes(self) -> np.ndarray:
        """Boolean (node_count, 3) array: which axes of each node are fixed."""
        mask = np.zeros(self.dof_count, dtype=bool)
        mask[self.fixed_dofs] = True
        return mask.reshape(-1, 3)


def _line_nodes(domain: DesignDomain, ix: int, iz: int) -> np.ndarray:
    iy = np.arange(domain.ny + 1)
    return domain.node_index(ix, iy, iz)


def fixed_dofs_for_case(bc_case: int, domain: DesignDomain) -> DofMap:
    """Fixed-DOF set for the four beam support cases.

    1. cantilever: x=0 face fixed in x, y, z.
    2. simply supported: bottom node line at x=0 fixed in x,y,z, bottom
       line at x=lx fixed in y,z.
    3. modified simply supported: bottom lines at the node planes nearest
       x=lx/4 and x=3lx/4 fixed in y,z, plus node (0,0,0) fixed in x.
    4. constrained cantilever: x=0 face fixed in x,y,z, x=lx face fixed
       in y,z.
    """
    if bc_case not in (1, 2, 3, 4):
        raise ValueError(f"bc_case must be in {{1,2,3,4}}, got {bc_case}")
    nx, ny, nz = domain.nx, domain.ny, domain.nz
    fixed: list[np.ndarray] = []

    def fix_nodes(nodes, axes):
        nodes = np.asarray(nodes, dtype=np.int64).ravel()
        for ax in axes:
            fixed.append(3 * nodes + ax)

    iy, iz = np.meshgrid(np.arange(ny + 1), np.arange(nz + 1), indexing="ij")
    if bc_case == 1:
        fix_nodes(domain.node_index(0, iy, iz), (0, 1, 2))
    elif bc_case == 2:
        fix_nodes(_line_nodes(domain, 0, 0), (0, 1, 2))
        fix_nodes(_line_nodes(domain, nx, 0), (1, 2))
    elif bc_case == 3:
        for ix in (round(nx / 4), round(3 * nx / 4)):
            fix_nodes(_line_nodes(domain, ix, 0), (1, 2))
        fix_nodes([domain.node_index(0, 0, 0)], (0,))
    else:
        fix_nodes(domain.node_index(0, iy, iz), (0, 1, 2))
        fix_nodes(domain.node_index(nx, iy, iz), (1, 2))

    return DofMap.from_fixed(np.concatenate(fixed), domain.dof_count)


def snap_anchor(load: Load, domain: DesignDomain) -> tuple[int, int, int]:
    """Nearest grid node to the load's fractional anchor."""
    fx, fy, fz = load.anchor
    return (
        int(round(fx * domain.nx)),
        int(round(fy * domain.ny)),
        int(round(fz * domain.nz)),
    )


def distribute_load(load: Load, domain: DesignDomain) -> np.ndarray:
    """Spread a point load over the nodes within one element size of its anchor.

    Equal shares over every grid node with Euclidean distance <= h from the
    snapped anchor node, so the nodal forces sum to magnitude * direction.

    Returns
    -------
    (node_count, 3) float array of nodal force components.
    """
    ax, ay, az = snap_anchor(load, domain)
    recipients = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                ix, iy, iz = ax + dx, ay + dy, az + dz
                if not (0 <= ix <= domain.nx and 0 <= iy <= domain.ny
                        and 0 <= iz <= domain.nz):
                    continue
                dist = domain.h * np.sqrt(dx * dx + dy * dy + dz * dz)
                if dist <= domain.h * (1 + GEOM_TOL):
                    recipients.append(domain.node_index(ix, iy, iz))
    forces = np.zeros((domain.node_count, 3))
    share = load.magnitude * np.asarray(load.direction) / len(recipients)
    forces[np.asarray(recipients, dtype=np.int64)] = share
    return forces


def nodal_forces(problem: ProblemSpec) -> np.ndarray:
    """Total nodal force field of all loads, shape (node_count, 3)."""
    total = np.zeros((problem.domain.node_count, 3))
    for load in problem.loads:
        total += distribute_load(load, problem.domain)
    return total
