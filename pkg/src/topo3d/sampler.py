"""Stochastic generation of optimization problems.

All draws are made through explicit, platform-stable schemes on top of a
seeded uniform stream: the normal via the inverse CDF, the Poisson by CDF
inversion. Truncation is by redraw, never by clipping, so no probability
mass piles up on the bounds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .domain import DesignDomain, Load, ProblemSpec

_FACE_AXIS = (0, 0, 1, 1, 2, 2)   # faces: x=0, x=1, y=0, y=1, z=0, z=1
_FACE_SIDE = (0, 1, 0, 1, 0, 1)
# in-face coordinate ranges: x in [0,1], y and z in [0,0.5] (fractions)
_COORD_RANGE = (1.0, 0.5, 0.5)


@dataclass(frozen=True)
class SamplerConfig:
    vf_mean: float = 0.28
    vf_std: float = 0.07
    vf_clamp: tuple[float, float] = (0.07, 0.5)
    load_lambda: float = 4.0
    load_clamp: tuple[int, int] = (1, 10)
    bc_cases: tuple[int, ...] = (1, 2, 3, 4)
    seed: int = 0

    def __post_init__(self):
        if self.vf_clamp[0] >= self.vf_clamp[1] or self.load_clamp[0] > self.load_clamp[1]:
            raise ValueError("clamp bounds must be well ordered")
        if self.load_lambda <= 0:
            raise ValueError("load_lambda must be positive")


def _normal(rng: np.random.Generator, mean: float, std: float) -> float:
    u = rng.random()
    while u == 0.0:  # ndtri(0) is -inf
        u = rng.random()
    return mean + std * float(ndtri(u))


def _poisson(rng: np.random.Generator, lam: float) -> int:
    """Poisson draw by inversion of the CDF."""
    u = rng.random()
    k = 0
    pmf = math.exp(-lam)
    cdf = pmf
    while u > cdf:
        k += 1
        pmf *= lam / k
        cdf += pmf
        if k > 10_000:  # cdf saturates long before this
            break
    return k


def sample_volume_fraction(rng: np.random.Generator,
                           config: SamplerConfig = SamplerConfig()) -> float:
    """Normal(0.28, 0.07) redrawn until inside the clamp interval."""
    lo, hi = config.vf_clamp
    while True:
        v = _normal(rng, config.vf_mean, config.vf_std)
        if lo <= v <= hi:
            return v


def truncated_poisson(rng: np.random.Generator, lam: float,
                      lo: int, hi: int) -> int:
    while True:
        k = _poisson(rng, lam)
        if lo <= k <= hi:
            return k


def sample_loads(rng: np.random.Generator, domain: DesignDomain,
                 config: SamplerConfig = SamplerConfig()) -> tuple[Load, ...]:
    """Poisson-distributed load count, anchors on random faces, unit directions."""
    count = truncated_poisson(rng, config.load_lambda, *config.load_clamp)
    loads = []
    for _ in range(count):
        face = int(rng.integers(6))
        axis, side = _FACE_AXIS[face], _FACE_SIDE[face]
        anchor = [0.0, 0.0, 0.0]
        anchor[axis] = float(side)
        for other in range(3):
            if other != axis:
                anchor[other] = float(rng.random()) * _COORD_RANGE[other]
        while True:
            d = rng.random(3)
            norm = float(np.linalg.norm(d))
            if norm > 1e-12:
                break
        direction = tuple(d / norm)
        magnitude = 1.0 if rng.random() < 0.5 else -1.0
        loads.append(Load(tuple(anchor), direction, magnitude))
    return tuple(loads)


def sample_problem(rng: np.random.Generator, domain: DesignDomain,
                   config: SamplerConfig = SamplerConfig(),
                   seed: int | None = None) -> ProblemSpec:
    """Assemble one problem; deterministic for a given generator state."""
    vf = sample_volume_fraction(rng, config)
    loads = sample_loads(rng, domain, config)
    bc_case = int(config.bc_cases[rng.integers(len(config.bc_cases))])
    return ProblemSpec(domain, vf, loads, bc_case,
                       seed if seed is not None else config.seed)


def problem_for_seed(seed: int, domain: DesignDomain,
                     config: SamplerConfig = SamplerConfig()) -> ProblemSpec:
    """The problem a fresh PCG64 stream at ``seed`` produces."""
    rng = np.random.default_rng(seed)
    return sample_problem(rng, domain, config, seed=seed)


def sample_batch(base_seed: int, count: int, domain: DesignDomain,
                 config: SamplerConfig = SamplerConfig()) -> list[ProblemSpec]:
    """Independent problems at seeds base_seed .. base_seed + count - 1."""
    return [problem_for_seed(base_seed + i, domain, config) for i in range(count)]
