"""Training-data pipeline: channel tensors, sampling strategies, persistence.

Record files are little-endian and fully specified so they reproduce
bit-exactly across platforms:

* dataset shard: magic ``TOPO3DDS``, u32 version, u32 nx/ny/nz, u64 record
  count; per record a 32-byte metadata block (u32 m, n, T, flags, u64 seed,
  u64 reserved) followed by 8 channel grids and the target grid as float32,
  x-fastest.
* field stack: magic ``TOPO3DFS``, same header, bare float32 grids.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .domain import DofMap, ProblemSpec, fixed_dofs_for_case, nodal_forces
from .simp import IterationTrace

FORMAT_VERSION = 1
RECORD_MAGIC = b"TOPO3DDS"
FIELD_MAGIC = b"TOPO3DFS"

CHANNEL_NAMES = (
    "density", "gradient",
    "force_x", "force_y", "force_z",
    "constraint_x", "constraint_y", "constraint_z",
)
CHANNEL_GROUPS = {
    "density": (0,),
    "gradient": (1,),
    "boundary": (2, 3, 4, 5, 6, 7),
}
STRATEGIES = ("uniform", "poisson5", "poisson10", "poisson30")
_STRATEGY_LAMBDA = {"poisson5": 5.0, "poisson10": 10.0, "poisson30": 30.0}


class DatasetFormatError(Exception):
    """Base for malformed dataset files."""


class MagicError(DatasetFormatError):
    pass


class VersionError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class ChannelTensor:
    """8 stacked scalar grids: density, density gradient, forces, constraints."""

    data: np.ndarray  # (8, nx, ny, nz) float32

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or d.shape[0] != 8 or d.dtype != np.float32:
            raise ValueError("channel tensor must be (8, nx, ny, nz) float32")
        if d[0].min() < 0 or d[0].max() > 1:
            raise ValueError("density channel outside [0, 1]")
        if d[1].min() < -1 or d[1].max() > 1:
            raise ValueError("gradient channel outside [-1, 1]")
        if not np.isin(d[5:8], (-1.0, 0.0, 1.0)).all():
            raise ValueError("constraint channels must be in {-1, 0, 1}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def subset(self, channel_ids) -> np.ndarray:
        return self.data[list(channel_ids)]


@dataclass(frozen=True)
class SampleRecord:
    """One training record: channels at (m, n) plus the converged target."""

    channels: ChannelTensor
    target: np.ndarray  # (nx, ny, nz) float32
    m: int
    n: int
    seed: int
    total_iterations: int

    def __post_init__(self):
        if not 0 <= self.n < self.m <= self.total_iterations:
            raise ValueError(
                f"need 0 <= n < m <= T, got n={self.n} m={self.m} "
                f"T={self.total_iterations}"
            )
        if self.target.shape != self.channels.shape:
            raise ValueError("target shape does not match channels")
        if self.target.dtype != np.float32:
            raise ValueError("target must be float32")


def voxel_force_channels(problem: ProblemSpec) -> np.ndarray:
    """(3, nx, ny, nz) per-voxel force components, mean of the 8 corner nodes."""
    dom = problem.domain
    nodal = nodal_forces(problem)  # (node_count, 3)
    grid = nodal.reshape(dom.nx + 1, dom.ny + 1, dom.nz + 1, 3, order="F")
    out = np.zeros((3, dom.nx, dom.ny, dom.nz))
    for a in range(3):
        g = grid[..., a]
        acc = np.zeros((dom.nx, dom.ny, dom.nz))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    acc += g[dx:dom.nx + dx, dy:dom.ny + dy, dz:dom.nz + dz]
        out[a] = acc / 8.0
    return out


def voxel_constraint_channels(dofs: DofMap, shape: tuple[int, int, int]) -> np.ndarray:
    """(3, nx, ny, nz) constraint indicators.

    1 where any of the voxel's 8 nodes is fixed along that axis, otherwise
    -1 on the beam surface and 0 in the interior.
    """
    nx, ny, nz = shape
    node_fixed = dofs.fixed_node_axes().reshape(nx + 1, ny + 1, nz + 1, 3, order="F")
    surface = np.zeros((nx, ny, nz), dtype=bool)
    surface[[0, -1], :, :] = True
    surface[:, [0, -1], :] = True
    surface[:, :, [0, -1]] = True
    out = np.zeros((3, nx, ny, nz))
    for a in range(3):
        g = node_fixed[..., a]
        touched = np.zeros((nx, ny, nz), dtype=bool)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    touched |= g[dx:nx + dx, dy:ny + dy, dz:nz + dz]
        out[a] = np.where(touched, 1.0, np.where(surface, -1.0, 0.0))
    return out


@lru_cache(maxsize=32)
def _static_channels(problem: ProblemSpec) -> np.ndarray:
    """Force and constraint channels, which depend on the problem only."""
    dom = problem.domain
    static = np.empty((6,) + dom.shape)
    static[0:3] = voxel_force_channels(problem)
    dofs = fixed_dofs_for_case(problem.bc_case, dom)
    static[3:6] = voxel_constraint_channels(dofs, dom.shape)
    return static


def _pair_channels(trace: IterationTrace, m: int, n: int) -> ChannelTensor:
    dom = trace.problem.domain
    data = np.zeros((8,) + dom.shape, dtype=np.float32)
    data[0] = trace.fields[m]
    data[1] = trace.fields[m] - trace.fields[n]
    data[2:8] = _static_channels(trace.problem)
    return ChannelTensor(data)


def encode_channels(trace: IterationTrace, m: int, n: int) -> ChannelTensor:
    """Channel tensor for iteration pair (m, n), n strictly before m."""
    if not 0 <= n < m <= len(trace) - 1:
        raise ValueError(f"need 0 <= n < m <= T={len(trace) - 1}, got m={m} n={n}")
    return _pair_channels(trace, m, n)


def encode_record(trace: IterationTrace, m: int, n: int) -> SampleRecord:
    return SampleRecord(
        channels=encode_channels(trace, m, n),
        target=trace.final.astype(np.float32),
        m=m, n=n,
        seed=trace.problem.seed,
        total_iterations=len(trace) - 1,
    )


def sample_iteration_pair(strategy: str, total_iterations: int,
                          rng: np.random.Generator) -> tuple[int, int]:
    """Draw (m, n) per strategy: m in [1, T-1] (redraw to clamp), n uniform < m."""
    from .sampler import _poisson  # shared CDF-inversion Poisson

    t = total_iterations
    if t < 2:
        raise ValueError("need at least 2 iterations to sample a pair")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "uniform":
        m = int(rng.integers(1, t))
    else:
        lam = _STRATEGY_LAMBDA[strategy]
        while True:
            m = _poisson(rng, lam)
            if 1 <= m <= t - 1:
                break
    n = int(rng.integers(0, m))
    return m, n


# rotations that can preserve the grid shape: name -> (spatial map on a
# (nx, ny, nz) array, source-axis permutation, per-axis sign for vectors)
_ROTATIONS = {
    "x90": (lambda a: np.flip(a.transpose(0, 2, 1), axis=1), (0, 2, 1), (1, -1, 1)),
    "x180": (lambda a: np.flip(a, axis=(1, 2)), (0, 1, 2), (1, -1, -1)),
    "x270": (lambda a: np.flip(a.transpose(0, 2, 1), axis=2), (0, 2, 1), (1, 1, -1)),
    "y180": (lambda a: np.flip(a, axis=(0, 2)), (0, 1, 2), (-1, 1, -1)),
    "z180": (lambda a: np.flip(a, axis=(0, 1)), (0, 1, 2), (-1, -1, 1)),
}
ROTATION_NAMES = tuple(_ROTATIONS)


def valid_rotations(shape: tuple[int, int, int]) -> tuple[str, ...]:
    nx, ny, nz = shape
    return ROTATION_NAMES if ny == nz else ("x180", "y180", "z180")


def rotate_record(record: SampleRecord, rotation: str) -> SampleRecord:
    """Apply one grid symmetry consistently to every channel and the target.

    Scalar channels move spatially; force channels additionally permute and
    flip sign as vector components; constraint channels permute across axes.
    """
    if rotation not in _ROTATIONS:
        raise ValueError(f"unknown rotation {rotation!r}")
    if rotation not in valid_rotations(record.channels.shape):
        raise ValueError(f"rotation {rotation!r} changes the grid shape "
                         f"{record.channels.shape}")
    spatial, perm, sign = _ROTATIONS[rotation]
    old = record.channels.data
    new = np.empty_like(old)
    new[0] = spatial(old[0])
    new[1] = spatial(old[1])
    for a in range(3):
        new[2 + a] = sign[a] * spatial(old[2 + perm[a]])
        new[5 + a] = spatial(old[5 + perm[a]])
    return SampleRecord(
        channels=ChannelTensor(np.ascontiguousarray(new)),
        target=np.ascontiguousarray(spatial(record.target)),
        m=record.m, n=record.n,
        seed=record.seed,
        total_iterations=record.total_iterations,
    )


def augment_rotate(record: SampleRecord, rng: np.random.Generator) -> SampleRecord:
    """Rotate by a symmetry drawn uniformly from the shape-preserving set."""
    names = valid_rotations(record.channels.shape)
    return rotate_record(record, names[int(rng.integers(len(names)))])


def augment_records(records, rng: np.random.Generator,
                    fraction: float = 0.4) -> list[SampleRecord]:
    """Independently rotate each record with the given probability."""
    return [
        augment_rotate(r, rng) if rng.random() < fraction else r
        for r in records
    ]


@dataclass(frozen=True)
class DatasetManifest:
    record_count: int
    train_count: int
    val_count: int
    test_count: int
    strategy: str
    format_version: int
    seeds: tuple[int, ...]
    split_seed: int
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.train_count + self.val_count + self.test_count != self.record_count:
            raise ValueError("split counts must partition the record count")

    def to_json(self) -> str:
        d = {
            "record_count": self.record_count,
            "train_count": self.train_count,
            "val_count": self.val_count,
            "test_count": self.test_count,
            "strategy": self.strategy,
            "format_version": self.format_version,
            "seeds": list(self.seeds),
            "split_seed": self.split_seed,
            "extras": self.extras,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            d["record_count"], d["train_count"], d["val_count"],
            d["test_count"], d["strategy"], d["format_version"],
            tuple(d["seeds"]), d["split_seed"], d.get("extras", {}),
        )


def split_counts(n: int) -> tuple[int, int, int]:
    """75% train, 1/12 validation, remainder test (floor then remainder)."""
    train = int(np.floor(0.75 * n))
    val = int(np.floor(n / 12))
    return train, val, n - train - val


def split_dataset(records, seed: int, strategy: str = "uniform"):
    """Deterministic shuffled 75 / 8.33 / 16.67 split.

    Returns (train, val, test) lists and a manifest.
    """
    if len(records) < 3:
        raise ValueError("need at least 3 records to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_train, n_val, n_test = split_counts(len(records))
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train:n_train + n_val]]
    test = [records[i] for i in order[n_train + n_val:]]
    manifest = DatasetManifest(
        record_count=len(records),
        train_count=n_train, val_count=n_val, test_count=n_test,
        strategy=strategy, format_version=FORMAT_VERSION,
        seeds=tuple(sorted({r.seed for r in records})),
        split_seed=seed,
    )
    return train, val, test, manifest


# ---------------------------------------------------------------------------
# binary persistence

_HEADER = struct.Struct("<8sIIIIQ")          # magic, version, nx, ny, nz, count
_RECORD_META = struct.Struct("<IIIIQQ")      # m, n, T, flags, seed, reserved


def _read_exact(fh, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise TruncatedError(f"expected {size} bytes, got {len(buf)}")
    return buf


def _check_header(fh, magic: bytes):
    raw = _read_exact(fh, _HEADER.size)
    got_magic, version, nx, ny, nz, count = _HEADER.unpack(raw)
    if got_magic != magic:
        raise MagicError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}")
    return (nx, ny, nz), count


def write_records(records, path):
    """Write one dataset shard; all records must share one grid shape."""
    records = list(records)
    if not records:
        raise ValueError("refusing to write an empty shard")
    shape = records[0].channels.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RECORD_MAGIC, FORMAT_VERSION, *shape, len(records)))
        for r in records:
            if r.channels.shape != shape:
                raise ValueError("records in one shard must share a grid shape")
            fh.write(_RECORD_META.pack(r.m, r.n, r.total_iterations, 0,
                                       r.seed & 0xFFFFFFFFFFFFFFFF, 0))
            for ch in r.channels.data:
                fh.write(np.asarray(ch, dtype="<f4").ravel(order="F").tobytes())
            fh.write(np.asarray(r.target, dtype="<f4").ravel(order="F").tobytes())


def read_records(path) -> list[SampleRecord]:
    with open(path, "rb") as fh:
        shape, count = _check_header(fh, RECORD_MAGIC)
        nx, ny, nz = shape
        grid = nx * ny * nz
        records = []
        for _ in range(count):
            m, n, t, _flags, seed, _res = _RECORD_META.unpack(
                _read_exact(fh, _RECORD_META.size))
            payload = np.frombuffer(_read_exact(fh, 9 * grid * 4), dtype="<f4")
            chans = np.stack([
                payload[i * grid:(i + 1) * grid].reshape(shape, order="F")
                for i in range(8)
            ]).astype(np.float32)
            target = payload[8 * grid:].reshape(shape, order="F").astype(np.float32)
            records.append(SampleRecord(ChannelTensor(chans), target, m, n,
                                        int(seed), t))
        if fh.read(1):
            raise TruncatedError("trailing bytes after the last record")
    return records


def write_fields(fields, path):
    """Write a stack of 3D scalar grids (trace iterates, predictions)."""
    fields = [np.asarray(f) for f in fields]
    if not fields:
        raise ValueError("refusing to write an empty field stack")
    shape = fields[0].shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FIELD_MAGIC, FORMAT_VERSION, *shape, len(fields)))
        for f in fields:
            if f.shape != shape:
                raise ValueError("fields in one stack must share a shape")
            fh.write(np.asarray(f, dtype="<f4").ravel(order="F").tobytes())


def read_fields(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        shape, count = _check_header(fh, FIELD_MAGIC)
        grid = shape[0] * shape[1] * shape[2]
        out = []
        for _ in range(count):
            raw = np.frombuffer(_read_exact(fh, grid * 4), dtype="<f4")
            out.append(raw.reshape(shape, order="F").astype(np.float32))
        if fh.read(1):
            raise TruncatedError("trailing bytes after the last field")
    return out


def save_trace(trace: IterationTrace, directory):
    """Persist a trace as a field stack plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_fields(trace.fields, directory / "fields.bin")
    meta = {
        "problem": trace.problem.to_dict(),
        "compliances": trace.compliances,
        "wall_times": trace.wall_times,
        "max_changes": trace.max_changes,
        "converged_at": trace.converged_at,
        "converged": trace.converged,
        "format_version": FORMAT_VERSION,
    }
    (directory / "trace.json").write_text(json.dumps(meta, indent=2))


def load_trace(directory) -> IterationTrace:
    directory = Path(directory)
    meta = json.loads((directory / "trace.json").read_text())
    fields = [np.asarray(f, dtype=float) for f in
              read_fields(directory / "fields.bin")]
    return IterationTrace(
        problem=ProblemSpec.from_dict(meta["problem"]),
        fields=fields,
        compliances=meta["compliances"],
        wall_times=meta["wall_times"],
        converged_at=meta["converged_at"],
        converged=meta["converged"],
        max_changes=meta.get("max_changes", []),
    )


def records_from_trace(trace: IterationTrace, strategy: str, count: int,
                       rng: np.random.Generator) -> list[SampleRecord]:
    """Sample ``count`` iteration pairs from one trace and encode them."""
    out = []
    for _ in range(count):
        m, n = sample_iteration_pair(strategy, len(trace) - 1, rng)
        out.append(encode_record(trace, m, n))
    return out
