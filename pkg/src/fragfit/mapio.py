"""MRC2014 density maps: parsing, writing, resampling and chunking.

Grids are held x-fastest in memory as arrays of shape ``(nx, ny, nz)``
indexed ``values[ix, iy, iz]``. Voxel ``(ix, iy, iz)`` is centred at
``origin + (ix*sx, iy*sy, iz*sz)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

HEADER_BYTES = 1024
_MODE_FLOAT32 = 2


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Scalar field on a regular lattice with physical origin and spacing (Å)."""

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"values must be a non-empty 3-D array, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must have three components")
        values = values.copy() if values.flags.writeable else values
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    def same_lattice(self, other: "VoxelGrid", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
        )

    def centers(self) -> np.ndarray:
        """Physical voxel centres, shape ``(nx, ny, nz, 3)``."""
        axes = [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_values(self, values) -> "VoxelGrid":
        return VoxelGrid(values, self.spacing, self.origin)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def _header_words(raw: bytes, endian: str):
    ints = struct.unpack(endian + "10i", raw[0:40])
    cella = struct.unpack(endian + "3f", raw[40:52])
    axes = struct.unpack(endian + "3i", raw[64:76])
    nsymbt = struct.unpack(endian + "i", raw[92:96])[0]
    origin = struct.unpack(endian + "3f", raw[196:208])
    return ints, cella, axes, nsymbt, origin


def _detect_endian(raw: bytes) -> str:
    machst = raw[212]
    if machst == 0x11:
        return ">"
    if machst == 0x44:
        return "<"
    # Older files leave MACHST empty; pick the byte order giving a sane MODE.
    mode_le = struct.unpack("<i", raw[12:16])[0]
    return "<" if 0 <= mode_le < 16 else ">"


def parse_mrc(data: bytes) -> VoxelGrid:
    """Parse an MRC2014 MODE-2 map into a :class:`VoxelGrid`.

    Axis order is normalised to x-fastest whatever MAPC/MAPR/MAPS say.
    The origin comes from the ORIGIN words when nonzero, otherwise from
    NXSTART/NYSTART/NZSTART times the spacing.
    """
    if len(data) < HEADER_BYTES:
        raise DataError(f"truncated MRC header: {len(data)} bytes < {HEADER_BYTES}")
    endian = _detect_endian(data)
    ints, cella, axes, nsymbt, origin_words = _header_words(data, endian)
    nc, nr, ns, mode = ints[0:4]
    starts = ints[4:7]
    mxyz = ints[7:10]
    if min(nc, nr, ns) < 1:
        raise DataError(f"non-positive dimensions ({nc}, {nr}, {ns})")
    if mode != _MODE_FLOAT32:
        raise DataError(f"unsupported MRC mode {mode}; only mode 2 (float32) is read")
    if nsymbt < 0:
        raise DataError(f"negative NSYMBT {nsymbt}")
    if sorted(axes) != [1, 2, 3]:
        raise DataError(f"MAPC/MAPR/MAPS must be a permutation of 1,2,3, got {axes}")
    count = nc * nr * ns
    need = HEADER_BYTES + nsymbt + 4 * count
    if need > len(data):
        raise DataError(f"MRC payload too short: need {need} bytes, have {len(data)}")

    raw = np.frombuffer(data, dtype=np.dtype(endian + "f4"), count=count, offset=HEADER_BYTES + nsymbt)
    if not np.all(np.isfinite(raw)):
        raise DataError("map contains NaN or Inf values")
    # File order: sections slowest, columns fastest.
    arr = raw.reshape(ns, nr, nc)
    file_axes = (axes[2], axes[1], axes[0])  # physical axis of array dims 0, 1, 2
    order = [file_axes.index(p) for p in (1, 2, 3)]
    values = np.ascontiguousarray(arr.transpose(order)).astype("<f4", copy=False)

    dims_xyz = values.shape
    sampling = [m if m > 0 else n for m, n in zip(mxyz, dims_xyz)]
    if min(cella) <= 0:
        raise DataError(f"non-positive cell dimensions {cella}")
    spacing = tuple(float(c) / s for c, s in zip(cella, sampling))

    if any(o != 0.0 for o in origin_words):
        origin = tuple(float(o) for o in origin_words)
    else:
        # Starts are listed in column/row/section order.
        crs_start = dict(zip(axes, starts))
        origin = tuple(crs_start[p] * spacing[p - 1] for p in (1, 2, 3))
    return VoxelGrid(values, spacing, origin)


def _origin_words(origin, spacing):
    """ORIGIN words and start indices that reproduce ``origin`` on reading.

    Float32 ORIGIN words are used when they hold the origin exactly.
    Otherwise an origin that is an integer number of voxels from zero is
    written through NXSTART/NYSTART/NZSTART, which the reader multiplies
    back by the spacing; anything else falls back to rounded ORIGIN words.
    """
    if all(float(np.float32(o)) == o for o in origin):
        return tuple(origin), (0, 0, 0)
    starts = [round(o / s) for o, s in zip(origin, spacing)]
    if all(abs(k) < 2**31 and k * s == o for k, s, o in zip(starts, spacing, origin)):
        return (0.0, 0.0, 0.0), tuple(starts)
    return tuple(origin), (0, 0, 0)


def write_mrc(grid: VoxelGrid) -> bytes:
    """Serialise ``grid`` as MRC2014 MODE 2, little-endian, MAPC/MAPR/MAPS = 1,2,3."""
    values = np.asarray(grid.values, dtype="<f4")
    nx, ny, nz = values.shape
    body = np.ascontiguousarray(values.transpose(2, 1, 0)).tobytes()
    header = bytearray(HEADER_BYTES)
    cella = [n * s for n, s in zip((nx, ny, nz), grid.spacing)]
    origin, starts = _origin_words(grid.origin, grid.spacing)
    struct.pack_into("<10i", header, 0, nx, ny, nz, _MODE_FLOAT32, *starts, nx, ny, nz)
    struct.pack_into("<6f", header, 40, *cella, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)
    as64 = values.astype(np.float64)
    struct.pack_into("<3f", header, 76, as64.min(), as64.max(), as64.mean())
    struct.pack_into("<2i", header, 88, 1, 0)  # ISPG, NSYMBT
    struct.pack_into("<4s", header, 104, b"MRCO")  # EXTTYP
    struct.pack_into("<i", header, 108, 20140)  # NVERSION
    struct.pack_into("<3f", header, 196, *origin)
    header[208:212] = b"MAP "
    header[212:216] = bytes([0x44, 0x44, 0x00, 0x00])
    struct.pack_into("<f", header, 216, float(as64.std()))
    struct.pack_into("<i", header, 220, 0)
    return bytes(header) + body


def read_mrc(path) -> VoxelGrid:
    return parse_mrc(Path(path).read_bytes())


def save_mrc(grid: VoxelGrid, path) -> None:
    Path(path).write_bytes(write_mrc(grid))


def trilinear(values: np.ndarray, index_coords: np.ndarray, spacing=(1.0, 1.0, 1.0), clamp: bool = False):
    """Trilinear interpolation at fractional index coordinates.

    Returns ``(value, gradient)`` where the gradient is the analytic
    derivative of the interpolant with respect to physical coordinates.
    Points outside ``[0, n-1]`` on any axis give value 0 and gradient 0,
    unless ``clamp`` is set, in which case coordinates are clipped into
    the lattice first (constant extrapolation).
    """
    values = np.asarray(values, dtype=np.float64)
    u = np.atleast_2d(np.asarray(index_coords, dtype=np.float64))
    dims = np.array(values.shape)
    upper = dims - 1
    if clamp:
        u = np.clip(u, 0.0, upper)
        inside = np.ones(len(u), dtype=bool)
    else:
        inside = np.all((u >= 0.0) & (u <= upper), axis=1)

    base = np.clip(np.floor(u), 0, np.maximum(upper - 1, 0)).astype(np.intp)
    frac = np.where(upper > 0, u - base, 0.0)
    nxt = np.minimum(base + 1, upper)

    val = np.zeros(len(u))
    grad = np.zeros((len(u), 3))
    for cx in (0, 1):
        ix = nxt[:, 0] if cx else base[:, 0]
        wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
        dx = 1.0 if cx else -1.0
        for cy in (0, 1):
            iy = nxt[:, 1] if cy else base[:, 1]
            wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
            dy = 1.0 if cy else -1.0
            for cz in (0, 1):
                iz = nxt[:, 2] if cz else base[:, 2]
                wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                dz = 1.0 if cz else -1.0
                v = values[ix, iy, iz]
                val += wx * wy * wz * v
                grad[:, 0] += dx * wy * wz * v
                grad[:, 1] += wx * dy * wz * v
                grad[:, 2] += wx * wy * dz * v
    # Degenerate axes carry no slope.
    grad[:, upper == 0] = 0.0
    grad /= np.asarray(spacing, dtype=np.float64)
    val[~inside] = 0.0
    grad[~inside] = 0.0
    return val, grad


def resample(grid: VoxelGrid, target_spacing) -> VoxelGrid:
    """Trilinear resampling onto a lattice of ``target_spacing`` with the same origin.

    The new lattice covers the physical extent between the first and last
    voxel centres of the input.
    """
    target = tuple(float(t) for t in np.broadcast_to(np.asarray(target_spacing, dtype=float), (3,)))
    if min(target) <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    new_dims = []
    for n, s, t in zip(grid.dims, grid.spacing, target):
        extent = (n - 1) * s
        new_dims.append(int(math.floor(extent / t + 1e-9)) + 1)
    axes = [np.arange(m) * t / s for m, s, t in zip(new_dims, grid.spacing, target)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals, _ = trilinear(grid.values, mesh, grid.spacing, clamp=True)
    return VoxelGrid(vals.reshape(new_dims), target, grid.origin)


def crop_chunks(grid: VoxelGrid, chunk_dim: int = 32, stride: int | None = None):
    """Split ``grid`` into cubic chunks, zero-padding past the boundary.

    Returns a list of ``(chunk, corner_index)`` pairs; ``corner_index`` is
    the chunk's first voxel in the parent's index space. ``stride``
    defaults to ``chunk_dim`` (non-overlapping tiles).
    """
    stride = chunk_dim if stride is None else stride
    if chunk_dim < 1 or stride < 1:
        raise ValueError("chunk_dim and stride must be >= 1")
    starts = []
    for n in grid.dims:
        last = max(n - chunk_dim, 0)
        axis_starts = list(range(0, last + 1, stride))
        while axis_starts[-1] + chunk_dim < n:
            axis_starts.append(axis_starts[-1] + stride)
        starts.append(axis_starts)

    chunks = []
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                block = np.zeros((chunk_dim,) * 3, dtype=grid.values.dtype)
                src = grid.values[i : i + chunk_dim, j : j + chunk_dim, k : k + chunk_dim]
                block[: src.shape[0], : src.shape[1], : src.shape[2]] = src
                origin = tuple(o + c * s for o, c, s in zip(grid.origin, (i, j, k), grid.spacing))
                chunks.append((VoxelGrid(block, grid.spacing, origin), (i, j, k)))
    return chunks
