"""Simulated density maps, continuous map evaluation and map correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .mapio import VoxelGrid, trilinear
from .structio import Structure

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
TRUNCATION_SIGMAS = 4.0


@dataclass(frozen=True)
class SimulationSpec:
    """Gaussian-kernel map simulation on a fixed target lattice.

    ``resolution`` is read as the kernel FWHM, so the kernel width is
    ``resolution / (2 sqrt(2 ln 2))``.
    """

    resolution: float
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    atom_weight: dict = field(default_factory=dict)
    kernel_sigma: float | None = None

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        sigma = self.resolution * FWHM_TO_SIGMA if self.kernel_sigma is None else float(self.kernel_sigma)
        if sigma <= 0:
            raise ValueError("kernel_sigma must be positive")
        object.__setattr__(self, "kernel_sigma", sigma)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if max(self.spacing) > self.resolution:
            raise ValueError("grid spacing must not exceed the resolution")

    @classmethod
    def like(cls, grid: VoxelGrid, resolution: float, **kw) -> "SimulationSpec":
        return cls(resolution, grid.dims, grid.spacing, grid.origin, **kw)

    def weight(self, element: str) -> float:
        return float(self.atom_weight.get(element, 1.0))


def _atoms_of(source, spec: SimulationSpec):
    if isinstance(source, Structure):
        atoms = list(source.atoms())
        pos = np.array([a.position for a in atoms], dtype=np.float64).reshape(-1, 3)
        w = np.array([spec.weight(a.element) for a in atoms], dtype=np.float64)
    else:
        pos = np.asarray(source, dtype=np.float64).reshape(-1, 3)
        w = np.ones(len(pos))
    return pos, w


def _kernel_stencil(pos: np.ndarray, spec: SimulationSpec):
    """Voxel indices within the truncation radius of every atom.

    Returns ``(atom_idx, flat_voxel_idx, delta)`` where ``delta`` is the
    voxel centre minus the atom position.
    """
    sigma = spec.kernel_sigma
    cutoff = TRUNCATION_SIGMAS * sigma
    spacing = np.asarray(spec.spacing)
    origin = np.asarray(spec.origin)
    dims = np.asarray(spec.dims)
    reach = np.ceil(cutoff / spacing).astype(int)
    offsets = np.stack(
        np.meshgrid(*[np.arange(-r, r + 2) for r in reach], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    base = np.floor((pos - origin) / spacing).astype(int)
    idx = base[:, None, :] + offsets[None, :, :]
    delta = origin + idx * spacing - pos[:, None, :]
    d2 = np.einsum("aki,aki->ak", delta, delta)
    keep = (d2 <= cutoff * cutoff) & np.all((idx >= 0) & (idx < dims), axis=-1)
    atom_idx, k = np.nonzero(keep)
    sel = idx[atom_idx, k]
    flat = np.ravel_multi_index(sel.T, tuple(dims))
    return atom_idx, flat, delta[atom_idx, k]


def simulate_values(pos: np.ndarray, weights: np.ndarray, spec: SimulationSpec) -> np.ndarray:
    sigma = spec.kernel_sigma
    atom_idx, flat, delta = _kernel_stencil(pos, spec)
    g = weights[atom_idx] * np.exp(-np.einsum("ki,ki->k", delta, delta) / (2.0 * sigma * sigma))
    n = int(np.prod(spec.dims))
    return np.bincount(flat, weights=g, minlength=n).reshape(spec.dims)


def simulate_density(source, spec: SimulationSpec) -> VoxelGrid:
    """Sum of truncated Gaussians (cut at 4 sigma, not renormalised) at voxel centres.

    ``source`` is a :class:`Structure` (per-element weights from ``spec.atom_weight``)
    or an ``(N, 3)`` coordinate array (unit weights).
    """
    pos, w = _atoms_of(source, spec)
    if len(pos) == 0:
        raise DataError("cannot simulate a map from an empty atom set")
    return VoxelGrid(simulate_values(pos, w, spec), spec.spacing, spec.origin)


def simulate_with_gradient(pos: np.ndarray, weights: np.ndarray, spec: SimulationSpec):
    """Simulated values plus the sparse Jacobian pieces needed for chain rules.

    Returns ``(values, atom_idx, flat_idx, dvalue_dpos)`` where
    ``dvalue_dpos[m]`` is the derivative of voxel ``flat_idx[m]`` with
    respect to the position of atom ``atom_idx[m]``.
    """
    sigma2 = spec.kernel_sigma ** 2
    atom_idx, flat, delta = _kernel_stencil(pos, spec)
    g = weights[atom_idx] * np.exp(-np.einsum("ki,ki->k", delta, delta) / (2.0 * sigma2))
    n = int(np.prod(spec.dims))
    values = np.bincount(flat, weights=g, minlength=n)
    dg = g[:, None] * delta / sigma2
    return values, atom_idx, flat, dg


def interpolate(grid: VoxelGrid, point):
    """Trilinear value and analytic gradient (per Å) at physical ``point``.

    Accepts a single point or an ``(M, 3)`` array. Points outside the
    lattice extent give value 0 and gradient 0.
    """
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    u = (pts.reshape(-1, 3) - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    val, grad = trilinear(grid.values, u, grid.spacing)
    if single:
        return float(val[0]), grad[0]
    return val, grad


def ccc(a: VoxelGrid, b: VoxelGrid, centered: bool = False) -> float:
    """Cross-correlation coefficient over voxels.

    The default is the plain normalised inner product with no mean
    subtraction; ``centered=True`` gives the Pearson variant.
    """
    if not a.same_lattice(b):
        raise DataError("ccc requires identical lattices")
    return ccc_values(a.values, b.values, centered)


def ccc_values(a: np.ndarray, b: np.ndarray, centered: bool = False) -> float:
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if centered:
        x = x - x.mean()
        y = y - y.mean()
    xx = float(np.dot(x, x))
    yy = float(np.dot(y, y))
    if xx == 0.0 or yy == 0.0:
        raise DataError("ccc undefined for an all-zero map")
    return float(np.dot(x, y) / math.sqrt(xx * yy))
