"""Recognition-output grids: label generation, noise injection and losses.

The coarse lattice has cells of ``2 * fine_spacing``; coarse cell
``(i, j, k)`` spans ``[origin + 2*(i, j, k), origin + 2*(i+1, j+1, k+1))``
and holds fine voxels ``2i, 2i+1`` (and likewise on y, z). A coarse
``VoxelGrid``'s nominal voxel position is therefore the cell's lower
corner, not its centre.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .mapio import VoxelGrid, read_mrc, save_mrc
from .structio import AA_ALPHABET, AA_INDEX, BACKBONE_ATOMS, Structure

N_AA = 20
PPV_LIMIT = 4.0
BACKBONE_RADIUS = 1.2
PROB_FLOOR = 1e-9
DICE_SMOOTH = 1e-7
MANIFEST = "manifest.json"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class CoarseGrid:
    """Geometry of a feature-grid set: coarse dims, shared origin, fine spacing."""

    origin: tuple[float, float, float]
    dims: tuple[int, int, int]
    fine_spacing: float = 1.0

    @property
    def coarse_spacing(self) -> float:
        return 2.0 * self.fine_spacing

    @property
    def fine_dims(self) -> tuple[int, int, int]:
        return tuple(2 * d for d in self.dims)

    @classmethod
    def around(cls, structure: Structure, padding: float = 6.0, fine_spacing: float = 1.0) -> "CoarseGrid":
        pos = structure.atom_positions()
        if len(pos) == 0:
            raise DataError("structure has no atoms")
        cell = 2.0 * fine_spacing
        lo = np.floor((pos.min(axis=0) - padding) / cell) * cell
        hi = pos.max(axis=0) + padding
        dims = np.ceil((hi - lo) / cell).astype(int) + 1
        return cls(tuple(float(v) for v in lo), tuple(int(d) for d in dims), fine_spacing)


@dataclass(eq=False)
class FeatureGrids:
    """The five recognition outputs plus label-side masks.

    Vector fields are arrays over the coarse lattice with a trailing
    component axis: ``ca_offset`` and ``ppv`` are ``(cx, cy, cz, 3)``,
    ``aa_dist`` is ``(cx, cy, cz, 20)`` in ``AA_ALPHABET`` order.
    """

    bb_prob: VoxelGrid
    ca_prob: VoxelGrid
    ca_offset: np.ndarray
    ppv: np.ndarray
    aa_dist: np.ndarray
    ca_mask: np.ndarray | None = None
    ppv_mask: np.ndarray | None = None
    noise_log: dict | None = field(default=None, repr=False)

    @property
    def grid(self) -> CoarseGrid:
        return CoarseGrid(self.ca_prob.origin, self.ca_prob.dims, self.bb_prob.spacing[0])

    def validate(self, atol: float = 1e-6) -> None:
        cdims = self.ca_prob.dims
        if self.ca_offset.shape != cdims + (3,) or self.ppv.shape != cdims + (3,):
            raise DataError("offset/ppv grids do not match the coarse lattice")
        if self.aa_dist.shape != cdims + (N_AA,):
            raise DataError("aa_dist grid does not match the coarse lattice")
        if self.bb_prob.dims != tuple(2 * d for d in cdims):
            raise DataError("backbone grid must have twice the coarse dims")
        if not np.allclose(self.ca_prob.spacing, 2.0 * np.asarray(self.bb_prob.spacing)):
            raise DataError("coarse spacing must be twice the backbone spacing")
        if not np.allclose(self.ca_prob.origin, self.bb_prob.origin):
            raise DataError("coarse and backbone lattices must share an origin")
        for name, g in (("bb_prob", self.bb_prob.values), ("ca_prob", self.ca_prob.values)):
            if g.min() < -atol or g.max() > 1 + atol:
                raise DataError(f"{name} outside [0, 1]")
        if self.ca_offset.min() < -atol or self.ca_offset.max() > self.grid.coarse_spacing + atol:
            raise DataError("ca_offset outside the cell")
        if np.abs(self.ppv).max(initial=0.0) > PPV_LIMIT + atol:
            raise DataError("ppv outside [-4, 4]")
        if self.aa_dist.min() < -atol or not np.allclose(self.aa_dist.sum(axis=-1), 1.0, atol=atol):
            raise DataError("aa_dist cells must be probability distributions")

    def equals(self, other: "FeatureGrids") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            self.bb_prob == other.bb_prob
            and self.ca_prob == other.ca_prob
            and same(self.ca_offset, other.ca_offset)
            and same(self.ppv, other.ppv)
            and same(self.aa_dist, other.aa_dist)
            and same(self.ca_mask, other.ca_mask)
            and same(self.ppv_mask, other.ppv_mask)
        )


def _backbone_label(structure: Structure, grid: CoarseGrid) -> np.ndarray:
    dims = np.array(grid.fine_dims)
    h = grid.fine_spacing
    origin = np.asarray(grid.origin)
    out = np.zeros(grid.fine_dims)
    pos = structure.atom_positions(BACKBONE_ATOMS)
    if len(pos) == 0:
        return out
    reach = int(math.ceil(BACKBONE_RADIUS / h))
    offsets = np.stack(
        np.meshgrid(*[np.arange(-reach, reach + 2)] * 3, indexing="ij"), axis=-1
    ).reshape(-1, 3)
    base = np.floor((pos - origin) / h).astype(int)
    idx = base[:, None, :] + offsets[None]
    delta = origin + idx * h - pos[:, None, :]
    near = np.einsum("aki,aki->ak", delta, delta) <= BACKBONE_RADIUS ** 2
    near &= np.all((idx >= 0) & (idx < dims), axis=-1)
    sel = idx[near]
    out[sel[:, 0], sel[:, 1], sel[:, 2]] = 1.0
    return out


def generate_labels(structure: Structure, grid: CoarseGrid) -> FeatureGrids:
    """Ground-truth feature grids for ``structure`` on ``grid``.

    Raises :class:`DataError` if two CA atoms share a coarse cell or a
    CA falls outside the lattice. Consecutive residues (author numbers
    differing by one within a chain) get a PPV; a PPV longer than 4 Å is
    treated as a chain break and masked.
    """
    cdims = grid.dims
    cell = grid.coarse_spacing
    origin = np.asarray(grid.origin)
    ca_prob = np.zeros(cdims)
    offset = np.zeros(cdims + (3,))
    ppv = np.zeros(cdims + (3,))
    aa = np.full(cdims + (N_AA,), 1.0 / N_AA)
    ca_mask = np.zeros(cdims, dtype=bool)
    ppv_mask = np.zeros(cdims, dtype=bool)

    for chain in structure.chains:
        residues = chain.residues
        for n, res in enumerate(residues):
            ca = res.ca
            rel = ca - origin
            ijk = np.floor(rel / cell).astype(int)
            if np.any(ijk < 0) or np.any(ijk >= cdims):
                raise DataError(f"CA of {chain.chain_id}:{res.index} lies outside the feature grid")
            key = tuple(int(v) for v in ijk)
            if ca_mask[key]:
                raise DataError(f"two CA atoms share coarse cell {key} (at {chain.chain_id}:{res.index})")
            ca_mask[key] = True
            ca_prob[key] = 1.0
            offset[key] = np.clip(rel - ijk * cell, 0.0, cell)
            aa[key] = 0.0
            aa[key][AA_INDEX[res.aa]] = 1.0
            if n + 1 < len(residues) and residues[n + 1].index == res.index + 1:
                vec = residues[n + 1].ca - ca
                if np.linalg.norm(vec) <= PPV_LIMIT + 1e-6:
                    ppv[key] = np.clip(vec, -PPV_LIMIT, PPV_LIMIT)
                    ppv_mask[key] = True

    fine = grid.fine_spacing
    return FeatureGrids(
        bb_prob=VoxelGrid(_backbone_label(structure, grid), (fine,) * 3, grid.origin),
        ca_prob=VoxelGrid(ca_prob, (cell,) * 3, grid.origin),
        ca_offset=offset,
        ppv=ppv,
        aa_dist=aa,
        ca_mask=ca_mask,
        ppv_mask=ppv_mask,
    )


@dataclass(frozen=True)
class NoiseSpec:
    """Controlled corruption of oracle labels standing in for network errors.

    ``fp_rate`` is the expected number of false-positive CA cells per 1000
    label-empty cells. ``score_sigma`` spreads surviving true-cell
    probabilities below 1 (half-normal); zero leaves them untouched.
    """

    ca_dropout: float = 0.0
    fp_rate: float = 0.0
    offset_jitter_sigma: float = 0.0
    ppv_jitter_sigma: float = 0.0
    aa_dirichlet_alpha: float = 0.0
    bb_noise_sigma: float = 0.0
    score_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ca_dropout <= 1.0:
            raise ValueError("ca_dropout must lie in [0, 1]")
        if not 0.0 <= self.fp_rate <= 1000.0:
            raise ValueError("fp_rate must lie in [0, 1000]")
        for name in ("offset_jitter_sigma", "ppv_jitter_sigma", "aa_dirichlet_alpha", "bb_noise_sigma", "score_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _dirichlet_rows(rng: np.random.Generator, base: np.ndarray, alpha: float) -> np.ndarray:
    # Gamma draws row by row give Dirichlet(base + alpha) for every row at once.
    conc = base + alpha
    g = rng.standard_gamma(conc)
    sums = g.sum(axis=-1, keepdims=True)
    # With tiny concentrations every gamma draw can underflow; fall back to the base.
    bad = sums[..., 0] <= 0
    if np.any(bad):
        g[bad] = base[bad]
        sums[bad] = base[bad].sum(axis=-1, keepdims=True)
    return g / sums


def inject_noise(labels: FeatureGrids, spec: NoiseSpec) -> FeatureGrids:
    """Corrupt oracle labels reproducibly under ``spec.seed``.

    Every random stream is drawn over the full lattice in a fixed order,
    so output bits depend only on the labels and ``spec``. The returned
    grids keep the label-side masks and carry a ``noise_log`` with the
    surviving-true and false-positive cell masks.
    """
    rng = np.random.default_rng(spec.seed)
    cdims = labels.ca_prob.dims
    cell = labels.grid.coarse_spacing
    true = labels.ca_prob.values > 0.5

    u_drop = rng.random(cdims)
    u_fp = rng.random(cdims)
    survivors = true & (u_drop >= spec.ca_dropout)
    dropped = true & ~survivors
    fp = ~true & (u_fp < spec.fp_rate / 1000.0)

    offset_noise = rng.normal(size=cdims + (3,))
    fp_offset = rng.uniform(0.0, cell, size=cdims + (3,))
    ppv_noise = rng.normal(size=cdims + (3,))
    fp_dir = rng.normal(size=cdims + (3,))
    fp_len = rng.uniform(0.0, PPV_LIMIT, size=cdims)
    fp_type = rng.integers(0, N_AA, size=cdims)
    score_noise = np.abs(rng.normal(size=cdims))
    fp_score = rng.random(cdims)

    ca_prob = np.asarray(labels.ca_prob.values, dtype=np.float64).copy()
    offset = labels.ca_offset.copy()
    ppv = labels.ppv.copy()
    aa = labels.aa_dist.copy()

    if spec.score_sigma > 0:
        ca_prob[survivors] = np.clip(ca_prob[survivors] - spec.score_sigma * score_noise[survivors], 0.0, 1.0)
    if spec.offset_jitter_sigma > 0:
        offset[survivors] = np.clip(
            offset[survivors] + spec.offset_jitter_sigma * offset_noise[survivors], 0.0, cell
        )
    if spec.ppv_jitter_sigma > 0:
        ppv[survivors] = np.clip(ppv[survivors] + spec.ppv_jitter_sigma * ppv_noise[survivors], -PPV_LIMIT, PPV_LIMIT)

    ca_prob[dropped] = 0.0
    offset[dropped] = 0.0
    ppv[dropped] = 0.0
    aa[dropped] = 1.0 / N_AA

    if np.any(fp):
        ca_prob[fp] = fp_score[fp]
        offset[fp] = fp_offset[fp]
        d = fp_dir[fp]
        d /= np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)
        ppv[fp] = np.clip(d * fp_len[fp][:, None], -PPV_LIMIT, PPV_LIMIT)
        fp_base = np.zeros((int(fp.sum()), N_AA))
        fp_base[np.arange(len(fp_base)), fp_type[fp]] = 1.0
        aa[fp] = fp_base

    if spec.aa_dirichlet_alpha > 0:
        noisy = survivors | fp
        aa[noisy] = _dirichlet_rows(rng, aa[noisy], spec.aa_dirichlet_alpha)

    bb = np.asarray(labels.bb_prob.values, dtype=np.float64)
    bb_noise = rng.normal(size=bb.shape)
    if spec.bb_noise_sigma > 0:
        bb = np.clip(bb + spec.bb_noise_sigma * bb_noise, 0.0, 1.0)

    return FeatureGrids(
        bb_prob=labels.bb_prob.with_values(bb),
        ca_prob=labels.ca_prob.with_values(ca_prob),
        ca_offset=offset,
        ppv=ppv,
        aa_dist=aa,
        ca_mask=None if labels.ca_mask is None else labels.ca_mask.copy(),
        ppv_mask=None if labels.ppv_mask is None else labels.ppv_mask.copy(),
        noise_log={"true": true, "survivors": survivors, "dropped": dropped, "false_positives": fp},
    )


# Losses. Argument order is always (prediction, label).


def dice_loss(pred, label) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    num = 2.0 * np.sum(x * y) + DICE_SMOOTH
    den = np.sum(x * x) + np.sum(y * y) + DICE_SMOOTH
    return float(1.0 - num / den)


def _values(g):
    return g.values if isinstance(g, VoxelGrid) else np.asarray(g)


def loss_backbone(pred, label) -> float:
    return dice_loss(_values(pred), _values(label))


def class_balance(label) -> float:
    """beta = 1 - (number of positives) / (number of cells)."""
    y = np.asarray(_values(label), dtype=np.float64)
    return float(1.0 - y.sum() / y.size)


def weighted_bce(pred, label) -> float:
    x = np.clip(np.asarray(_values(pred), dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(_values(label), dtype=np.float64)
    beta = class_balance(y)
    terms = beta * y * np.log(x) + (1.0 - beta) * (1.0 - y) * np.log(1.0 - x)
    return float(-terms.sum() / y.size)


def loss_ca_detection(pred, label) -> float:
    """Dice loss plus class-balanced BCE on the CA probability grid."""
    x = np.clip(np.asarray(_values(pred), dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    return dice_loss(x, _values(label)) + weighted_bce(x, label)


def _masked_mse(pred, label, mask) -> float:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("mask is empty; masked mean undefined")
    diff = np.asarray(pred, dtype=np.float64)[m] - np.asarray(label, dtype=np.float64)[m]
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def loss_ca_location(pred, label, mask) -> float:
    return _masked_mse(pred, label, mask)


def loss_ppv(pred, label, mask) -> float:
    return _masked_mse(pred, label, mask)


def loss_aa(pred, label, mask) -> float:
    """Mean cross entropy of one-hot ``label`` under ``pred`` over masked cells."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("mask is empty; masked mean undefined")
    p = np.maximum(np.asarray(pred, dtype=np.float64)[m], PROB_FLOOR)
    z = np.asarray(label, dtype=np.float64)[m]
    return float(-np.sum(z * np.log(p)) / m.sum())


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    loc: float = 1.0
    aa: float = 1.0
    ppv: float = 0.05


def loss_total(bb, rec, loc, aa, ppv, weights: LossWeights = LossWeights()) -> float:
    return float(bb + weights.rec * rec + weights.loc * loc + weights.aa * aa + weights.ppv * ppv)


def compute_losses(pred: FeatureGrids, label: FeatureGrids, weights: LossWeights = LossWeights()) -> dict:
    if label.ca_mask is None or label.ppv_mask is None:
        raise ValueError("label grids must carry ca_mask and ppv_mask")
    parts = {
        "bb": loss_backbone(pred.bb_prob, label.bb_prob),
        "rec": loss_ca_detection(pred.ca_prob, label.ca_prob),
        "loc": loss_ca_location(pred.ca_offset, label.ca_offset, label.ca_mask),
        "aa": loss_aa(pred.aa_dist, label.aa_dist, label.ca_mask),
        "ppv": loss_ppv(pred.ppv, label.ppv, label.ppv_mask),
    }
    parts["total"] = loss_total(parts["bb"], parts["rec"], parts["loc"], parts["aa"], parts["ppv"], weights)
    return parts


# Feature directory: one MRC per scalar channel plus a JSON manifest.

_VECTOR_NAMES = ("x", "y", "z")


def _channel_files():
    files = ["bb_prob.mrc", "ca_prob.mrc"]
    files += [f"offset_{c}.mrc" for c in _VECTOR_NAMES]
    files += [f"ppv_{c}.mrc" for c in _VECTOR_NAMES]
    files += [f"aa_{j:02d}.mrc" for j in range(N_AA)]
    return files


def save_feature_dir(grids: FeatureGrids, path, extra: dict | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    coarse = grids.ca_prob
    save_mrc(grids.bb_prob, out / "bb_prob.mrc")
    save_mrc(coarse, out / "ca_prob.mrc")
    for c, name in enumerate(_VECTOR_NAMES):
        save_mrc(coarse.with_values(grids.ca_offset[..., c]), out / f"offset_{name}.mrc")
        save_mrc(coarse.with_values(grids.ppv[..., c]), out / f"ppv_{name}.mrc")
    for j in range(N_AA):
        save_mrc(coarse.with_values(grids.aa_dist[..., j]), out / f"aa_{j:02d}.mrc")
    files = _channel_files()
    if grids.ca_mask is not None:
        save_mrc(coarse.with_values(grids.ca_mask.astype(np.float32)), out / "ca_mask.mrc")
        files.append("ca_mask.mrc")
    if grids.ppv_mask is not None:
        save_mrc(coarse.with_values(grids.ppv_mask.astype(np.float32)), out / "ppv_mask.mrc")
        files.append("ppv_mask.mrc")
    manifest = {
        "format_version": FORMAT_VERSION,
        "aa_order": AA_ALPHABET,
        "coarse_dims": list(coarse.dims),
        "coarse_spacing": coarse.spacing[0],
        "fine_spacing": grids.bb_prob.spacing[0],
        "origin": list(coarse.origin),
        "files": files,
    }
    if grids.noise_log is not None:
        manifest["noise_counts"] = {k: int(np.count_nonzero(v)) for k, v in grids.noise_log.items()}
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_feature_dir(path) -> FeatureGrids:
    src = Path(path)
    mpath = src / MANIFEST
    if not mpath.exists():
        raise DataError(f"{src} has no {MANIFEST}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("aa_order", AA_ALPHABET) != AA_ALPHABET:
        raise DataError("feature directory uses an unsupported AA channel order")
    for name in _channel_files():
        if not (src / name).exists():
            raise DataError(f"feature directory missing {name}")
    bb = read_mrc(src / "bb_prob.mrc")
    coarse = read_mrc(src / "ca_prob.mrc")

    def channel(name):
        g = read_mrc(src / name)
        if g.dims != coarse.dims:
            raise DataError(f"{name} does not match the coarse lattice")
        return np.asarray(g.values, dtype=np.float64)

    offset = np.stack([channel(f"offset_{c}.mrc") for c in _VECTOR_NAMES], axis=-1)
    ppv = np.stack([channel(f"ppv_{c}.mrc") for c in _VECTOR_NAMES], axis=-1)
    aa = np.stack([channel(f"aa_{j:02d}.mrc") for j in range(N_AA)], axis=-1)
    aa = np.clip(aa, 0.0, None)
    sums = aa.sum(axis=-1, keepdims=True)
    aa = np.where(sums > 0, aa / np.where(sums > 0, sums, 1.0), 1.0 / N_AA)
    ca_mask = channel("ca_mask.mrc") > 0.5 if (src / "ca_mask.mrc").exists() else None
    ppv_mask = channel("ppv_mask.mrc") > 0.5 if (src / "ppv_mask.mrc").exists() else None
    grids = FeatureGrids(
        bb_prob=bb.with_values(np.asarray(bb.values, dtype=np.float64)),
        ca_prob=coarse.with_values(np.asarray(coarse.values, dtype=np.float64)),
        ca_offset=offset,
        ppv=ppv,
        aa_dist=aa,
        ca_mask=ca_mask,
        ppv_mask=ppv_mask,
    )
    grids.validate()
    return grids


def noise_spec_dict(spec: NoiseSpec) -> dict:
    return asdict(spec)
