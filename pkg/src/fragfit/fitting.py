"""Fragment-guided flexible fitting on a CA-only coarse-grained model.

Energies are in arbitrary kcal/mol-like units, lengths in Å, time in
integrator steps. Every ``*_energy_forces`` function returns
``(energy, forces)`` with ``forces = -grad(energy)``, shape ``(N, 3)``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .density import SimulationSpec, ccc_values, simulate_with_gradient
from .errors import DataError, NumericalError
from .mapio import VoxelGrid, trilinear
from .seqalign import FragmentTarget
from .structio import Structure

log = logging.getLogger(__name__)

CA_BOND = 3.8
KT_300 = 0.596


@dataclass
class Topology:
    n_particles: int
    bonds: np.ndarray
    angles: np.ndarray
    angle_rest: np.ndarray
    k_bond: float = 40.0
    bond_length: float = CA_BOND
    k_angle: float = 10.0
    k_rep: float = 20.0
    rep_radius: float = 2.0

    @classmethod
    def from_chain(cls, coords, residue_numbers=None, **constants) -> "Topology":
        """Bonds join residues whose numbers differ by one; angle rest values come from ``coords``."""
        coords = np.asarray(coords, dtype=np.float64)
        n = len(coords)
        numbers = np.arange(n) if residue_numbers is None else np.asarray(residue_numbers)
        linked = np.flatnonzero(np.diff(numbers) == 1)
        bonds = np.stack([linked, linked + 1], axis=1) if len(linked) else np.zeros((0, 2), dtype=int)
        bonded = set(int(i) for i in linked)
        tri = [i for i in range(n - 2) if i in bonded and i + 1 in bonded]
        angles = np.array([[i, i + 1, i + 2] for i in tri], dtype=int).reshape(-1, 3)
        rest = _angle_values(coords, angles)
        return cls(n, bonds.astype(int), angles, rest, **constants)

    def excluded_pairs(self) -> set:
        pairs = {tuple(sorted(map(int, b))) for b in self.bonds}
        pairs |= {(int(a[0]), int(a[2])) for a in self.angles}
        return pairs


def _angle_values(coords, angles):
    if len(angles) == 0:
        return np.zeros(0)
    a = coords[angles[:, 0]] - coords[angles[:, 1]]
    b = coords[angles[:, 2]] - coords[angles[:, 1]]
    cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def bond_energy_forces(coords, topo: Topology):
    f = np.zeros_like(coords)
    if len(topo.bonds) == 0:
        return 0.0, f
    i, j = topo.bonds[:, 0], topo.bonds[:, 1]
    d_vec = coords[j] - coords[i]
    d = np.linalg.norm(d_vec, axis=1)
    stretch = d - topo.bond_length
    energy = 0.5 * topo.k_bond * np.sum(stretch ** 2)
    g = (topo.k_bond * stretch / np.maximum(d, 1e-12))[:, None] * d_vec  # dU/dr_j
    np.add.at(f, j, -g)
    np.add.at(f, i, g)
    return float(energy), f


def angle_energy_forces(coords, topo: Topology):
    f = np.zeros_like(coords)
    if len(topo.angles) == 0:
        return 0.0, f
    i, j, k = topo.angles.T
    a = coords[i] - coords[j]
    b = coords[k] - coords[j]
    la = np.linalg.norm(a, axis=1)
    lb = np.linalg.norm(b, axis=1)
    cos = np.clip(np.einsum("ij,ij->i", a, b) / (la * lb), -1.0, 1.0)
    theta = np.arccos(cos)
    dev = theta - topo.angle_rest
    energy = 0.5 * topo.k_angle * np.sum(dev ** 2)
    sin = np.maximum(np.sqrt(1.0 - cos ** 2), 1e-8)
    dcos_da = b / (la * lb)[:, None] - cos[:, None] * a / (la ** 2)[:, None]
    dcos_db = a / (la * lb)[:, None] - cos[:, None] * b / (lb ** 2)[:, None]
    pref = (-topo.k_angle * dev / sin)[:, None]  # dU/dcos
    ga = pref * dcos_da
    gb = pref * dcos_db
    np.add.at(f, i, -ga)
    np.add.at(f, k, -gb)
    np.add.at(f, j, ga + gb)
    return float(energy), f


def repulsion_energy_forces(coords, topo: Topology):
    f = np.zeros_like(coords)
    contact = 2.0 * topo.rep_radius
    if topo.n_particles < 2:
        return 0.0, f
    pairs = cKDTree(coords).query_pairs(contact, output_type="ndarray")
    if len(pairs) == 0:
        return 0.0, f
    excluded = topo.excluded_pairs()
    keep = np.array([(int(p), int(q)) not in excluded for p, q in pairs], dtype=bool)
    pairs = pairs[keep]
    if len(pairs) == 0:
        return 0.0, f
    i, j = pairs[:, 0], pairs[:, 1]
    d_vec = coords[j] - coords[i]
    d = np.linalg.norm(d_vec, axis=1)
    overlap = contact - d
    energy = 0.5 * topo.k_rep * np.sum(overlap ** 2)
    g = (-topo.k_rep * overlap / np.maximum(d, 1e-12))[:, None] * d_vec  # dU/dr_j
    np.add.at(f, j, -g)
    np.add.at(f, i, g)
    return float(energy), f


def bonded_energy_forces(coords, topo: Topology):
    """Harmonic bonds and angles plus soft-core repulsion between non-bonded pairs."""
    coords = np.asarray(coords, dtype=np.float64)
    eb, fb = bond_energy_forces(coords, topo)
    ea, fa = angle_energy_forces(coords, topo)
    er, fr = repulsion_energy_forces(coords, topo)
    return eb + ea + er, fb + fa + fr


@dataclass
class TmdRestraint:
    atom_ids: np.ndarray
    targets: np.ndarray
    h: float
    t_total: int
    d0: float

    def __post_init__(self):
        self.atom_ids = np.asarray(self.atom_ids, dtype=int)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if len(self.atom_ids) == 0:
            raise DataError("TMD restraint needs at least one atom")
        if len(set(self.atom_ids.tolist())) != len(self.atom_ids):
            raise DataError("TMD atom ids must be distinct")
        if len(self.targets) != len(self.atom_ids):
            raise DataError("TMD targets and atom ids differ in length")
        if self.t_total < 1:
            raise ValueError("t_total must be >= 1")

    @classmethod
    def starting_at(cls, coords, atom_ids, targets, h, t_total) -> "TmdRestraint":
        atom_ids = np.asarray(atom_ids, dtype=int)
        diff = np.asarray(coords)[atom_ids] - np.asarray(targets)
        return cls(atom_ids, targets, h, t_total, float(np.sqrt(np.sum(diff * diff))))

    def gamma(self, t: float) -> float:
        return max(0.0, 1.0 - t / self.t_total)

    def distance(self, coords) -> float:
        diff = np.asarray(coords)[self.atom_ids] - self.targets
        return float(np.sqrt(np.sum(diff * diff)))


def tmd_energy_forces(coords, restraint: TmdRestraint, t: float):
    """Targeted-MD bias on the collective distance to the fragment targets.

    The distance is taken in the map frame, without superposition. At
    zero distance the force is defined as zero.
    """
    if t > restraint.t_total:
        raise ValueError(f"t={t} beyond t_total={restraint.t_total}")
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[restraint.atom_ids] - restraint.targets
    d = float(np.sqrt(np.sum(diff * diff)))
    lag = d - restraint.gamma(t) * restraint.d0
    energy = 0.5 * restraint.h * lag * lag
    f = np.zeros_like(coords)
    if d > 0.0:
        f[restraint.atom_ids] = -restraint.h * lag / d * diff
    return float(energy), f


def mdff_energy_forces(coords, grid: VoxelGrid, k: float, atom_mask=None, rho_max: float | None = None):
    """Density-derived potential k(1 - rho/rho_max) summed over masked atoms.

    Atoms outside the map extent see rho = 0: they contribute ``k`` and
    feel no force.
    """
    coords = np.asarray(coords, dtype=np.float64)
    rho_max = float(np.max(grid.values)) if rho_max is None else rho_max
    if rho_max <= 0.0:
        raise DataError("MDFF needs a map with positive maximum density")
    mask = np.ones(len(coords), dtype=bool) if atom_mask is None else np.asarray(atom_mask, dtype=bool)
    f = np.zeros_like(coords)
    if not mask.any():
        return 0.0, f
    u = (coords[mask] - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    rho, grad = trilinear(grid.values, u, grid.spacing)
    energy = float(np.sum(k * (1.0 - rho / rho_max)))
    f[mask] = (k / rho_max) * grad
    return energy, f


def cdmd_energy_forces(coords, exp_map: VoxelGrid, k: float, sim_spec: SimulationSpec):
    """Correlation-driven potential k(1 - ccc(exp, sim(coords))) with analytic forces."""
    coords = np.asarray(coords, dtype=np.float64)
    if exp_map.dims != sim_spec.dims:
        raise DataError("experimental map and simulation lattice differ")
    e = np.asarray(exp_map.values, dtype=np.float64).ravel()
    ee = float(e @ e)
    if ee == 0.0:
        raise DataError("experimental map is all zero")
    weights = np.ones(len(coords))
    s, atom_idx, flat, ds = simulate_with_gradient(coords, weights, sim_spec)
    ss = float(s @ s)
    if ss == 0.0:
        raise DataError("simulated map is all zero (atoms outside the grid)")
    es = float(e @ s)
    norm = math.sqrt(ee * ss)
    c = es / norm
    # d ccc / d s_v
    dc_ds = (e - es / ss * s) / norm
    w = dc_ds[flat][:, None] * ds
    f = np.zeros_like(coords)
    for axis in range(3):
        f[:, axis] = k * np.bincount(atom_idx, weights=w[:, axis], minlength=len(coords))
    return float(k * (1.0 - c)), f


def positional_restraints(coords, ref_coords, atom_mask, k_pos: float):
    coords = np.asarray(coords, dtype=np.float64)
    mask = np.asarray(atom_mask, dtype=bool)
    diff = np.where(mask[:, None], coords - np.asarray(ref_coords, dtype=np.float64), 0.0)
    energy = 0.5 * k_pos * float(np.sum(diff * diff))
    return energy, -k_pos * diff


@dataclass
class StageSpec:
    """One fitting stage. Bonded terms are always on.

    ``terms`` selects extra potentials among ``tmd``, ``mdff``, ``cdmd``
    and ``posres``; listing several runs them simultaneously. ``map``
    names the density used by ``mdff``/``cdmd`` (``backbone`` or
    ``experimental``). ``restrain`` picks the positional-restraint atoms:
    ``tmd`` (fragment-matched), ``all`` or ``none``.
    """

    name: str
    terms: tuple = ("tmd",)
    map: str = "backbone"
    n_steps: int = 3000
    t_total: int = 1500
    force_tol: float = 0.05
    ccc_target: float | None = None
    sample_interval: int = 50
    restrain: str = "tmd"
    optional: bool = False

    def __post_init__(self):
        self.terms = tuple(self.terms)
        unknown = set(self.terms) - {"tmd", "mdff", "cdmd", "posres"}
        if unknown:
            raise ValueError(f"unknown fitting terms {sorted(unknown)}")
        if self.restrain not in ("tmd", "all", "none"):
            raise ValueError(f"unknown restraint selection {self.restrain!r}")


def default_stages() -> list[StageSpec]:
    return [
        StageSpec("tmd", terms=("tmd",), n_steps=4000, t_total=1500),
        StageSpec("mdff_backbone", terms=("mdff", "posres"), map="backbone", n_steps=500, restrain="tmd"),
        StageSpec(
            "mdff_experimental", terms=("mdff", "posres"), map="experimental", n_steps=500, restrain="all", optional=True
        ),
    ]


@dataclass
class FitConfig:
    mass: float = 100.0
    friction: float = 0.9
    max_displacement: float = 0.1
    k_bond: float = 40.0
    k_angle: float = 10.0
    k_rep: float = 20.0
    rep_radius: float = 2.0
    tmd_h: float = 50.0
    tmd_h_per_atom: bool = False
    k_mdff: float = 0.3 * KT_300
    k_cdmd: float = 100.0
    k_pos: float = 10.0
    sim_resolution: float = 4.0
    energy_limit: float = 1e8
    residue_offset: int = 1
    stages: list = field(default_factory=default_stages)

    def topology_constants(self) -> dict:
        return dict(k_bond=self.k_bond, k_angle=self.k_angle, k_rep=self.k_rep, rep_radius=self.rep_radius)


def correspondences(structure: Structure, chain_id: str, targets: list[FragmentTarget], chain_index: int = 0):
    """Particle ids and target positions for fragment residues present in the model chain."""
    chain = structure.chain(chain_id)
    lookup = {r.index: n for n, r in enumerate(chain.residues)}
    ids, pos = [], []
    missing = 0
    for tgt in targets:
        if tgt.chain_index != chain_index:
            continue
        for number, xyz in zip(tgt.author_indices, tgt.positions):
            n = lookup.get(number)
            if n is None:
                missing += 1
                continue
            ids.append(n)
            pos.append(xyz)
    if missing:
        log.warning("%d fragment residues have no counterpart in chain %s", missing, chain_id)
    return np.array(ids, dtype=int), np.array(pos, dtype=np.float64).reshape(-1, 3)


class _Potential:
    """Sum of the active terms for one stage."""

    def __init__(self, stage, config, topo, tmd, density, sim_spec, ref, restrained):
        self.stage = stage
        self.config = config
        self.topo = topo
        self.tmd = tmd
        self.density = density
        self.sim_spec = sim_spec
        self.ref = ref
        self.restrained = restrained
        self.rho_max = float(np.max(density.values)) if density is not None else None

    def __call__(self, x, t):
        energies = {}
        forces = np.zeros_like(x)
        e, f = bonded_energy_forces(x, self.topo)
        energies["bonded"] = e
        forces += f
        terms = self.stage.terms
        if "tmd" in terms:
            e, f = tmd_energy_forces(x, self.tmd, min(t, self.tmd.t_total))
            energies["tmd"] = e
            forces += f
        if "mdff" in terms:
            e, f = mdff_energy_forces(x, self.density, self.config.k_mdff, rho_max=self.rho_max)
            energies["mdff"] = e
            forces += f
        if "cdmd" in terms:
            e, f = cdmd_energy_forces(x, self.density, self.config.k_cdmd, self.sim_spec)
            energies["cdmd"] = e
            forces += f
        if "posres" in terms and self.restrained.any():
            e, f = positional_restraints(x, self.ref, self.restrained, self.config.k_pos)
            energies["posres"] = e
            forces += f
        return energies, forces


def _max_force(f) -> float:
    return float(np.sqrt(np.max(np.sum(f * f, axis=1)))) if len(f) else 0.0


def _cap(dx, limit):
    norm = np.linalg.norm(dx, axis=1, keepdims=True)
    scale = np.minimum(1.0, limit / np.maximum(norm, 1e-300))
    return dx * scale


def run_fitting(
    initial: Structure,
    targets: list[FragmentTarget],
    config: FitConfig | None = None,
    maps: dict | None = None,
    chain_id: str | None = None,
    chain_index: int = 0,
    stages: list[StageSpec] | None = None,
):
    """Run the configured stages in order and return ``(structure, log_records)``.

    ``maps`` maps names (``backbone``, ``experimental``) to grids; stages
    flagged ``optional`` are skipped when their map is absent.
    """
    config = config or FitConfig()
    stages = list(stages if stages is not None else config.stages)
    maps = maps or {}
    chain_id = chain_id if chain_id is not None else initial.chains[0].chain_id
    chain = initial.chain(chain_id)
    x = chain.ca_coords().copy()
    numbers = [r.index for r in chain.residues]
    topo = Topology.from_chain(x, numbers, **config.topology_constants())
    ids, tgt_pos = correspondences(initial, chain_id, targets, chain_index)
    if len(ids) == 0:
        raise DataError("no fragment correspondences with the initial structure")
    tmd_mask = np.zeros(len(x), dtype=bool)
    tmd_mask[ids] = True

    records = []
    v = np.zeros_like(x)
    for stage in stages:
        density = None
        if {"mdff", "cdmd"} & set(stage.terms):
            density = maps.get(stage.map)
            if density is None:
                if stage.optional:
                    log.info("skipping stage %s: no %s map", stage.name, stage.map)
                    continue
                raise DataError(f"stage {stage.name} needs a {stage.map!r} map")
        x, v = _run_stage(stage, config, topo, x, v, ids, tgt_pos, tmd_mask, density, records)

    out = copy.deepcopy(initial)
    out_chain = out.chain(chain_id)
    for res, new in zip(out_chain.residues, x):
        shift = new - res.ca
        for atom in res.atoms:
            atom.position = atom.position + shift
    return out, records


def _run_stage(stage, config, topo, x, v, ids, tgt_pos, tmd_mask, density, records):
    h = config.tmd_h / len(ids) if config.tmd_h_per_atom else config.tmd_h
    tmd = TmdRestraint.starting_at(x, ids, tgt_pos, h, stage.t_total)
    sim_spec = None
    if "cdmd" in stage.terms:
        sim_spec = SimulationSpec.like(density, max(config.sim_resolution, max(density.spacing)))
    if stage.restrain == "tmd":
        restrained = tmd_mask.copy()
    elif stage.restrain == "all":
        restrained = np.ones(len(x), dtype=bool)
    else:
        restrained = np.zeros(len(x), dtype=bool)
    ref = x.copy()
    potential = _Potential(stage, config, topo, tmd, density, sim_spec, ref, restrained)
    uses_tmd = "tmd" in stage.terms
    minimize = config.friction >= 1.0
    m = config.mass
    limit = config.max_displacement
    v = np.zeros_like(x) if minimize else v
    alpha = 1.0

    def schedule_done(t):
        return not uses_tmd or t >= tmd.t_total or tmd.d0 == 0.0

    def record(t, energies, f, reason=None):
        rec = {
            "stage": stage.name,
            "step": int(t),
            "energies": {k: float(e) for k, e in energies.items()},
            "total": float(sum(energies.values())),
            "rmsd_to_target": float(np.sqrt(np.mean(np.sum((x[ids] - tgt_pos) ** 2, axis=1)))),
            "max_force": _max_force(f),
            "ccc": None,
        }
        if density is not None:
            sim = sim_spec or SimulationSpec.like(density, max(config.sim_resolution, max(density.spacing)))
            s, *_ = simulate_with_gradient(x, np.ones(len(x)), sim)
            if s.any():
                rec["ccc"] = ccc_values(density.values, s)
        if restrained.any() and "posres" in stage.terms:
            disp = np.sqrt(np.sum((x[restrained] - ref[restrained]) ** 2, axis=1))
            rec["restrained_max_disp"] = float(disp.max())
            rec["restrained_disp_bound"] = float(math.sqrt(2.0 * energies.get("posres", 0.0) / config.k_pos))
        if reason:
            rec["stop"] = reason
        records.append(rec)
        return rec

    t = 0
    energies, f = potential(x, t)
    last = record(t, energies, f)
    reason = "step budget"
    for step in range(stage.n_steps):
        if schedule_done(t) and _max_force(f) < stage.force_tol:
            reason = "force tolerance"
            break
        if stage.ccc_target is not None and last["ccc"] is not None and last["ccc"] >= stage.ccc_target:
            reason = "ccc target"
            break
        if minimize:
            e_old = sum(energies.values())
            for _ in range(40):
                dx = _cap(alpha * f / m, limit)
                trial_e, _ = potential(x + dx, t)
                if sum(trial_e.values()) <= e_old:
                    break
                alpha *= 0.5
            else:
                dx = np.zeros_like(x)
            x = x + dx
            alpha = min(1.0, alpha * 1.5)
            t += 1
            energies, f = potential(x, t)
        else:
            v_half = v + 0.5 * f / m
            dx = _cap(v_half, limit)
            x = x + dx
            t += 1
            energies, f = potential(x, t)
            v = (dx + 0.5 * f / m) * (1.0 - config.friction)
        total = sum(energies.values())
        if not np.isfinite(total) or abs(total) > config.energy_limit or not np.all(np.isfinite(x)):
            record(t, energies, f, "diverged")
            raise NumericalError(f"stage {stage.name} diverged at step {t} (energy {total:.3g})")
        if t % stage.sample_interval == 0:
            last = record(t, energies, f)
        elif stage.ccc_target is not None:
            last = _peek_ccc(last, x, density, sim_spec, config)
    record(t, energies, f, reason)
    return x, v


def _peek_ccc(last, x, density, sim_spec, config):
    sim = sim_spec or SimulationSpec.like(density, max(config.sim_resolution, max(density.spacing)))
    s, *_ = simulate_with_gradient(x, np.ones(len(x)), sim)
    out = dict(last)
    out["ccc"] = ccc_values(density.values, s) if s.any() else None
    return out


def write_trajectory(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def config_to_dict(config: FitConfig) -> dict:
    d = asdict(config)
    d["stages"] = [asdict(s) for s in config.stages]
    for s in d["stages"]:
        s["terms"] = list(s["terms"])
    return d


def config_from_dict(d: dict) -> FitConfig:
    d = dict(d)
    stages = d.pop("stages", None)
    cfg = FitConfig(**d)
    if stages is not None:
        cfg.stages = [StageSpec(**s) for s in stages]
    return cfg
